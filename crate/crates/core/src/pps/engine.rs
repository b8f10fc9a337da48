use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::multiset::Multiset;
use crate::rng::{engine_rng, EngineRng};
use crate::symbol::Symbol;
use crate::trace::{
    digest_of, FiredRule, ModelKind, PpsCellRecord, PpsSnapshot, Snapshot, Terminal, Trace,
    TraceHeader, TRACE_VERSION,
};

use super::model::{PpsModel, PpsRule, ValidationError};
use super::state::{
    normalize_edge, BondMode, Cell, CellId, Configuration, RuleInstance, StepMode, StepSelection,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("cell {0} is not live in this configuration")]
    UnknownCell(CellId),
    #[error("stale selection: {0}")]
    StaleSelection(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub bonds: BondMode,
    /// When set, a dying cell releases its residual contents to the
    /// environment instead of discarding them.
    pub death_releases_objects: bool,
}

impl EngineOptions {
    /// Dynamic bonds when the model declares bond-making rules, static
    /// otherwise.
    pub fn for_model(model: &PpsModel) -> EngineOptions {
        EngineOptions {
            bonds: if model.bond_rules.is_empty() {
                BondMode::Static
            } else {
                BondMode::Dynamic
            },
            death_releases_objects: false,
        }
    }
}

pub struct Engine {
    model: PpsModel,
    options: EngineOptions,
}

impl Engine {
    pub fn new(model: PpsModel, options: EngineOptions) -> Result<Engine, EngineError> {
        model.validate()?;
        Ok(Engine { model, options })
    }

    /// Engine with per-model default options.
    pub fn with_defaults(model: PpsModel) -> Result<Engine, EngineError> {
        let options = EngineOptions::for_model(&model);
        Engine::new(model, options)
    }

    pub fn model(&self) -> &PpsModel {
        &self.model
    }

    pub fn options(&self) -> EngineOptions {
        self.options
    }

    pub fn initial_configuration(&self) -> Configuration {
        let cells: BTreeMap<CellId, Cell> = self
            .model
            .initial_cells
            .iter()
            .enumerate()
            .map(|(i, (contents, cell_type))| {
                let id = CellId(i as u64);
                (
                    id,
                    Cell {
                        id,
                        cell_type: cell_type.clone(),
                        contents: contents.clone(),
                    },
                )
            })
            .collect();
        let bonds = self
            .model
            .initial_graph
            .iter()
            .map(|&(a, b)| normalize_edge(CellId(a as u64), CellId(b as u64)))
            .collect();
        Configuration {
            next_cell_id: cells.len() as u64,
            cells,
            bonds,
            environment: self.model.env_init.clone(),
            step_index: 0,
        }
    }

    /// Every grounded instance applicable to `cell` in isolation, in
    /// canonical order (rule declaration order, then neighbour id for `in`
    /// communication). Communication triggers are promoters: presence is
    /// required here, against the pre-step contents, but they are never
    /// charged against the consumable pools.
    pub fn applicable_instances(
        &self,
        config: &Configuration,
        cell_id: CellId,
    ) -> Result<Vec<RuleInstance>, EngineError> {
        let cell = config
            .cells
            .get(&cell_id)
            .ok_or(EngineError::UnknownCell(cell_id))?;
        let mut out = Vec::new();
        for (rule_idx, rule) in self.model.rules.iter().enumerate() {
            if rule.subject_type() != &cell.cell_type {
                continue;
            }
            match rule {
                PpsRule::Transform { consumed, .. }
                | PpsRule::Differentiate { consumed, .. }
                | PpsRule::Divide { consumed, .. }
                | PpsRule::Die { consumed, .. } => {
                    if cell.contents.count(consumed) >= 1 {
                        out.push(RuleInstance {
                            cell: cell_id,
                            rule: rule_idx,
                            source: None,
                        });
                    }
                }
                PpsRule::CommExit { moved, .. } => {
                    if cell.contents.count(moved) >= 1 {
                        out.push(RuleInstance {
                            cell: cell_id,
                            rule: rule_idx,
                            source: None,
                        });
                    }
                }
                PpsRule::CommEnter { trigger, moved, .. } => {
                    let trigger_ok = trigger
                        .as_ref()
                        .map_or(true, |t| cell.contents.count(t) >= 1);
                    if trigger_ok && config.environment.count(moved) >= 1 {
                        out.push(RuleInstance {
                            cell: cell_id,
                            rule: rule_idx,
                            source: None,
                        });
                    }
                }
                PpsRule::CommIn { trigger, moved, .. } => {
                    let trigger_ok = trigger
                        .as_ref()
                        .map_or(true, |t| cell.contents.count(t) >= 1);
                    if !trigger_ok {
                        continue;
                    }
                    let mut sources: Vec<CellId> = config
                        .bonded_neighbours(cell_id)
                        .filter(|n| {
                            config
                                .cells
                                .get(n)
                                .map_or(false, |nc| nc.contents.count(moved) >= 1)
                        })
                        .collect();
                    sources.sort();
                    for source in sources {
                        out.push(RuleInstance {
                            cell: cell_id,
                            rule: rule_idx,
                            source: Some(source),
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    fn all_candidates(&self, config: &Configuration) -> Vec<RuleInstance> {
        let ids: Vec<CellId> = config.cells.keys().copied().collect();
        #[cfg(feature = "parallel")]
        let per_cell: Vec<Vec<RuleInstance>> = ids
            .par_iter()
            .map(|id| {
                self.applicable_instances(config, *id)
                    .expect("enumeration over live ids")
            })
            .collect();
        #[cfg(not(feature = "parallel"))]
        let per_cell: Vec<Vec<RuleInstance>> = ids
            .iter()
            .map(|id| {
                self.applicable_instances(config, *id)
                    .expect("enumeration over live ids")
            })
            .collect();
        per_cell.into_iter().flatten().collect()
    }

    /// One step's worth of simultaneous rule applications.
    ///
    /// Greedy completion: draw uniformly at random among the instances that
    /// are still addable (consumable objects available in the residual pools,
    /// structural exclusivity respected), charge the pools, repeat until
    /// nothing is addable. Stale candidates are lazily discarded, which makes
    /// each draw a rejection sample, i.e. exactly uniform over the currently
    /// valid candidates. Under `ArbitraryParallel` a uniformly random
    /// non-empty subset of the maximal selection is kept.
    pub fn select_step(
        &self,
        config: &Configuration,
        mode: StepMode,
        rng: &mut EngineRng,
    ) -> StepSelection {
        let mut live = self.all_candidates(config);
        let mut cell_pools: BTreeMap<CellId, Multiset> = config
            .cells
            .iter()
            .map(|(id, c)| (*id, c.contents.clone()))
            .collect();
        let mut env_pool = config.environment.clone();
        let mut structural_taken: BTreeSet<CellId> = BTreeSet::new();
        let mut nonstructural_taken: BTreeSet<CellId> = BTreeSet::new();

        let mut selected = Vec::new();
        while !live.is_empty() {
            let i = rng.gen_range(0..live.len());
            let inst = live[i];
            if !self.addable(
                &inst,
                &cell_pools,
                &env_pool,
                &structural_taken,
                &nonstructural_taken,
            ) {
                live.swap_remove(i);
                continue;
            }
            self.charge(&inst, &mut cell_pools, &mut env_pool);
            if self.model.rules[inst.rule].is_structural() {
                structural_taken.insert(inst.cell);
            } else {
                nonstructural_taken.insert(inst.cell);
            }
            selected.push(inst);
        }
        selected.sort();

        if mode == StepMode::ArbitraryParallel && !selected.is_empty() {
            // Uniform over non-empty subsets, by rejection.
            loop {
                let mask: Vec<bool> = selected.iter().map(|_| rng.gen_bool(0.5)).collect();
                if mask.iter().any(|&keep| keep) {
                    selected = selected
                        .into_iter()
                        .zip(mask)
                        .filter_map(|(inst, keep)| keep.then_some(inst))
                        .collect();
                    break;
                }
            }
        }
        StepSelection {
            instances: selected,
        }
    }

    /// Pool availability and exclusivity are the only conditions that change
    /// during selection (types, bonds, and promoter presence are fixed
    /// pre-step facts already checked at candidate construction), and both
    /// only ever tighten, so a rejected candidate can be dropped permanently.
    fn addable(
        &self,
        inst: &RuleInstance,
        cell_pools: &BTreeMap<CellId, Multiset>,
        env_pool: &Multiset,
        structural_taken: &BTreeSet<CellId>,
        nonstructural_taken: &BTreeSet<CellId>,
    ) -> bool {
        let rule = &self.model.rules[inst.rule];
        if structural_taken.contains(&inst.cell) {
            return false;
        }
        if rule.is_structural() && nonstructural_taken.contains(&inst.cell) {
            return false;
        }
        match rule {
            PpsRule::Transform { consumed, .. }
            | PpsRule::Differentiate { consumed, .. }
            | PpsRule::Divide { consumed, .. }
            | PpsRule::Die { consumed, .. } => cell_pools[&inst.cell].count(consumed) >= 1,
            PpsRule::CommExit { moved, .. } => cell_pools[&inst.cell].count(moved) >= 1,
            PpsRule::CommEnter { moved, .. } => env_pool.count(moved) >= 1,
            PpsRule::CommIn { moved, .. } => {
                let source = inst.source.expect("in-instance carries its source");
                cell_pools[&source].count(moved) >= 1
            }
        }
    }

    fn charge(
        &self,
        inst: &RuleInstance,
        cell_pools: &mut BTreeMap<CellId, Multiset>,
        env_pool: &mut Multiset,
    ) {
        let rule = &self.model.rules[inst.rule];
        let take = |pool: &mut Multiset, sym: &Symbol| {
            pool.remove(sym, 1).expect("charged after addable check");
        };
        match rule {
            PpsRule::Transform { consumed, .. }
            | PpsRule::Differentiate { consumed, .. }
            | PpsRule::Divide { consumed, .. }
            | PpsRule::Die { consumed, .. } => {
                take(cell_pools.get_mut(&inst.cell).unwrap(), consumed)
            }
            PpsRule::CommExit { moved, .. } => {
                take(cell_pools.get_mut(&inst.cell).unwrap(), moved)
            }
            PpsRule::CommEnter { moved, .. } => take(env_pool, moved),
            PpsRule::CommIn { moved, .. } => {
                let source = inst.source.expect("in-instance carries its source");
                take(cell_pools.get_mut(&source).unwrap(), moved)
            }
        }
    }

    /// Atomic application: all consumptions are removed first, then all
    /// productions land, then structural effects (division, death, retyping)
    /// run, then the bond graph is brought up to date.
    pub fn apply_step(
        &self,
        config: &Configuration,
        selection: &StepSelection,
    ) -> Result<Configuration, EngineError> {
        let mut next = config.clone();
        let stale = |what: String| EngineError::StaleSelection(what);

        // Consumption.
        for inst in &selection.instances {
            let rule = self
                .model
                .rules
                .get(inst.rule)
                .ok_or_else(|| stale(format!("rule index {} out of range", inst.rule)))?;
            let consume_from_cell = |next: &mut Configuration, id: CellId, sym: &Symbol| {
                let cell = next
                    .cells
                    .get_mut(&id)
                    .ok_or_else(|| stale(format!("cell {id} not live")))?;
                cell.contents
                    .remove(sym, 1)
                    .map_err(|e| stale(e.to_string()))
            };
            match rule {
                PpsRule::Transform { consumed, .. }
                | PpsRule::Differentiate { consumed, .. }
                | PpsRule::Divide { consumed, .. }
                | PpsRule::Die { consumed, .. } => {
                    consume_from_cell(&mut next, inst.cell, consumed)?
                }
                PpsRule::CommExit { moved, .. } => consume_from_cell(&mut next, inst.cell, moved)?,
                PpsRule::CommEnter { moved, .. } => next
                    .environment
                    .remove(moved, 1)
                    .map_err(|e| stale(e.to_string()))?,
                PpsRule::CommIn { moved, .. } => {
                    let source = inst
                        .source
                        .ok_or_else(|| stale("in-instance without source".to_string()))?;
                    consume_from_cell(&mut next, source, moved)?
                }
            }
        }

        // Production, then structural effects.
        let mut divisions: Vec<(CellId, Symbol, Symbol)> = Vec::new();
        let mut deaths: Vec<CellId> = Vec::new();
        for inst in &selection.instances {
            match &self.model.rules[inst.rule] {
                PpsRule::Transform { produced, .. } => {
                    let cell = next.cells.get_mut(&inst.cell).unwrap();
                    cell.contents
                        .add_assign(produced)
                        .map_err(|e| stale(e.to_string()))?;
                }
                PpsRule::CommIn { moved, .. } | PpsRule::CommEnter { moved, .. } => {
                    let cell = next.cells.get_mut(&inst.cell).unwrap();
                    cell.contents
                        .insert(moved.clone(), 1)
                        .map_err(|e| stale(e.to_string()))?;
                }
                PpsRule::CommExit { moved, .. } => {
                    next.environment
                        .insert(moved.clone(), 1)
                        .map_err(|e| stale(e.to_string()))?;
                }
                PpsRule::Differentiate {
                    produced, to_type, ..
                } => {
                    let cell = next.cells.get_mut(&inst.cell).unwrap();
                    cell.cell_type = to_type.clone();
                    cell.contents
                        .insert(produced.clone(), 1)
                        .map_err(|e| stale(e.to_string()))?;
                }
                PpsRule::Divide {
                    left_product,
                    right_product,
                    ..
                } => divisions.push((inst.cell, left_product.clone(), right_product.clone())),
                PpsRule::Die { .. } => deaths.push(inst.cell),
            }
        }

        for dead in deaths {
            let cell = next
                .cells
                .remove(&dead)
                .ok_or_else(|| stale(format!("dying cell {dead} not live")))?;
            if self.options.death_releases_objects {
                next.environment
                    .add_assign(&cell.contents)
                    .map_err(|e| stale(e.to_string()))?;
            }
        }

        // Daughters inherit the full residual contents with the consumed
        // object already gone; each gets its own product object.
        let mut daughter_map: BTreeMap<CellId, (CellId, CellId)> = BTreeMap::new();
        for (parent_id, left, right) in divisions {
            let parent = next
                .cells
                .remove(&parent_id)
                .ok_or_else(|| stale(format!("dividing cell {parent_id} not live")))?;
            let spawn = |product: Symbol, next: &mut Configuration| {
                let id = CellId(next.next_cell_id);
                next.next_cell_id += 1;
                let mut contents = parent.contents.clone();
                contents
                    .insert(product, 1)
                    .expect("daughter contents overflow");
                next.cells.insert(
                    id,
                    Cell {
                        id,
                        cell_type: parent.cell_type.clone(),
                        contents,
                    },
                );
                id
            };
            let left_id = spawn(left, &mut next);
            let right_id = spawn(right, &mut next);
            daughter_map.insert(parent_id, (left_id, right_id));
        }

        next.step_index += 1;
        next.bonds = match self.options.bonds {
            BondMode::Dynamic => self.dynamic_bonds(&next.cells),
            BondMode::Static => {
                carried_bonds(&config.bonds, &daughter_map, &next.cells)
            }
        };
        Ok(next)
    }

    /// Bring a configuration's bond graph up to date for the engine's bond
    /// mode: recomputed from scratch from the bond-making rules when
    /// dynamic, carried over with dead endpoints pruned when static. (Inside
    /// [`Engine::apply_step`] the static path additionally lets division
    /// daughters inherit the parent's bonds.)
    pub fn recompute_bonds(&self, config: &Configuration) -> Configuration {
        let mut next = config.clone();
        next.bonds = match self.options.bonds {
            BondMode::Dynamic => self.dynamic_bonds(&next.cells),
            BondMode::Static => config
                .bonds
                .iter()
                .copied()
                .filter(|&(a, b)| next.cells.contains_key(&a) && next.cells.contains_key(&b))
                .collect(),
        };
        next
    }

    /// The bond graph licensed by the bond-making rules: `{i, j}` is an edge
    /// iff some rule matches with i, j in either role. No self-loops.
    pub fn dynamic_bonds(&self, cells: &BTreeMap<CellId, Cell>) -> BTreeSet<(CellId, CellId)> {
        let ids: Vec<CellId> = cells.keys().copied().collect();
        let mut pairs = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                pairs.push((a, b));
            }
        }
        let matches = |a: &Cell, b: &Cell| {
            self.model.bond_rules.iter().any(|rule| {
                a.cell_type == rule.left_type
                    && b.cell_type == rule.right_type
                    && a.contents.contains(&rule.left_required)
                    && b.contents.contains(&rule.right_required)
            })
        };
        let check = |&(a, b): &(CellId, CellId)| {
            let ca = &cells[&a];
            let cb = &cells[&b];
            (matches(ca, cb) || matches(cb, ca)).then_some((a, b))
        };
        #[cfg(feature = "parallel")]
        let edges: Vec<(CellId, CellId)> = pairs.par_iter().filter_map(check).collect();
        #[cfg(not(feature = "parallel"))]
        let edges: Vec<(CellId, CellId)> = pairs.iter().filter_map(check).collect();
        edges.into_iter().collect()
    }

    /// Deterministic full run. Halts early when a step selects nothing.
    pub fn run(&self, steps: u64, mode: StepMode, seed: u64) -> Result<Trace, EngineError> {
        let mut rng = engine_rng(seed);
        let mut config = self.initial_configuration();
        let mut snapshots = vec![self.snapshot(&config, &StepSelection::default())];
        let mut terminal = Terminal::Completed { steps };
        for _ in 0..steps {
            let selection = self.select_step(&config, mode, &mut rng);
            if selection.is_empty() {
                terminal = Terminal::Halted {
                    step: config.step_index + 1,
                };
                break;
            }
            config = self.apply_step(&config, &selection)?;
            snapshots.push(self.snapshot(&config, &selection));
        }
        Ok(Trace {
            header: TraceHeader {
                v: TRACE_VERSION,
                kind: ModelKind::Pps,
                model: digest_of(&self.model),
                mode: Some(mode.to_string()),
                seed: Some(seed),
                steps,
                bonds: Some(self.options.bonds.to_string()),
                death_releases_objects: Some(self.options.death_releases_objects),
            },
            snapshots,
            terminal,
        })
    }

    /// Independent runs over a seed list. With the `parallel` feature the
    /// runs execute on the rayon pool; output order and content are identical
    /// to [`Engine::run_batch_seq`] either way.
    pub fn run_batch(
        &self,
        steps: u64,
        mode: StepMode,
        seeds: &[u64],
    ) -> Result<Vec<Trace>, EngineError> {
        #[cfg(feature = "parallel")]
        {
            seeds
                .par_iter()
                .map(|&seed| self.run(steps, mode, seed))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.run_batch_seq(steps, mode, seeds)
        }
    }

    /// Sequential reference path for the batch runner.
    pub fn run_batch_seq(
        &self,
        steps: u64,
        mode: StepMode,
        seeds: &[u64],
    ) -> Result<Vec<Trace>, EngineError> {
        seeds.iter().map(|&seed| self.run(steps, mode, seed)).collect()
    }

    fn snapshot(&self, config: &Configuration, selection: &StepSelection) -> Snapshot {
        let cells = config
            .cells
            .values()
            .map(|c| PpsCellRecord {
                id: c.id.0,
                cell_type: c.cell_type.0.clone(),
                contents: c.contents.clone(),
            })
            .collect();
        let bonds = config.bonds.iter().map(|&(a, b)| (a.0, b.0)).collect();
        let mut fired: Vec<FiredRule> = Vec::new();
        for inst in &selection.instances {
            match fired.last_mut() {
                Some(last)
                    if last.cell == inst.cell.0
                        && last.rule == inst.rule
                        && last.src == inst.source.map(|s| s.0) =>
                {
                    last.n += 1;
                }
                _ => fired.push(FiredRule {
                    cell: inst.cell.0,
                    rule: inst.rule,
                    src: inst.source.map(|s| s.0),
                    n: 1,
                    text: self.model.rules[inst.rule].to_string(),
                }),
            }
        }
        Snapshot::Pps(PpsSnapshot {
            step: config.step_index,
            cells,
            bonds,
            env: config.environment.clone(),
            fired,
        })
    }
}

fn carried_bonds(
    previous: &BTreeSet<(CellId, CellId)>,
    daughter_map: &BTreeMap<CellId, (CellId, CellId)>,
    cells: &BTreeMap<CellId, Cell>,
) -> BTreeSet<(CellId, CellId)> {
    let expand = |id: CellId| -> Vec<CellId> {
        match daughter_map.get(&id) {
            Some(&(l, r)) => vec![l, r],
            None => vec![id],
        }
    };
    let mut out = BTreeSet::new();
    for &(a, b) in previous {
        for &ea in &expand(a) {
            for &eb in &expand(b) {
                if ea != eb && cells.contains_key(&ea) && cells.contains_key(&eb) {
                    out.insert(normalize_edge(ea, eb));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiset::mset;
    use crate::pps::model::{BondRule, CellType};

    fn sym(name: &str) -> Symbol {
        Symbol::new(name)
    }

    fn base_model() -> PpsModel {
        PpsModel {
            alphabet: ["a", "b", "c", "p", "q", "x", "m"]
                .iter()
                .map(|s| sym(s))
                .collect(),
            cell_types: [CellType::new("t"), CellType::new("u")].into_iter().collect(),
            bond_rules: vec![],
            initial_graph: BTreeSet::new(),
            env_init: Multiset::new(),
            initial_cells: vec![],
            rules: vec![],
        }
    }

    fn engine(model: PpsModel) -> Engine {
        Engine::with_defaults(model).unwrap()
    }

    #[test]
    fn transform_applicable_on_direct_match() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Transform {
            consumed: sym("a"),
            produced: mset(&[("b", 2)]),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let got = eng.applicable_instances(&config, CellId(0)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].rule, 0);
    }

    #[test]
    fn transform_not_applicable_when_consumed_absent() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("x", 1)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Transform {
            consumed: sym("a"),
            produced: mset(&[("b", 2)]),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        assert!(eng.applicable_instances(&config, CellId(0)).unwrap().is_empty());
    }

    #[test]
    fn comm_in_records_the_source_neighbour() {
        // Hand enumeration: one (rule, neighbour) pair; c1 holds the trigger
        // p, bonded c2 holds the movable q.
        let mut model = base_model();
        model.initial_cells = vec![
            (mset(&[("p", 1)]), CellType::new("t")),
            (mset(&[("q", 1)]), CellType::new("t")),
        ];
        model.initial_graph = [(0, 1)].into_iter().collect();
        model.rules = vec![PpsRule::CommIn {
            trigger: Some(sym("p")),
            moved: sym("q"),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let got = eng.applicable_instances(&config, CellId(0)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].source, Some(CellId(1)));
        // c2 also holds no trigger p, so nothing applies there.
        assert!(eng.applicable_instances(&config, CellId(1)).unwrap().is_empty());
    }

    #[test]
    fn unknown_cell_is_an_error() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1)]), CellType::new("t"))];
        let eng = engine(model);
        let config = eng.initial_configuration();
        assert_eq!(
            eng.applicable_instances(&config, CellId(9)),
            Err(EngineError::UnknownCell(CellId(9)))
        );
    }

    #[test]
    fn maximality_rewrites_both_copies() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 2)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Transform {
            consumed: sym("a"),
            produced: mset(&[("b", 1)]),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut rng = engine_rng(1);
        let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
        assert_eq!(sel.instances.len(), 2);
        let next = eng.apply_step(&config, &sel).unwrap();
        assert_eq!(next.cells[&CellId(0)].contents, mset(&[("b", 2)]));
    }

    #[test]
    fn structural_exclusivity_picks_exactly_one() {
        // Brute force over the two valid selections {Transform}, {Die}:
        // never both.
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1)]), CellType::new("t"))];
        model.rules = vec![
            PpsRule::Transform {
                consumed: sym("a"),
                produced: mset(&[("b", 1)]),
                cell_type: CellType::new("t"),
            },
            PpsRule::Die {
                consumed: sym("a"),
                cell_type: CellType::new("t"),
            },
        ];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut seen = BTreeSet::new();
        for seed in 0..40 {
            let mut rng = engine_rng(seed);
            let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
            assert_eq!(sel.instances.len(), 1, "selection must pick exactly one");
            seen.insert(sel.instances[0].rule);
        }
        assert_eq!(seen, [0usize, 1usize].into_iter().collect());
    }

    #[test]
    fn contended_object_moves_exactly_once() {
        // Two trigger-holding cells bonded to one q-holder: q is consumed once.
        let mut model = base_model();
        model.initial_cells = vec![
            (mset(&[("p", 1)]), CellType::new("t")),
            (mset(&[("p", 1)]), CellType::new("t")),
            (mset(&[("q", 1)]), CellType::new("u")),
        ];
        model.initial_graph = [(0, 2), (1, 2)].into_iter().collect();
        model.rules = vec![PpsRule::CommIn {
            trigger: Some(sym("p")),
            moved: sym("q"),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut receivers = BTreeSet::new();
        for seed in 0..40 {
            let mut rng = engine_rng(seed);
            let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
            assert_eq!(sel.instances.len(), 1);
            let next = eng.apply_step(&config, &sel).unwrap();
            let total_q: u64 = next.cells.values().map(|c| c.contents.count(&sym("q"))).sum();
            assert_eq!(total_q, 1);
            receivers.insert(sel.instances[0].cell);
        }
        assert_eq!(receivers.len(), 2, "both contenders must be reachable");
    }

    #[test]
    fn divide_replaces_parent_with_two_daughters() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1), ("x", 1)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Divide {
            consumed: sym("a"),
            left_product: sym("b"),
            right_product: sym("c"),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut rng = engine_rng(3);
        let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
        let next = eng.apply_step(&config, &sel).unwrap();
        assert!(!next.cells.contains_key(&CellId(0)), "parent gone");
        assert_eq!(next.cells.len(), 2);
        let contents: Vec<Multiset> =
            next.cells.values().map(|c| c.contents.clone()).collect();
        assert_eq!(contents[0], mset(&[("b", 1), ("x", 1)]));
        assert_eq!(contents[1], mset(&[("c", 1), ("x", 1)]));
    }

    #[test]
    fn death_removes_cell_and_bonds() {
        let mut model = base_model();
        model.initial_cells = vec![
            (mset(&[("a", 1)]), CellType::new("t")),
            (mset(&[("x", 1)]), CellType::new("t")),
        ];
        model.initial_graph = [(0, 1)].into_iter().collect();
        model.rules = vec![PpsRule::Die {
            consumed: sym("a"),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut rng = engine_rng(5);
        let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
        let next = eng.apply_step(&config, &sel).unwrap();
        assert!(!next.cells.contains_key(&CellId(0)));
        assert!(next.bonds.is_empty());
        // Contents discarded by default.
        assert!(next.environment.is_empty());
    }

    #[test]
    fn death_can_release_contents() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1), ("x", 2)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Die {
            consumed: sym("a"),
            cell_type: CellType::new("t"),
        }];
        let options = EngineOptions {
            bonds: BondMode::Static,
            death_releases_objects: true,
        };
        let eng = Engine::new(model, options).unwrap();
        let config = eng.initial_configuration();
        let mut rng = engine_rng(5);
        let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
        let next = eng.apply_step(&config, &sel).unwrap();
        assert_eq!(next.environment, mset(&[("x", 2)]));
    }

    #[test]
    fn dynamic_bonds_from_rules() {
        // All three pairs checked against the single rule: only c1, c2 both
        // hold m.
        let mut model = base_model();
        model.initial_cells = vec![
            (mset(&[("m", 1)]), CellType::new("t")),
            (mset(&[("m", 1)]), CellType::new("t")),
            (Multiset::new(), CellType::new("t")),
        ];
        model.bond_rules = vec![BondRule {
            left_type: CellType::new("t"),
            left_required: mset(&[("m", 1)]),
            right_required: mset(&[("m", 1)]),
            right_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let bonds = eng.dynamic_bonds(&config.cells);
        assert_eq!(bonds, [(CellId(0), CellId(1))].into_iter().collect());
    }

    #[test]
    fn empty_requirements_give_complete_graph() {
        let mut model = base_model();
        model.initial_cells = vec![
            (Multiset::new(), CellType::new("t")),
            (Multiset::new(), CellType::new("t")),
            (Multiset::new(), CellType::new("t")),
        ];
        model.bond_rules = vec![BondRule {
            left_type: CellType::new("t"),
            left_required: Multiset::new(),
            right_required: Multiset::new(),
            right_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        assert_eq!(eng.dynamic_bonds(&config.cells).len(), 3);
    }

    #[test]
    fn static_mode_prunes_dead_endpoints_only() {
        let mut model = base_model();
        model.initial_cells = vec![
            (mset(&[("a", 1)]), CellType::new("t")),
            (mset(&[("x", 1)]), CellType::new("t")),
            (mset(&[("x", 1)]), CellType::new("t")),
        ];
        model.initial_graph = [(0, 1), (1, 2)].into_iter().collect();
        model.rules = vec![PpsRule::Die {
            consumed: sym("a"),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model); // no bond rules -> static
        let config = eng.initial_configuration();
        let mut rng = engine_rng(5);
        let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
        let next = eng.apply_step(&config, &sel).unwrap();
        assert_eq!(
            next.bonds,
            [(CellId(1), CellId(2))].into_iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn zero_steps_trace_has_only_initial_snapshot() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 1)]), CellType::new("t"))];
        let eng = engine(model);
        let trace = eng.run(0, StepMode::MaximalParallel, 7).unwrap();
        assert_eq!(trace.snapshots.len(), 1);
        assert_eq!(trace.terminal, Terminal::Completed { steps: 0 });
    }

    #[test]
    fn halts_when_nothing_applies() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("x", 1)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Transform {
            consumed: sym("a"),
            produced: mset(&[("b", 1)]),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let trace = eng.run(5, StepMode::MaximalParallel, 7).unwrap();
        assert_eq!(trace.snapshots.len(), 1);
        assert_eq!(trace.terminal, Terminal::Halted { step: 1 });
    }

    #[test]
    fn same_seed_gives_byte_identical_traces() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 3)]), CellType::new("t"))];
        model.rules = vec![
            PpsRule::Transform {
                consumed: sym("a"),
                produced: mset(&[("b", 1)]),
                cell_type: CellType::new("t"),
            },
            PpsRule::Transform {
                consumed: sym("a"),
                produced: mset(&[("c", 1)]),
                cell_type: CellType::new("t"),
            },
        ];
        let eng = engine(model);
        let a = eng.run(4, StepMode::MaximalParallel, 99).unwrap().to_jsonl();
        let b = eng.run(4, StepMode::MaximalParallel, 99).unwrap().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn arbitrary_mode_selects_nonempty_subset() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 4)]), CellType::new("t"))];
        model.rules = vec![PpsRule::Transform {
            consumed: sym("a"),
            produced: mset(&[("b", 1)]),
            cell_type: CellType::new("t"),
        }];
        let eng = engine(model);
        let config = eng.initial_configuration();
        let mut sizes = BTreeSet::new();
        for seed in 0..60 {
            let mut rng = engine_rng(seed);
            let sel = eng.select_step(&config, StepMode::ArbitraryParallel, &mut rng);
            assert!(!sel.instances.is_empty());
            assert!(sel.instances.len() <= 4);
            sizes.insert(sel.instances.len());
        }
        assert!(sizes.len() > 1, "subset sizes must vary");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn contents_with_divider() -> impl Strategy<Value = Multiset> {
            proptest::collection::btree_map("[w-z]", 1u64..4, 0..4).prop_map(|m| {
                let mut ms: Multiset = m
                    .into_iter()
                    .map(|(name, n)| (Symbol::new(&name), n))
                    .collect();
                ms.insert(sym("a"), 1).unwrap();
                ms
            })
        }

        proptest! {
            /// Daughters inherit exactly the parent's residual plus their
            /// own product object.
            #[test]
            fn division_preserves_residual_objects(contents in contents_with_divider()) {
                let mut model = base_model();
                model.alphabet.extend(["w", "x", "y", "z"].iter().map(|s| sym(s)));
                model.initial_cells = vec![(contents.clone(), CellType::new("t"))];
                model.rules = vec![PpsRule::Divide {
                    consumed: sym("a"),
                    left_product: sym("b"),
                    right_product: sym("c"),
                    cell_type: CellType::new("t"),
                }];
                let eng = engine(model);
                let config = eng.initial_configuration();
                let mut rng = engine_rng(1);
                let sel = eng.select_step(&config, StepMode::MaximalParallel, &mut rng);
                let next = eng.apply_step(&config, &sel).unwrap();
                let residual = contents.subtract(&mset(&[("a", 1)])).unwrap();
                let daughters: Vec<&Cell> = next.cells.values().collect();
                prop_assert_eq!(daughters.len(), 2);
                for (daughter, product) in daughters.iter().zip(["b", "c"]) {
                    let back = daughter
                        .contents
                        .subtract(&mset(&[(product, 1)]))
                        .expect("daughter carries its product");
                    prop_assert_eq!(&back, &residual);
                }
            }
        }
    }

    #[test]
    fn batch_matches_sequential_reference() {
        let mut model = base_model();
        model.initial_cells = vec![(mset(&[("a", 2)]), CellType::new("t"))];
        model.rules = vec![
            PpsRule::Transform {
                consumed: sym("a"),
                produced: mset(&[("b", 1)]),
                cell_type: CellType::new("t"),
            },
            PpsRule::Die {
                consumed: sym("a"),
                cell_type: CellType::new("t"),
            },
        ];
        let eng = engine(model);
        let seeds: Vec<u64> = (0..16).collect();
        let par = eng.run_batch(5, StepMode::MaximalParallel, &seeds).unwrap();
        let seq = eng.run_batch_seq(5, StepMode::MaximalParallel, &seeds).unwrap();
        let par_text: Vec<String> = par.iter().map(Trace::to_jsonl).collect();
        let seq_text: Vec<String> = seq.iter().map(Trace::to_jsonl).collect();
        assert_eq!(par_text, seq_text);
    }
}
