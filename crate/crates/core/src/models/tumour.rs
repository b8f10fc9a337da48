//! Tumour growth as a population system.
//!
//! Lineage encoding: every cell carries exactly one lineage-state object.
//! `s` marks the founding stem cell, `meta` a metastatic stem. Young
//! transitory cells carry `y<i>` (metastatic lineage: `my<i>`), where `i`
//! counts divisions since birth; division rules consume the state object and
//! hand the incremented one to both daughters, so ageing rides the division
//! and every young cell divides every step. At maturity `T_mat` the cell
//! differentiates to the `trans` (`mtrans`) type with age object `a<i>`
//! (`ma<i>`), stops dividing, ages one step at a time, and dies when the age
//! object reaches `D_t` (`D_m`, with `D_m < D_t`; the metastatic lineage
//! dies younger). The stem cell chooses between asymmetric division (breeding
//! a transitory lineage) and symmetric division (breeding a metastatic stem)
//! through the run RNG; a stem never dies. Position objects `pos_<x>_<y>` are
//! inert markers inherited by daughters.

use std::collections::BTreeSet;

use crate::multiset::{mset, Multiset};
use crate::pps::{BondRule, CellType, PpsModel, PpsRule};
use crate::symbol::Symbol;

use super::ParameterError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TumourParams {
    /// Divisions until a transitory cell matures.
    pub maturity_age: u64,
    /// Age at which a matured transitory cell dies.
    pub transitory_death_age: u64,
    /// Age at which a matured metatransitory cell dies.
    pub meta_death_age: u64,
    /// Side length of the square position grid.
    pub grid: u32,
}

impl Default for TumourParams {
    fn default() -> TumourParams {
        TumourParams {
            maturity_age: 3,
            transitory_death_age: 6,
            meta_death_age: 4,
            grid: 10,
        }
    }
}

fn sym(name: &str) -> Symbol {
    Symbol::new(name)
}

pub const STEM: &str = "stem";
pub const TRANS: &str = "trans";
pub const MTRANS: &str = "mtrans";

pub fn build_tumour(params: TumourParams) -> Result<PpsModel, ParameterError> {
    let t = params.maturity_age;
    let dm = params.meta_death_age;
    let dt = params.transitory_death_age;
    if !(t < dm && dm < dt) {
        return Err(ParameterError(format!(
            "need maturity_age < meta_death_age < transitory_death_age, got {t} / {dm} / {dt}"
        )));
    }
    if params.grid < 1 {
        return Err(ParameterError("grid must be at least 1x1".to_string()));
    }

    let mut alphabet: BTreeSet<Symbol> = [sym("s"), sym("meta")].into_iter().collect();
    for i in 0..=t {
        alphabet.insert(sym(&format!("y{i}")));
        alphabet.insert(sym(&format!("my{i}")));
    }
    for i in t..=dt {
        alphabet.insert(sym(&format!("a{i}")));
    }
    for i in t..=dm {
        alphabet.insert(sym(&format!("ma{i}")));
    }
    for x in 0..params.grid {
        for y in 0..params.grid {
            alphabet.insert(sym(&format!("pos_{x}_{y}")));
        }
    }

    let stem = CellType::new(STEM);
    let trans = CellType::new(TRANS);
    let mtrans = CellType::new(MTRANS);

    let mut rules = vec![
        // Stem division, asymmetric: breed a transitory lineage.
        PpsRule::Divide {
            consumed: sym("s"),
            left_product: sym("s"),
            right_product: sym("y0"),
            cell_type: stem.clone(),
        },
        // Stem division, symmetric: breed a metastatic stem.
        PpsRule::Divide {
            consumed: sym("s"),
            left_product: sym("s"),
            right_product: sym("meta"),
            cell_type: stem.clone(),
        },
        // Metastatic stems breed the metatransitory lineage.
        PpsRule::Divide {
            consumed: sym("meta"),
            left_product: sym("meta"),
            right_product: sym("my0"),
            cell_type: stem.clone(),
        },
    ];
    for i in 0..t {
        rules.push(PpsRule::Divide {
            consumed: sym(&format!("y{i}")),
            left_product: sym(&format!("y{}", i + 1)),
            right_product: sym(&format!("y{}", i + 1)),
            cell_type: stem.clone(),
        });
        rules.push(PpsRule::Divide {
            consumed: sym(&format!("my{i}")),
            left_product: sym(&format!("my{}", i + 1)),
            right_product: sym(&format!("my{}", i + 1)),
            cell_type: stem.clone(),
        });
    }
    rules.push(PpsRule::Differentiate {
        consumed: sym(&format!("y{t}")),
        produced: sym(&format!("a{t}")),
        from_type: stem.clone(),
        to_type: trans.clone(),
    });
    rules.push(PpsRule::Differentiate {
        consumed: sym(&format!("my{t}")),
        produced: sym(&format!("ma{t}")),
        from_type: stem.clone(),
        to_type: mtrans.clone(),
    });
    for i in t..dt {
        rules.push(PpsRule::Transform {
            consumed: sym(&format!("a{i}")),
            produced: mset(&[(&format!("a{}", i + 1), 1)]),
            cell_type: trans.clone(),
        });
    }
    rules.push(PpsRule::Die {
        consumed: sym(&format!("a{dt}")),
        cell_type: trans.clone(),
    });
    for i in t..dm {
        rules.push(PpsRule::Transform {
            consumed: sym(&format!("ma{i}")),
            produced: mset(&[(&format!("ma{}", i + 1), 1)]),
            cell_type: mtrans.clone(),
        });
    }
    rules.push(PpsRule::Die {
        consumed: sym(&format!("ma{dm}")),
        cell_type: mtrans.clone(),
    });

    let centre = params.grid / 2;
    let start = mset(&[("s", 1), (&format!("pos_{centre}_{centre}"), 1)]);

    let model = PpsModel {
        alphabet,
        cell_types: [stem, trans, mtrans].into_iter().collect(),
        bond_rules: Vec::<BondRule>::new(),
        initial_graph: BTreeSet::new(),
        env_init: Multiset::new(),
        initial_cells: vec![(start, CellType::new(STEM))],
        rules,
    };
    model
        .validate()
        .expect("tumour builder produces a valid model");
    Ok(model)
}

/// Age encoded in a cell's lineage-state object: `y<i>`/`my<i>` for young
/// cells, `a<i>`/`ma<i>` for matured ones. `None` for stems.
pub fn cell_age(contents: &Multiset) -> Option<u64> {
    for (sym, _) in contents.iter() {
        let name = sym.as_str();
        for prefix in ["my", "ma", "y", "a"] {
            if let Some(rest) = name.strip_prefix(prefix) {
                if let Ok(age) = rest.parse::<u64>() {
                    return Some(age);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pps::{Engine, StepMode};
    use crate::trace::Snapshot;

    #[test]
    fn default_initial_config_is_one_stem_at_age_zero() {
        let model = build_tumour(TumourParams::default()).unwrap();
        assert_eq!(model.initial_cells.len(), 1);
        let (contents, cell_type) = &model.initial_cells[0];
        assert_eq!(cell_type, &CellType::new(STEM));
        assert_eq!(contents.count(&Symbol::new("s")), 1);
        assert_eq!(cell_age(contents), None);
    }

    #[test]
    fn bad_death_order_is_a_parameter_error() {
        let params = TumourParams {
            meta_death_age: 7,
            transitory_death_age: 6,
            ..TumourParams::default()
        };
        assert!(build_tumour(params).is_err());
    }

    #[test]
    fn three_steps_double_three_times() {
        // Death and maturity beyond the horizon: every cell divides every
        // step.
        let params = TumourParams {
            maturity_age: 5,
            meta_death_age: 7,
            transitory_death_age: 9,
            grid: 3,
        };
        let model = build_tumour(params).unwrap();
        let engine = Engine::with_defaults(model).unwrap();
        let trace = engine.run(3, StepMode::MaximalParallel, 11).unwrap();
        let counts: Vec<usize> = trace
            .snapshots
            .iter()
            .map(|s| match s {
                Snapshot::Pps(p) => p.cells.len(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(counts, vec![1, 2, 4, 8]);
    }

    #[test]
    fn stem_cell_survives_every_step() {
        let model = build_tumour(TumourParams::default()).unwrap();
        let engine = Engine::with_defaults(model).unwrap();
        let trace = engine.run(12, StepMode::MaximalParallel, 5).unwrap();
        for snap in &trace.snapshots {
            let Snapshot::Pps(p) = snap else { unreachable!() };
            assert!(
                p.cells.iter().any(|c| c.cell_type.as_str() == STEM),
                "step {} lost all stem cells",
                p.step
            );
        }
    }
}
