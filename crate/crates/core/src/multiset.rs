//! Finite multisets of object symbols, the universal currency of cell
//! contents and environments.
//!
//! Counts are `u64` with checked arithmetic: overflow and underflow are
//! reported errors, never wraparound, because silent wrap would corrupt
//! conservation checks. A count of zero is represented by absence; no entry
//! ever stores zero. The textual form used by the model language and in
//! traces is `{a:2, b:1}`, with `{}` for the empty multiset.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symbol::Symbol;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MultisetError {
    #[error("multiset underflow: removing {needed} of '{symbol}' but only {available} present")]
    Underflow {
        symbol: Symbol,
        available: u64,
        needed: u64,
    },
    #[error("multiset overflow on '{symbol}'")]
    Overflow { symbol: Symbol },
}

/// A finite bag of symbols. Immutable-style operations return new values;
/// the in-place mutators are used by engine-private scratch state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Multiset {
    entries: BTreeMap<Symbol, u64>,
}

impl Multiset {
    pub fn new() -> Multiset {
        Multiset::default()
    }

    /// Total number of objects (sum of counts).
    pub fn size(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, symbol: &Symbol) -> u64 {
        self.entries.get(symbol).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Symbol, u64)> {
        self.entries.iter().map(|(s, &n)| (s, n))
    }

    pub fn symbols(&self) -> impl Iterator<Item = &Symbol> {
        self.entries.keys()
    }

    /// True iff every symbol of `needle` occurs in `self` at least as often.
    /// The empty multiset is contained everywhere.
    pub fn contains(&self, needle: &Multiset) -> bool {
        needle.iter().all(|(s, n)| self.count(s) >= n)
    }

    pub fn insert(&mut self, symbol: Symbol, n: u64) -> Result<(), MultisetError> {
        if n == 0 {
            return Ok(());
        }
        let slot = self.entries.entry(symbol.clone()).or_insert(0);
        *slot = slot
            .checked_add(n)
            .ok_or(MultisetError::Overflow { symbol })?;
        Ok(())
    }

    pub fn remove(&mut self, symbol: &Symbol, n: u64) -> Result<(), MultisetError> {
        if n == 0 {
            return Ok(());
        }
        let available = self.count(symbol);
        if available < n {
            return Err(MultisetError::Underflow {
                symbol: symbol.clone(),
                available,
                needed: n,
            });
        }
        if available == n {
            self.entries.remove(symbol);
        } else {
            self.entries.insert(symbol.clone(), available - n);
        }
        Ok(())
    }

    /// Pointwise sum.
    pub fn add(&self, other: &Multiset) -> Result<Multiset, MultisetError> {
        let mut out = self.clone();
        for (s, n) in other.iter() {
            out.insert(s.clone(), n)?;
        }
        Ok(out)
    }

    /// Pointwise difference. Zero-count entries are dropped. Fails with
    /// `Underflow` when `other` is not contained in `self`.
    pub fn subtract(&self, other: &Multiset) -> Result<Multiset, MultisetError> {
        let mut out = self.clone();
        for (s, n) in other.iter() {
            out.remove(s, n)?;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Multiset) -> Result<(), MultisetError> {
        for (s, n) in other.iter() {
            self.insert(s.clone(), n)?;
        }
        Ok(())
    }
}

impl FromIterator<(Symbol, u64)> for Multiset {
    fn from_iter<I: IntoIterator<Item = (Symbol, u64)>>(iter: I) -> Multiset {
        let mut out = Multiset::new();
        for (s, n) in iter {
            out.insert(s, n).expect("multiset literal overflow");
        }
        out
    }
}

/// Convenience constructor for tests and builders: `mset(&[("a", 2), ("b", 1)])`.
pub fn mset(entries: &[(&str, u64)]) -> Multiset {
    entries
        .iter()
        .map(|(name, n)| (Symbol::new(name), *n))
        .collect()
}

impl fmt::Display for Multiset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        let mut first = true;
        for (s, n) in self.iter() {
            if !first {
                write!(f, ", ")?;
            }
            first = false;
            write!(f, "{s}:{n}")?;
        }
        write!(f, "}}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contains_subset_case() {
        assert!(mset(&[("a", 2), ("b", 1)]).contains(&mset(&[("a", 1)])));
    }

    #[test]
    fn contains_rejects_exceeded_count() {
        assert!(!mset(&[("a", 2)]).contains(&mset(&[("a", 3)])));
    }

    #[test]
    fn empty_is_contained_everywhere() {
        assert!(mset(&[("a", 1), ("b", 1)]).contains(&Multiset::new()));
        assert!(Multiset::new().contains(&Multiset::new()));
    }

    #[test]
    fn add_is_pointwise() {
        let got = mset(&[("a", 1)]).add(&mset(&[("a", 2), ("b", 1)])).unwrap();
        assert_eq!(got, mset(&[("a", 3), ("b", 1)]));
    }

    #[test]
    fn subtract_drops_zero_entries() {
        let got = mset(&[("a", 3), ("b", 1)]).subtract(&mset(&[("a", 3)])).unwrap();
        assert_eq!(got, mset(&[("b", 1)]));
        assert_eq!(got.count(&Symbol::new("a")), 0);
    }

    #[test]
    fn subtract_underflow_is_an_error() {
        let err = mset(&[("a", 1)]).subtract(&mset(&[("a", 2)])).unwrap_err();
        assert!(matches!(err, MultisetError::Underflow { .. }));
    }

    #[test]
    fn display_form() {
        assert_eq!(mset(&[("b", 1), ("a", 2)]).to_string(), "{a:2, b:1}");
        assert_eq!(Multiset::new().to_string(), "{}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_multiset() -> impl Strategy<Value = Multiset> {
            proptest::collection::btree_map("[a-f]", 1u64..5, 0..6).prop_map(|m| {
                m.into_iter()
                    .map(|(name, n)| (Symbol::new(&name), n))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn add_then_subtract_is_identity(a in small_multiset(), b in small_multiset()) {
                let sum = a.add(&b).unwrap();
                prop_assert_eq!(sum.subtract(&b).unwrap(), a);
            }

            #[test]
            fn contains_iff_subtract_succeeds(a in small_multiset(), b in small_multiset()) {
                prop_assert_eq!(a.contains(&b), a.subtract(&b).is_ok());
            }

            #[test]
            fn add_commutes(a in small_multiset(), b in small_multiset()) {
                prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            }

            #[test]
            fn add_associates(a in small_multiset(), b in small_multiset(), c in small_multiset()) {
                let left = a.add(&b).unwrap().add(&c).unwrap();
                let right = a.add(&b.add(&c).unwrap()).unwrap();
                prop_assert_eq!(left, right);
            }

            #[test]
            fn size_is_additive(a in small_multiset(), b in small_multiset()) {
                prop_assert_eq!(a.add(&b).unwrap().size(), a.size() + b.size());
            }
        }
    }
}
