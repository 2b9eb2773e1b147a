//! Factorized discrete state-spaces: `D` dimensions, each taking one of `S`
//! symbols, with a reserved mask symbol and an optional fixed (pad) symbol.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the number of states materialized by [`StateSpace::enumerate_states`].
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSpace {
    dims: usize,
    symbols: usize,
    mask: usize,
    fixed: Option<usize>,
}

impl StateSpace {
    /// A space with the mask token at `symbols - 1` and no fixed token.
    pub fn new(dims: usize, symbols: usize) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::Validation(format!("need at least 2 symbols, got {symbols}")));
        }
        Self::with_tokens(dims, symbols, symbols - 1, None)
    }

    pub fn with_tokens(dims: usize, symbols: usize, mask: usize, fixed: Option<usize>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Validation("need at least one dimension".into()));
        }
        if symbols < 2 {
            return Err(Error::Validation(format!("need at least 2 symbols, got {symbols}")));
        }
        if mask >= symbols {
            return Err(Error::Validation(format!("mask id {mask} out of range for S = {symbols}")));
        }
        if let Some(f) = fixed {
            if f >= symbols {
                return Err(Error::Validation(format!("fixed id {f} out of range for S = {symbols}")));
            }
            if f == mask {
                return Err(Error::Validation("fixed id must differ from mask id".into()));
            }
        }
        Ok(Self { dims, symbols, mask, fixed })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn mask(&self) -> usize {
        self.mask
    }

    pub fn fixed(&self) -> Option<usize> {
        self.fixed
    }

    pub fn is_fixed(&self, symbol: usize) -> bool {
        self.fixed == Some(symbol)
    }

    /// Symbols a masked dimension may unmask to (everything but mask and fixed).
    pub fn is_content(&self, symbol: usize) -> bool {
        symbol != self.mask && !self.is_fixed(symbol)
    }

    /// `S^D`, or `None` on overflow.
    pub fn num_states(&self) -> Option<u128> {
        (self.symbols as u128).checked_pow(self.dims as u32)
    }

    pub fn validate(&self, state: &State) -> Result<()> {
        if state.len() != self.dims {
            return Err(Error::Validation(format!(
                "state has {} dimensions, expected {}",
                state.len(),
                self.dims
            )));
        }
        if let Some((d, &s)) = state.iter().enumerate().find(|(_, &s)| s >= self.symbols) {
            return Err(Error::Validation(format!(
                "symbol {s} at dimension {d} out of range for S = {}",
                self.symbols
            )));
        }
        Ok(())
    }

    pub fn all_masked(&self) -> State {
        State(vec![self.mask; self.dims])
    }

    pub fn encode_one_hot(&self, state: &State) -> Result<OneHot> {
        self.validate(state)?;
        let mut data = vec![0.0; self.dims * self.symbols];
        for (d, &s) in state.iter().enumerate() {
            data[d * self.symbols + s] = 1.0;
        }
        Ok(OneHot(Embedding { dims: self.dims, symbols: self.symbols, data }))
    }

    /// Lexicographic index of `state`; dimension 0 is the most significant digit.
    pub fn index_of(&self, state: &State) -> usize {
        state.iter().fold(0usize, |acc, &s| acc * self.symbols + s)
    }

    pub fn state_at(&self, mut index: usize) -> State {
        let mut symbols = vec![0; self.dims];
        for d in (0..self.dims).rev() {
            symbols[d] = index % self.symbols;
            index /= self.symbols;
        }
        State(symbols)
    }

    pub fn enumerate_states(&self) -> Result<Vec<State>> {
        self.enumerate_states_capped(DEFAULT_ENUMERATION_CAP)
    }

    pub fn enumerate_states_capped(&self, cap: u128) -> Result<Vec<State>> {
        let n = self.checked_size(cap)?;
        Ok((0..n).map(|i| self.state_at(i)).collect())
    }

    /// Number of states, refusing when it exceeds `cap`.
    pub fn checked_size(&self, cap: u128) -> Result<usize> {
        let required = self.num_states().unwrap_or(u128::MAX);
        if required > cap || required > usize::MAX as u128 {
            return Err(Error::EnumerationCap { required, cap });
        }
        Ok(required as usize)
    }

    /// Every state one jump away from `state`, as `(dimension, new_symbol, state)`,
    /// ordered by dimension then symbol. The identity transition is excluded.
    pub fn all_jump_transitions(&self, state: &State) -> Result<Vec<(usize, usize, State)>> {
        self.validate(state)?;
        let mut out = Vec::with_capacity(self.dims * (self.symbols - 1));
        for d in 0..self.dims {
            for s in 0..self.symbols {
                if s == state[d] {
                    continue;
                }
                let mut next = state.clone();
                next.0[d] = s;
                out.push((d, s, next));
            }
        }
        Ok(out)
    }
}

/// A position of the chain: one symbol per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<usize>);

impl State {
    pub fn new(symbols: Vec<usize>) -> Self {
        State(symbols)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn hamming(&self, other: &State) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    pub fn count(&self, symbol: usize) -> usize {
        self.0.iter().filter(|&&s| s == symbol).count()
    }
}

impl std::ops::Deref for State {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for State {
    fn from(v: Vec<usize>) -> Self {
        State(v)
    }
}

/// A real `D x S` matrix, row-major. One-hot encodings live here, as do
/// their continuous relaxations used for input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub dims: usize,
    pub symbols: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dims: usize, symbols: usize) -> Self {
        Self { dims, symbols, data: vec![0.0; dims * symbols] }
    }

    pub fn get(&self, d: usize, s: usize) -> f64 {
        self.data[d * self.symbols + s]
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.data[d * self.symbols..(d + 1) * self.symbols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// An [`Embedding`] whose rows are standard basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot(Embedding);

impl OneHot {
    pub fn embedding(&self) -> &Embedding {
        &self.0
    }

    pub fn into_embedding(self) -> Embedding {
        self.0
    }

    /// The state encoded by this matrix.
    pub fn state(&self) -> State {
        State(
            (0..self.0.dims)
                .map(|d| self.0.row(d).iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect(),
        )
    }
}

impl std::ops::Deref for OneHot {
    type Target = Embedding;

    fn deref(&self) -> &Embedding {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn one_hot_rows() {
        let sp = StateSpace::new(2, 3).unwrap();
        let oh = sp.encode_one_hot(&State(vec![0, 2])).unwrap();
        assert_eq!(oh.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(oh.state(), State(vec![0, 2]));

        let sp = StateSpace::new(1, 2).unwrap();
        let oh = sp.encode_one_hot(&State(vec![1])).unwrap();
        assert_eq!(oh.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let sp = StateSpace::new(2, 3).unwrap();
        assert!(matches!(sp.encode_one_hot(&State(vec![0, 3])), Err(Error::Validation(_))));
        assert!(matches!(sp.encode_one_hot(&State(vec![0])), Err(Error::Validation(_))));
    }

    #[test]
    fn space_invariants() {
        assert!(StateSpace::new(0, 3).is_err());
        assert!(StateSpace::new(2, 1).is_err());
        assert!(StateSpace::with_tokens(2, 3, 3, None).is_err());
        assert!(StateSpace::with_tokens(2, 3, 2, Some(2)).is_err());
        assert!(StateSpace::with_tokens(2, 3, 2, Some(5)).is_err());
        let sp = StateSpace::with_tokens(2, 4, 3, Some(2)).unwrap();
        assert!(sp.is_content(0) && !sp.is_content(2) && !sp.is_content(3));
        assert_eq!(StateSpace::new(4, 5).unwrap().mask(), 4);
    }

    #[test]
    fn enumeration_order() {
        let sp = StateSpace::new(1, 2).unwrap();
        assert_eq!(sp.enumerate_states().unwrap(), vec![State(vec![0]), State(vec![1])]);
        let sp = StateSpace::new(2, 2).unwrap();
        let all: Vec<Vec<usize>> = sp.enumerate_states().unwrap().into_iter().map(|s| s.0).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn enumeration_count_and_uniqueness() {
        let sp = StateSpace::new(3, 4).unwrap();
        let all = sp.enumerate_states().unwrap();
        let set: HashSet<_> = all.iter().cloned().collect();
        assert_eq!(all.len(), 64);
        assert_eq!(set.len(), 64);
        for (i, s) in all.iter().enumerate() {
            assert_eq!(sp.index_of(s), i);
        }
    }

    #[test]
    fn enumeration_cap() {
        let sp = StateSpace::new(10, 4).unwrap();
        match sp.enumerate_states() {
            Err(Error::EnumerationCap { required, cap }) => {
                assert_eq!(required, 1 << 20);
                assert_eq!(cap, DEFAULT_ENUMERATION_CAP);
            }
            other => panic!("expected cap refusal, got {other:?}"),
        }
        assert_eq!(sp.enumerate_states_capped(1 << 20).unwrap().len(), 1 << 20);
    }

    #[test]
    fn jump_transitions() {
        let sp = StateSpace::new(2, 2).unwrap();
        let jumps = sp.all_jump_transitions(&State(vec![0, 0])).unwrap();
        assert_eq!(jumps, vec![(0, 1, State(vec![1, 0])), (1, 1, State(vec![0, 1]))]);

        let sp = StateSpace::new(1, 3).unwrap();
        let jumps = sp.all_jump_transitions(&State(vec![2])).unwrap();
        let targets: Vec<_> = jumps.into_iter().map(|j| j.2).collect();
        assert_eq!(targets, vec![State(vec![0]), State(vec![1])]);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn space_and_state() -> impl Strategy<Value = (StateSpace, State)> {
            (1usize..5, 2usize..5).prop_flat_map(|(d, s)| {
                (Just(StateSpace::new(d, s).unwrap()), proptest::collection::vec(0..s, d).prop_map(State))
            })
        }

        proptest! {
            #[test]
            fn jumps_are_hamming_one((sp, x) in space_and_state()) {
                let jumps = sp.all_jump_transitions(&x).unwrap();
                prop_assert_eq!(jumps.len(), sp.dims() * (sp.symbols() - 1));
                for (d, s, y) in &jumps {
                    prop_assert_eq!(x.hamming(y), 1);
                    prop_assert_eq!(y[*d], *s);
                }
            }

            #[test]
            fn one_hot_rows_sum_to_one((sp, x) in space_and_state()) {
                let oh = sp.encode_one_hot(&x).unwrap();
                for d in 0..sp.dims() {
                    let row = oh.row(d);
                    prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
                    prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                }
            }

            #[test]
            fn index_roundtrip((sp, x) in space_and_state()) {
                prop_assert_eq!(sp.state_at(sp.index_of(&x)), x);
            }
        }
    }
}
