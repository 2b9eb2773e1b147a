//! The masking noise process.
//!
//! Each dimension is noised independently: at time `t` a clean symbol
//! survives with probability `t` and is replaced by the mask token otherwise.
//! Dimensions holding the fixed (pad) symbol are never noised. Time runs from
//! `t = 0` (all noise) to `t = 1` (data).

use rand::Rng;

use crate::guidance::RateSlice;
use crate::state_space::{State, StateSpace};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingFlow {
    space: StateSpace,
    eta: f64,
}

/// Per-dimension law of `x_t` given a clean state `x_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMarginal {
    pub symbols: usize,
    pub probs: Vec<f64>,
    pub t: f64,
}

impl FlowMarginal {
    pub fn row(&self, d: usize) -> &[f64] {
        &self.probs[d * self.symbols..(d + 1) * self.symbols]
    }
}

pub(crate) fn check_unit_interval(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain { t, domain: "[0, 1]" });
    }
    Ok(())
}

/// The rate prefactor `(1 + eta t) / (1 - t)` shared by every unmasking rate.
pub(crate) fn unmask_scale(eta: f64, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain { t, domain: "[0, 1)" });
    }
    if t >= 1.0 {
        return Err(Error::Singularity(t));
    }
    Ok((1.0 + eta * t) / (1.0 - t))
}

impl MaskingFlow {
    /// `eta` is the stochasticity: the rate at which unmasked dimensions are remasked.
    pub fn new(space: StateSpace, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Validation(format!("stochasticity must be >= 0, got {eta}")));
        }
        Ok(Self { space, eta })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn forward_marginal(&self, x1: &State, t: f64) -> Result<FlowMarginal> {
        check_unit_interval(t)?;
        self.space.validate(x1)?;
        let s_count = self.space.symbols();
        let mut probs = vec![0.0; x1.len() * s_count];
        for (d, &s) in x1.iter().enumerate() {
            let row = &mut probs[d * s_count..(d + 1) * s_count];
            if self.space.is_fixed(s) {
                row[s] = 1.0;
            } else {
                row[s] += t;
                row[self.space.mask()] += 1.0 - t;
            }
        }
        Ok(FlowMarginal { symbols: s_count, probs, t })
    }

    /// Draw `x_t ~ p_t|1(. | x_1)`, each dimension independently.
    pub fn sample_forward<R: Rng + ?Sized>(&self, x1: &State, t: f64, rng: &mut R) -> Result<State> {
        check_unit_interval(t)?;
        self.space.validate(x1)?;
        let mask = self.space.mask();
        Ok(State(
            x1.iter()
                .map(|&s| {
                    if self.space.is_fixed(s) || rng.random::<f64>() < t {
                        s
                    } else {
                        mask
                    }
                })
                .collect(),
        ))
    }

    /// Data-conditional rates `R_t(x_t, . | x_1)` including the detailed-balance
    /// remasking term.
    pub fn conditional_rate(&self, xt: &State, x1: &State, t: f64) -> Result<RateSlice> {
        let scale = unmask_scale(self.eta, t)?;
        self.space.validate(xt)?;
        self.space.validate(x1)?;
        let mask = self.space.mask();
        let mut r = RateSlice::zeros(xt.clone(), self.space.symbols(), t);
        for d in 0..xt.len() {
            let (cur, clean) = (xt[d], x1[d]);
            if self.space.is_fixed(clean) {
                continue;
            }
            if cur == mask && clean != mask {
                r.set(d, clean, scale);
            } else if cur == clean && cur != mask {
                r.set(d, mask, self.eta);
            }
        }
        r.close_diagonal()?;
        Ok(r)
    }
}
