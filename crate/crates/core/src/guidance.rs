//! Guided rates: exact predictor guidance, Taylor-approximated guidance and
//! predictor-free guidance.
//!
//! Every transform is multiplicative on the off-diagonal rates, so a rate that
//! is zero before guidance stays zero afterwards. Likelihood ratios are formed
//! in log space and exponentiated once, which keeps large guidance strengths
//! from overflowing intermediate ratios.

use serde::{Deserialize, Serialize};

use crate::predictor::{Label, Predictor};
use crate::state_space::{State, StateSpace};
use crate::{Error, Result};

/// Floor applied to `p(y | x, t)` before taking ratios.
pub const PROB_FLOOR: f64 = 1e-300;
/// Default log-stabilizer for predictor-free guidance.
pub const PFG_EPS: f64 = 1e-9;
/// Row-sum tolerance for the rate-matrix invariants.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// Row `R_t(x, .)` of a factorized rate matrix: the rate from `current` to the
/// state that differs only in dimension `d`, where it takes symbol `s`.
///
/// `rates[d][current[d]]` is always zero; the identity transition is carried
/// separately in `self_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSlice {
    symbols: usize,
    rates: Vec<f64>,
    self_rate: f64,
    current: State,
    t: f64,
    /// Set when exact guidance had to floor `p(y | x, t)`.
    pub degenerate: bool,
}

impl RateSlice {
    pub fn zeros(current: State, symbols: usize, t: f64) -> Self {
        let rates = vec![0.0; current.len() * symbols];
        Self { symbols, rates, self_rate: 0.0, current, t, degenerate: false }
    }

    pub fn from_rates(current: State, symbols: usize, t: f64, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != current.len() * symbols {
            return Err(Error::Contract(format!(
                "rate buffer has {} entries, expected {}",
                rates.len(),
                current.len() * symbols
            )));
        }
        let mut r = Self { symbols, rates, self_rate: 0.0, current, t, degenerate: false };
        for d in 0..r.dims() {
            let c = r.current[d];
            r.rates[d * symbols + c] = 0.0;
        }
        r.close_diagonal()?;
        Ok(r)
    }

    pub fn dims(&self) -> usize {
        self.current.len()
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn current(&self) -> &State {
        &self.current
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn self_rate(&self) -> f64 {
        self.self_rate
    }

    pub fn get(&self, d: usize, s: usize) -> f64 {
        self.rates[d * self.symbols + s]
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.rates[d * self.symbols..(d + 1) * self.symbols]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Set an off-diagonal entry. Writes to the current symbol are ignored.
    /// Leaves the diagonal stale; call [`RateSlice::close_diagonal`] afterwards.
    pub fn set(&mut self, d: usize, s: usize, rate: f64) {
        if s != self.current[d] {
            self.rates[d * self.symbols + s] = rate;
        }
    }

    /// Overwrite an entry without any checks. Only for fault-injection hooks.
    #[doc(hidden)]
    pub fn set_unchecked(&mut self, d: usize, s: usize, rate: f64) {
        self.rates[d * self.symbols + s] = rate;
    }

    pub fn off_diagonal_sum(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn nonzero_off_diagonal(&self) -> usize {
        self.rates.iter().filter(|&&r| r != 0.0).count()
    }

    /// Re-close the identity rate to the negative off-diagonal row sum.
    pub fn close_diagonal(&mut self) -> Result<()> {
        if let Some(i) = self.rates.iter().position(|&r| r < 0.0 || r.is_nan()) {
            return Err(Error::Contract(format!(
                "off-diagonal rate {} at (d = {}, s = {}) is negative or NaN",
                self.rates[i],
                i / self.symbols,
                i % self.symbols
            )));
        }
        self.self_rate = -self.off_diagonal_sum();
        Ok(())
    }

    /// All rate-matrix invariant violations; empty when the slice is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in 0..self.dims() {
            for s in 0..self.symbols {
                let r = self.get(d, s);
                if !r.is_finite() {
                    out.push(format!("non-finite rate {r} at (d = {d}, s = {s})"));
                } else if r < 0.0 {
                    out.push(format!("negative rate {r} at (d = {d}, s = {s})"));
                }
                if s == self.current[d] && r != 0.0 {
                    out.push(format!("diagonal entry stored in rates at d = {d}"));
                }
            }
        }
        let total = self.off_diagonal_sum() + self.self_rate;
        if !(total.abs() < ROW_SUM_TOL) {
            out.push(format!("row sum {total:e} not zero"));
        }
        let max_nonzero = self.dims() * (self.symbols - 1);
        if self.nonzero_off_diagonal() > max_nonzero {
            out.push(format!("{} nonzero off-diagonals exceed {max_nonzero}", self.nonzero_off_diagonal()));
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(v.join("; ")))
        }
    }

    pub fn check_space(&self, space: &StateSpace) -> Result<()> {
        if self.symbols != space.symbols() || self.dims() != space.dims() {
            return Err(Error::Contract("rate slice shape does not match the state space".into()));
        }
        Ok(())
    }
}

/// Free-function form of [`RateSlice::close_diagonal`].
pub fn close_diagonal(mut r: RateSlice) -> Result<RateSlice> {
    r.close_diagonal()?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Exact,
    Tag,
    Pfg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance strength, the inverse guidance temperature.
    pub gamma: f64,
    pub mode: GuidanceMode,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    PFG_EPS
}

impl GuidanceConfig {
    pub fn new(gamma: f64, mode: GuidanceMode) -> Result<Self> {
        let cfg = Self { gamma, mode, eps: PFG_EPS };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Validation(format!("guidance strength must be >= 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn floored_log_prob(lp: f64) -> Result<(f64, bool)> {
    if lp.is_nan() || lp == f64::INFINITY {
        return Err(Error::Numeric(format!("predictor returned log-probability {lp}")));
    }
    let floor = PROB_FLOOR.ln();
    Ok(if lp <= floor { (floor, true) } else { (lp, false) })
}

fn scale_by_log_ratio(rate: f64, gamma: f64, log_ratio: f64) -> f64 {
    if rate == 0.0 {
        0.0
    } else {
        rate * (gamma * log_ratio).exp()
    }
}

/// Predictor guidance with exact likelihood ratios.
///
/// Multiplies each off-diagonal rate by `[p(y | x~, t) / p(y | x, t)]^gamma`.
/// Evaluates the predictor exactly `D * (S - 1) + 1` times.
pub fn guided_rates_exact(
    r: &RateSlice,
    pred: &dyn Predictor,
    y: &Label,
    cfg: &GuidanceConfig,
) -> Result<RateSlice> {
    cfg.validate()?;
    let (lp_here, degenerate) = floored_log_prob(pred.log_prob(&r.current, r.t, y)?)?;
    if degenerate {
        log::warn!("p(y | x, t) underflowed the floor at x = {:?}, t = {}", r.current.0, r.t);
    }
    let mut out = r.clone();
    out.degenerate |= degenerate;
    let mut jump = r.current.clone();
    for d in 0..r.dims() {
        let here = r.current[d];
        for s in 0..r.symbols {
            if s == here {
                continue;
            }
            jump.0[d] = s;
            let (lp_jump, _) = floored_log_prob(pred.log_prob(&jump, r.t, y)?)?;
            out.set(d, s, scale_by_log_ratio(r.get(d, s), cfg.gamma, lp_jump - lp_here));
        }
        jump.0[d] = here;
    }
    out.close_diagonal()?;
    Ok(out)
}

/// Taylor-approximated guidance: the log-ratio to `x~` is replaced by
/// `(x~ - x)^T grad_x log p(y | x, t)` evaluated at the one-hot encoding of `x`.
/// One forward and one gradient evaluation of the predictor.
pub fn guided_rates_tag(
    r: &RateSlice,
    pred: &dyn Predictor,
    y: &Label,
    cfg: &GuidanceConfig,
) -> Result<RateSlice> {
    cfg.validate()?;
    let space = pred.space();
    r.check_space(space)?;
    let x = space.encode_one_hot(&r.current)?;
    let grad = pred.grad_log_prob(x.embedding(), r.t, y)?;
    if grad.len() != r.rates.len() {
        return Err(Error::Contract(format!("gradient has {} entries, expected {}", grad.len(), r.rates.len())));
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite predictor gradient {g}")));
    }
    let mut out = r.clone();
    for d in 0..r.dims() {
        let here = r.current[d];
        let g_here = grad[d * r.symbols + here];
        for s in 0..r.symbols {
            if s != here {
                let approx = grad[d * r.symbols + s] - g_here;
                out.set(d, s, scale_by_log_ratio(r.get(d, s), cfg.gamma, approx));
            }
        }
    }
    out.close_diagonal()?;
    Ok(out)
}

/// Predictor-free guidance: `R = exp(gamma log(R_cond + eps) + (1 - gamma) log(R_uncond + eps))`.
///
/// Entries where both rates are zero stay zero.
pub fn pfg_rates(r_cond: &RateSlice, r_uncond: &RateSlice, cfg: &GuidanceConfig) -> Result<RateSlice> {
    cfg.validate()?;
    if r_cond.current != r_uncond.current || r_cond.t != r_uncond.t || r_cond.symbols != r_uncond.symbols {
        return Err(Error::Contract("conditional and unconditional rates differ in state or time".into()));
    }
    let gamma = cfg.gamma;
    let mut out = r_uncond.clone();
    for d in 0..r_uncond.dims() {
        for s in 0..r_uncond.symbols {
            if s == r_uncond.current[d] {
                continue;
            }
            let (c, u) = (r_cond.get(d, s), r_uncond.get(d, s));
            let v = if c == 0.0 && u == 0.0 {
                0.0
            } else {
                (gamma * (c + cfg.eps).ln() + (1.0 - gamma) * (u + cfg.eps).ln()).exp()
            };
            out.set(d, s, v);
        }
    }
    out.degenerate = r_cond.degenerate || r_uncond.degenerate;
    out.close_diagonal()?;
    Ok(out)
}

/// Apply the configured predictor-guidance mode (exact or TAG).
pub fn guide_with_predictor(
    r: &RateSlice,
    pred: &dyn Predictor,
    y: &Label,
    cfg: &GuidanceConfig,
) -> Result<RateSlice> {
    match cfg.mode {
        GuidanceMode::Exact => guided_rates_exact(r, pred, y, cfg),
        GuidanceMode::Tag => guided_rates_tag(r, pred, y, cfg),
        GuidanceMode::Pfg => Err(Error::Contract("predictor-free guidance needs a conditional model".into())),
    }
}
