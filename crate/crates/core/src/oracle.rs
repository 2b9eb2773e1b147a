//! Brute-force ground truth for enumerable state spaces.
//!
//! Joint vectors are indexed by [`StateSpace::index_of`]. The chain propagator
//! computes the exact law of the discretized sampler, so comparisons against
//! it carry no Monte-Carlo error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::EnumeratedDistribution;
use crate::predictor::{Label, Predictor};
use crate::sampler::{GuidedChain, InitialState, SamplerConfig, StepProbs};
use crate::state_space::{OneHot, State, StateSpace, DEFAULT_ENUMERATION_CAP};
use crate::{Error, Result};

/// Tolerance on the total mass of a [`JointVector`].
pub const MASS_TOL: f64 = 1e-10;

/// A probability vector over every state of a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    space: StateSpace,
    probs: Vec<f64>,
}

impl JointVector {
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        let n = space.checked_size(DEFAULT_ENUMERATION_CAP)?;
        if probs.len() != n {
            return Err(Error::Contract(format!("joint vector has {} entries, space has {n}", probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Numeric(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Numeric(format!("joint vector sums to {total}")));
        }
        Ok(Self { space, probs })
    }

    pub fn point_mass(space: StateSpace, x: &State) -> Result<Self> {
        space.validate(x)?;
        let mut probs = vec![0.0; space.checked_size(DEFAULT_ENUMERATION_CAP)?];
        probs[space.index_of(x)] = 1.0;
        Self::new(space, probs)
    }

    pub fn from_distribution(data: &EnumeratedDistribution) -> Result<Self> {
        let space = data.space().clone();
        let mut probs = vec![0.0; space.checked_size(DEFAULT_ENUMERATION_CAP)?];
        for (x, p) in data.entries() {
            probs[space.index_of(x)] += p;
        }
        Self::new(space, probs)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &State) -> f64 {
        self.probs[self.space.index_of(x)]
    }

    /// Mass on states containing the mask token.
    pub fn masked_mass(&self) -> f64 {
        let mask = self.space.mask();
        self.support().filter(|(x, _)| x.contains(&mask)).map(|(_, p)| p).sum()
    }

    /// Nonzero entries in index order.
    pub fn support(&self) -> impl Iterator<Item = (State, f64)> + '_ {
        self.probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (self.space.state_at(i), p))
    }

    pub fn expectation(&self, f: impl Fn(&State) -> f64) -> f64 {
        self.support().map(|(x, p)| p * f(&x)).sum()
    }
}

/// `p(x | y) ∝ p(y | x)^gamma p_data(x)`.
pub fn exact_posterior(
    data: &EnumeratedDistribution,
    likelihood: &dyn Fn(&State, &Label) -> f64,
    y: &Label,
    gamma: f64,
) -> Result<JointVector> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Validation(format!("guidance strength must be >= 0, got {gamma}")));
    }
    let space = data.space().clone();
    let mut probs = vec![0.0; space.checked_size(DEFAULT_ENUMERATION_CAP)?];
    let mut total = 0.0;
    for (x, p) in data.entries() {
        let lik = likelihood(x, y);
        if !(lik >= 0.0) || !lik.is_finite() {
            return Err(Error::Numeric(format!("likelihood {lik} at {:?}", x.0)));
        }
        let w = lik.powf(gamma) * p;
        probs[space.index_of(x)] += w;
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::Evidence(space.all_masked().0));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    JointVector::new(space, probs)
}

/// Push `mass` from one source state through a factorized kernel into `out`.
fn scatter(space: &StateSpace, kernel: &StepProbs, mass: f64, out: &mut [f64]) {
    // Cartesian product over the per-dimension supports, most significant dimension first.
    let supports: Vec<Vec<(usize, f64)>> = (0..space.dims())
        .map(|d| kernel.row(d).iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(s, &p)| (s, p)).collect())
        .collect();
    if supports.iter().any(Vec::is_empty) {
        return;
    }
    let s_count = space.symbols();
    let dims = space.dims();
    let mut pos = vec![0usize; dims];
    loop {
        let mut index = 0;
        let mut p = mass;
        for d in 0..dims {
            let (s, q) = supports[d][pos[d]];
            index = index * s_count + s;
            p *= q;
        }
        out[index] += p;
        let mut d = dims;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            pos[d] += 1;
            if pos[d] < supports[d].len() {
                break;
            }
            pos[d] = 0;
        }
    }
}

/// Exact law of the discretized chain started from `initial`.
///
/// At every grid time the joint vector is multiplied by the one-step kernel,
/// which is a product over dimensions of `kernel(x, t)`. Kernels for all
/// supported source states are evaluated in parallel; accumulation runs in
/// index order so results are bitwise reproducible.
pub fn exact_chain_distribution_from<K, F>(
    initial: JointVector,
    kernel: K,
    cfg: &SamplerConfig,
    finish: Option<F>,
) -> Result<JointVector>
where
    K: Fn(&State, f64) -> Result<StepProbs> + Sync,
    F: Fn(&State, f64) -> Result<State>,
{
    cfg.validate()?;
    let space = initial.space.clone();
    let mut probs = initial.probs;
    for k in 0..cfg.num_steps() {
        let t = cfg.step_time(k);
        let sources: Vec<usize> = probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect();
        let kernels: Vec<StepProbs> =
            sources.par_iter().map(|&i| kernel(&space.state_at(i), t)).collect::<Result<_>>()?;
        let mut next = vec![0.0; probs.len()];
        for (&i, kp) in sources.iter().zip(&kernels) {
            scatter(&space, kp, probs[i], &mut next);
        }
        probs = next;
    }
    if let Some(finish) = finish {
        let t_final = cfg.final_time();
        let mut next = vec![0.0; probs.len()];
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                next[space.index_of(&finish(&space.state_at(i), t_final)?)] += p;
            }
        }
        probs = next;
    }
    JointVector::new(space, probs)
}

/// [`exact_chain_distribution_from`] starting at the fully masked state.
pub fn exact_chain_distribution<K, F>(space: &StateSpace, kernel: K, cfg: &SamplerConfig, finish: Option<F>) -> Result<JointVector>
where
    K: Fn(&State, f64) -> Result<StepProbs> + Sync,
    F: Fn(&State, f64) -> Result<State>,
{
    let init = JointVector::point_mass(space.clone(), &space.all_masked())?;
    exact_chain_distribution_from(init, kernel, cfg, finish)
}

/// Law of the sampler's initial state.
pub fn initial_law(space: &StateSpace, init: &InitialState) -> Result<JointVector> {
    let masked = space.all_masked();
    match init {
        InitialState::AllMasked => JointVector::point_mass(space.clone(), &masked),
        InitialState::TrailingPads(law) => {
            let fixed = space
                .fixed()
                .ok_or_else(|| Error::Contract("pad initialization needs a fixed symbol".into()))?;
            let mut probs = vec![0.0; space.checked_size(DEFAULT_ENUMERATION_CAP)?];
            for &(pads, p) in law {
                if pads > space.dims() {
                    return Err(Error::Validation(format!("{pads} pads exceed {} dimensions", space.dims())));
                }
                let mut x = masked.clone();
                x.0[space.dims() - pads..].fill(fixed);
                probs[space.index_of(&x)] += p;
            }
            JointVector::new(space.clone(), probs)
        }
    }
}

/// Exact final law of `chain` under `cfg`, including the argmax finish when enabled.
pub fn exact_chain_law(chain: &GuidedChain<'_>, cfg: &SamplerConfig, init: &InitialState) -> Result<JointVector> {
    let kernel = |x: &State, t: f64| chain.step_probs(x, t, cfg.dt);
    let finish = |x: &State, t: f64| chain.argmax_finish(x, t);
    let start = initial_law(chain.flow.space(), init)?;
    exact_chain_distribution_from(start, kernel, cfg, cfg.argmax_finish.then_some(finish))
}

pub fn tv_distance(p: &JointVector, q: &JointVector) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::Contract(format!("cannot compare {} and {} entries", p.probs.len(), q.probs.len())));
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Max relative error between `grad_log_prob` and central differences of
/// `log_prob_relaxed`, with denominator `max(|analytic|, 1e-8)`.
pub fn finite_diff_grad_check(pred: &dyn Predictor, x: &OneHot, t: f64, y: &Label, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let analytic = pred.grad_log_prob(x.embedding(), t, y)?;
    let mut probe = x.embedding().clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let base = probe.data[i];
        probe.data[i] = base + h;
        let up = pred.log_prob_relaxed(&probe, t, y)?;
        probe.data[i] = base - h;
        let down = pred.log_prob_relaxed(&probe, t, y)?;
        probe.data[i] = base;
        let numeric = (up - down) / (2.0 * h);
        if !g.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient entry {i}: {g} vs {numeric}")));
        }
        worst = worst.max((g - numeric).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}

pub fn empirical_distribution(samples: &[State], space: &StateSpace) -> Result<JointVector> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    let mut counts = vec![0usize; space.checked_size(DEFAULT_ENUMERATION_CAP)?];
    for x in samples {
        space.validate(x)?;
        counts[space.index_of(x)] += 1;
    }
    let n = samples.len() as f64;
    JointVector::new(space.clone(), counts.into_iter().map(|c| c as f64 / n).collect())
}
