//! Denoising models `p(x_1 | x_t)` and the generative rates they induce.

use std::collections::HashMap;
use std::sync::Arc;

use dashmap::DashMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::guidance::RateSlice;
use crate::processes::{unmask_scale, MaskingFlow};
use crate::smallnet::{log_softmax, NeuralNet, Optimizer, TrainOpts};
use crate::state_space::{State, StateSpace};
use crate::{Error, Result};

/// Training times are drawn from `U[0, 1 - T_EPS]`.
pub const T_EPS: f64 = 1e-3;
/// Probability floor inside the cross-entropy loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// A finite distribution over clean states.
#[derive(Debug, Clone)]
pub struct EnumeratedDistribution {
    space: StateSpace,
    entries: Vec<(State, f64)>,
    index: HashMap<State, usize>,
}

impl EnumeratedDistribution {
    /// Entries must be nonnegative, distinct, valid and sum to one within 1e-12.
    pub fn new(space: StateSpace, entries: Vec<(State, f64)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (x, p)) in entries.iter().enumerate() {
            space.validate(x)?;
            if !(*p >= 0.0) || !p.is_finite() {
                return Err(Error::Validation(format!("probability {p} for {:?}", x.0)));
            }
            if index.insert(x.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate state {:?}", x.0)));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { space, entries, index })
    }

    /// Normalize nonnegative weights; zero-weight states are dropped.
    pub fn from_weights(space: StateSpace, weights: Vec<(State, f64)>) -> Result<Self> {
        let total: f64 = weights.iter().map(|e| e.1).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Validation(format!("weights sum to {total}")));
        }
        let mut entries: Vec<(State, f64)> =
            weights.into_iter().filter(|e| e.1 > 0.0).map(|(x, w)| (x, w / total)).collect();
        // Absorb rounding so the sum is 1 within 1e-12.
        let err = 1.0 - entries.iter().map(|e| e.1).sum::<f64>();
        if let Some(last) = entries.last_mut() {
            last.1 += err;
        }
        Self::new(space, entries)
    }

    /// Empirical distribution of a dataset.
    pub fn from_samples(space: StateSpace, samples: &[State]) -> Result<Self> {
        let mut counts: HashMap<State, usize> = HashMap::new();
        for s in samples {
            *counts.entry(s.clone()).or_default() += 1;
        }
        let mut weights: Vec<(State, f64)> = counts.into_iter().map(|(s, c)| (s, c as f64)).collect();
        weights.sort_by(|a, b| a.0.cmp(&b.0));
        Self::from_weights(space, weights)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn entries(&self) -> &[(State, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prob(&self, x: &State) -> f64 {
        self.index.get(x).map_or(0.0, |&i| self.entries[i].1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &State {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (x, p) in &self.entries {
            acc += p;
            if u < acc {
                return x;
            }
        }
        &self.entries.last().expect("nonempty distribution").0
    }

    pub fn expectation(&self, f: impl Fn(&State) -> f64) -> f64 {
        self.entries.iter().map(|(x, p)| p * f(x)).sum()
    }
}

/// Per-dimension clean-data marginals `p(x_1^d | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingDistribution {
    pub symbols: usize,
    pub probs: Vec<f64>,
    pub t: f64,
}

impl DenoisingDistribution {
    pub fn row(&self, d: usize) -> &[f64] {
        &self.probs[d * self.symbols..(d + 1) * self.symbols]
    }

    pub fn dims(&self) -> usize {
        self.probs.len() / self.symbols
    }

    /// Most likely symbol of dimension `d`; ties go to the lowest id.
    pub fn argmax(&self, d: usize) -> usize {
        let row = self.row(d);
        let mut best = 0;
        for s in 1..row.len() {
            if row[s] > row[best] {
                best = s;
            }
        }
        best
    }
}

pub trait DenoisingModel: Send + Sync {
    fn space(&self) -> &StateSpace;

    fn predict(&self, xt: &State, t: f64) -> Result<DenoisingDistribution>;
}

/// Generative rates induced by a denoiser under the masking flow.
///
/// A masked dimension unmasks to content symbol `s` at rate
/// `p(x_1^d = s | x_t) (1 + eta t) / (1 - t)`; an unmasked content dimension
/// remasks at rate `eta`; fixed dimensions never move.
pub fn unconditional_rates(dd: &DenoisingDistribution, xt: &State, t: f64, flow: &MaskingFlow) -> Result<RateSlice> {
    let scale = unmask_scale(flow.eta(), t)?;
    let space = flow.space();
    space.validate(xt)?;
    if dd.symbols != space.symbols() || dd.dims() != space.dims() {
        return Err(Error::Contract("denoising distribution shape does not match the flow".into()));
    }
    let mask = space.mask();
    let mut r = RateSlice::zeros(xt.clone(), space.symbols(), t);
    for d in 0..xt.len() {
        let cur = xt[d];
        if cur == mask {
            for (s, &p) in dd.row(d).iter().enumerate() {
                if space.is_content(s) && p > 0.0 {
                    r.set(d, s, p * scale);
                }
            }
        } else if !space.is_fixed(cur) && flow.eta() > 0.0 {
            r.set(d, mask, flow.eta());
        }
    }
    r.close_diagonal()?;
    Ok(r)
}

/// Posterior over the data support: `(support index, probability)` pairs.
pub type Posterior = Arc<Vec<(usize, f64)>>;

/// Denoiser computed by Bayes' rule against a known, enumerated data distribution.
///
/// Every clean state consistent with `x_t` (equal on unmasked dimensions,
/// non-fixed content on masked ones) has likelihood
/// `t^(#unmasked content) (1 - t)^(#masked)`, the same for all of them. The
/// posterior is therefore the data distribution restricted to consistent
/// states and does not depend on `t`; the endpoints use this same value as
/// the continuous extension. Posteriors are memoized per state.
pub struct ExactBayesDenoiser {
    data: Arc<EnumeratedDistribution>,
    cache: DashMap<State, Posterior>,
}

impl ExactBayesDenoiser {
    pub fn new(data: Arc<EnumeratedDistribution>) -> Result<Self> {
        let space = data.space();
        if let Some((x, _)) = data.entries().iter().find(|(x, _)| x.contains(&space.mask())) {
            return Err(Error::Validation(format!("clean state {:?} contains the mask token", x.0)));
        }
        Ok(Self { data, cache: DashMap::new() })
    }

    pub fn data(&self) -> &Arc<EnumeratedDistribution> {
        &self.data
    }

    fn consistent(&self, x1: &State, xt: &State) -> bool {
        let space = self.data.space();
        x1.iter().zip(xt.iter()).all(|(&c, &n)| if n == space.mask() { space.is_content(c) } else { c == n })
    }

    /// Joint posterior `p(x_1 | x_t)` over the data support.
    pub fn posterior(&self, xt: &State, t: f64) -> Result<Posterior> {
        crate::processes::check_unit_interval(t)?;
        if let Some(p) = self.cache.get(xt) {
            return Ok(p.clone());
        }
        self.data.space().validate(xt)?;
        let mut weights: Vec<(usize, f64)> = self
            .data
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, (x1, p))| *p > 0.0 && self.consistent(x1, xt))
            .map(|(i, (_, p))| (i, *p))
            .collect();
        let evidence: f64 = weights.iter().map(|w| w.1).sum();
        if !(evidence > 0.0) {
            return Err(Error::Evidence(xt.0.clone()));
        }
        for w in &mut weights {
            w.1 /= evidence;
        }
        let post = Arc::new(weights);
        self.cache.insert(xt.clone(), post.clone());
        Ok(post)
    }
}

impl DenoisingModel for ExactBayesDenoiser {
    fn space(&self) -> &StateSpace {
        self.data.space()
    }

    fn predict(&self, xt: &State, t: f64) -> Result<DenoisingDistribution> {
        exact_bayes_predict(self, xt, t)
    }
}

/// Per-dimension marginals of the exact posterior.
pub fn exact_bayes_predict(den: &ExactBayesDenoiser, xt: &State, t: f64) -> Result<DenoisingDistribution> {
    let post = den.posterior(xt, t)?;
    let space = den.data.space();
    let s_count = space.symbols();
    let mut probs = vec![0.0; space.dims() * s_count];
    for &(i, w) in post.iter() {
        let x1 = &den.data.entries()[i].0;
        for (d, &s) in x1.iter().enumerate() {
            probs[d * s_count + s] += w;
        }
    }
    Ok(DenoisingDistribution { symbols: s_count, probs, t })
}

/// Neural denoiser: flattened one-hot of `x_t` (optionally followed by `t`)
/// mapped to `D x S` logits.
///
/// Masked dimensions get a softmax over content symbols only; unmasked and
/// fixed dimensions are point masses on their current symbol, as the masking
/// flow dictates.
#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    space: StateSpace,
    net: NeuralNet,
    time_input: bool,
}

impl NeuralDenoiser {
    pub fn new(space: StateSpace, net: NeuralNet, time_input: bool) -> Result<Self> {
        let width = space.dims() * space.symbols();
        let expected_in = width + usize::from(time_input);
        if net.input_size() != expected_in || net.output_size() != width {
            return Err(Error::Validation(format!(
                "denoiser net must map {expected_in} inputs to {width} outputs, got {:?}",
                net.layer_sizes()
            )));
        }
        Ok(Self { space, net, time_input })
    }

    pub fn net(&self) -> &NeuralNet {
        &self.net
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    fn input(&self, xt: &State, t: f64) -> Result<Vec<f64>> {
        let mut v = self.space.encode_one_hot(xt)?.into_embedding().data;
        if self.time_input {
            v.push(t);
        }
        Ok(v)
    }

    /// Log-probabilities over content symbols for dimension `d`, `-inf` elsewhere.
    fn masked_log_probs(&self, logits: &[f64], d: usize) -> Vec<f64> {
        let s_count = self.space.symbols();
        let row = &logits[d * s_count..(d + 1) * s_count];
        let content: Vec<usize> = (0..s_count).filter(|&s| self.space.is_content(s)).collect();
        let lp = log_softmax(&content.iter().map(|&s| row[s]).collect::<Vec<_>>());
        let mut out = vec![f64::NEG_INFINITY; s_count];
        for (k, &s) in content.iter().enumerate() {
            out[s] = lp[k];
        }
        out
    }
}

impl DenoisingModel for NeuralDenoiser {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn predict(&self, xt: &State, t: f64) -> Result<DenoisingDistribution> {
        crate::processes::check_unit_interval(t)?;
        let logits = self.net.forward(&self.input(xt, t)?)?;
        let s_count = self.space.symbols();
        let mut probs = vec![0.0; logits.len()];
        for d in 0..self.space.dims() {
            let row = &mut probs[d * s_count..(d + 1) * s_count];
            if xt[d] == self.space.mask() {
                for (p, lp) in row.iter_mut().zip(self.masked_log_probs(&logits, d)) {
                    *p = lp.exp();
                }
            } else {
                row[xt[d]] = 1.0;
            }
        }
        Ok(DenoisingDistribution { symbols: s_count, probs, t })
    }
}

/// Train by Monte-Carlo cross-entropy: draw `t ~ U[0, 1 - T_EPS]`,
/// `x_t ~ p_t|1(. | x_1)`, and minimize `-log p(x_1 | x_t)` summed over the
/// masked dimensions. Returns the mean loss per epoch.
pub fn train_denoiser(
    dataset: &[State],
    model: &mut NeuralDenoiser,
    flow: &MaskingFlow,
    opts: &TrainOpts,
) -> Result<Vec<f64>> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    for x in dataset {
        model.space.validate(x)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Optimizer::new(opts.optimizer, opts.learning_rate, model.net.params().len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let s_count = model.space.symbols();
    let mask = model.space.mask();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = vec![0.0; model.net.params().len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let x1 = &dataset[i];
                let t = rng.random::<f64>() * (1.0 - T_EPS);
                let xt = flow.sample_forward(x1, t, &mut rng)?;
                let (logits, tape) = model.net.forward_recorded(&model.input(&xt, t)?)?;
                let mut upstream = vec![0.0; logits.len()];
                for d in 0..xt.len() {
                    if xt[d] != mask {
                        continue;
                    }
                    let lp = model.masked_log_probs(&logits, d);
                    batch_loss -= lp[x1[d]].exp().max(LOSS_FLOOR).ln();
                    for s in 0..s_count {
                        if lp[s].is_finite() {
                            upstream[d * s_count + s] = lp[s].exp();
                        }
                    }
                    upstream[d * s_count + x1[d]] -= 1.0;
                }
                let scale = 1.0 / batch.len() as f64;
                upstream.iter_mut().for_each(|u| *u *= scale);
                model.net.backward_accumulate(&tape, &upstream, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            opt.step(model.net.params_mut(), &grads).map_err(|_| Error::Divergence { epoch, loss: batch_loss })?;
        }
        history.push(epoch_loss / dataset.len() as f64);
        opt.learning_rate *= opts.lr_decay;
    }
    Ok(history)
}

/// `KL(p || q)` summed over dimensions.
pub fn denoising_kl(p: &DenoisingDistribution, q: &DenoisingDistribution) -> f64 {
    p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(LOSS_FLOOR)).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smallnet::{Activation, OptimizerKind};

    fn pair_data() -> Arc<EnumeratedDistribution> {
        let space = StateSpace::new(2, 3).unwrap();
        Arc::new(
            EnumeratedDistribution::new(space, vec![(State(vec![0, 0]), 0.5), (State(vec![1, 1]), 0.5)]).unwrap(),
        )
    }

    #[test]
    fn enumerated_distribution_validation() {
        let space = StateSpace::new(1, 3).unwrap();
        assert!(EnumeratedDistribution::new(space.clone(), vec![(State(vec![0]), 0.6)]).is_err());
        assert!(EnumeratedDistribution::new(space.clone(), vec![(State(vec![0]), 0.5), (State(vec![0]), 0.5)]).is_err());
        assert!(EnumeratedDistribution::new(space.clone(), vec![(State(vec![0]), 1.5), (State(vec![1]), -0.5)]).is_err());
        let d = EnumeratedDistribution::from_weights(space, vec![(State(vec![0]), 1.0), (State(vec![1]), 3.0)]).unwrap();
        assert!((d.prob(&State(vec![1])) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bayes_partial_mask_resolves_by_consistency() {
        let den = ExactBayesDenoiser::new(pair_data()).unwrap();
        for t in [0.1, 0.5, 0.9] {
            let dd = exact_bayes_predict(&den, &State(vec![0, 2]), t).unwrap();
            assert_eq!(dd.row(1), &[1.0, 0.0, 0.0]);
            assert_eq!(dd.row(0), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn bayes_fully_masked_gives_data_marginals() {
        let den = ExactBayesDenoiser::new(pair_data()).unwrap();
        let dd = exact_bayes_predict(&den, &State(vec![2, 2]), 0.3).unwrap();
        assert_eq!(dd.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(dd.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn bayes_unmasked_is_point_mass() {
        let den = ExactBayesDenoiser::new(pair_data()).unwrap();
        let dd = exact_bayes_predict(&den, &State(vec![1, 1]), 0.7).unwrap();
        assert_eq!(dd.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(dd.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn bayes_zero_evidence() {
        let den = ExactBayesDenoiser::new(pair_data()).unwrap();
        assert!(matches!(exact_bayes_predict(&den, &State(vec![0, 1]), 0.5), Err(Error::Evidence(_))));
    }

    #[test]
    fn bayes_matches_literal_likelihood() {
        // Brute force with the literal forward kernel at an interior time.
        let space = StateSpace::new(2, 3).unwrap();
        let data = Arc::new(
            EnumeratedDistribution::new(
                space.clone(),
                vec![(State(vec![0, 0]), 0.2), (State(vec![0, 1]), 0.3), (State(vec![1, 1]), 0.5)],
            )
            .unwrap(),
        );
        let den = ExactBayesDenoiser::new(data.clone()).unwrap();
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let t = 0.37;
        for xt in space.enumerate_states().unwrap() {
            let mut marg = vec![0.0; 6];
            let mut z = 0.0;
            for (x1, p) in data.entries() {
                let m = flow.forward_marginal(x1, t).unwrap();
                let lik: f64 = (0..2).map(|d| m.row(d)[xt[d]]).product();
                z += lik * p;
                for d in 0..2 {
                    marg[d * 3 + x1[d]] += lik * p;
                }
            }
            match exact_bayes_predict(&den, &xt, t) {
                Ok(dd) => {
                    for (a, b) in dd.probs.iter().zip(&marg) {
                        assert!((a - b / z).abs() < 1e-12);
                    }
                }
                Err(Error::Evidence(_)) => assert_eq!(z, 0.0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn unconditional_rate_examples() {
        let space = StateSpace::new(1, 3).unwrap();
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let dd = DenoisingDistribution { symbols: 3, probs: vec![0.4, 0.6, 0.0], t: 0.5 };
        let r = unconditional_rates(&dd, &State(vec![2]), 0.5, &flow).unwrap();
        assert!((r.get(0, 0) - 0.8).abs() < 1e-15);
        assert!((r.get(0, 1) - 1.2).abs() < 1e-15);
        assert!((r.self_rate() + 2.0).abs() < 1e-15);

        let dd = DenoisingDistribution { symbols: 3, probs: vec![1.0, 0.0, 0.0], t: 0.5 };
        let r = unconditional_rates(&dd, &State(vec![0]), 0.5, &flow).unwrap();
        assert_eq!(r.nonzero_off_diagonal(), 0);

        let flow = MaskingFlow::new(space, 2.0).unwrap();
        let r = unconditional_rates(&dd, &State(vec![0]), 0.5, &flow).unwrap();
        assert_eq!(r.get(0, 2), 2.0);
        assert_eq!(r.get(0, 1), 0.0);
        assert!(matches!(unconditional_rates(&dd, &State(vec![0]), 1.0, &flow), Err(Error::Singularity(_))));
    }

    #[test]
    fn unmask_rate_diverges_like_inverse_gap() {
        let den = ExactBayesDenoiser::new(pair_data()).unwrap();
        let flow = MaskingFlow::new(den.space().clone(), 0.0).unwrap();
        let total = |t: f64| {
            let dd = den.predict(&State(vec![2, 2]), t).unwrap();
            unconditional_rates(&dd, &State(vec![2, 2]), t, &flow).unwrap().row(0).iter().sum::<f64>()
        };
        // 1 / (1 - t): ratio between t = 0.99 and t = 0.9 is 10.
        assert!((total(0.99) / total(0.9) - 10.0).abs() < 1e-9);
    }

    fn small_denoiser(space: &StateSpace, seed: u64) -> NeuralDenoiser {
        let w = space.dims() * space.symbols();
        NeuralDenoiser::new(space.clone(), NeuralNet::new(vec![w, 32, w], Activation::Relu, seed).unwrap(), false)
            .unwrap()
    }

    #[test]
    fn neural_predictions_respect_masking() {
        let space = StateSpace::with_tokens(3, 4, 3, Some(2)).unwrap();
        let den = small_denoiser(&space, 1);
        let dd = den.predict(&State(vec![3, 1, 2]), 0.4).unwrap();
        assert_eq!(dd.row(1), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(dd.row(2), &[0.0, 0.0, 1.0, 0.0]);
        let row = dd.row(0);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let space = StateSpace::new(2, 3).unwrap();
        let mut den = small_denoiser(&space, 2);
        let before = den.net().clone();
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let opts = TrainOpts { epochs: 0, ..TrainOpts::default() };
        let hist = train_denoiser(&[State(vec![0, 1])], &mut den, &flow, &opts).unwrap();
        assert!(hist.is_empty());
        assert_eq!(den.net(), &before);
    }

    #[test]
    fn degenerate_dataset_is_learned() {
        let space = StateSpace::new(3, 3).unwrap();
        let target = State(vec![1, 0, 1]);
        let mut den = small_denoiser(&space, 3);
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let opts = TrainOpts {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 4,
            lr_decay: 1.0,
        };
        let hist = train_denoiser(&vec![target.clone(); 64], &mut den, &flow, &opts).unwrap();
        assert!(hist.last().unwrap() < &1e-2, "{hist:?}");
        let dd = den.predict(&space.all_masked(), 0.0).unwrap();
        for d in 0..3 {
            assert_eq!(dd.argmax(d), target[d]);
            assert!(dd.row(d)[target[d]] > 0.99);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let space = StateSpace::new(2, 3).unwrap();
        let mut den = small_denoiser(&space, 2);
        let flow = MaskingFlow::new(space, 0.0).unwrap();
        assert!(train_denoiser(&[], &mut den, &flow, &TrainOpts::default()).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let dd = DenoisingDistribution { symbols: 3, probs: vec![0.4, 0.4, 0.2], t: 0.0 };
        assert_eq!(dd.argmax(0), 0);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn rates_are_valid(xt in proptest::collection::vec(0usize..4, 3), t in 0.0f64..0.999, eta in 0.0f64..10.0,
                               seed in 0u64..50) {
                let space = StateSpace::with_tokens(3, 4, 3, Some(2)).unwrap();
                let den = small_denoiser(&space, seed);
                let flow = MaskingFlow::new(space, eta).unwrap();
                let xt = State(xt);
                let dd = den.predict(&xt, t).unwrap();
                for d in 0..3 {
                    prop_assert!((dd.row(d).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
                let r = unconditional_rates(&dd, &xt, t, &flow).unwrap();
                prop_assert!(r.violations().is_empty(), "{:?}", r.violations());
            }
        }
    }
}
