//! Noisy predictors `p(y | x_t, t)` used to guide the generative rates.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::denoiser::{ExactBayesDenoiser, T_EPS};
use crate::guidance::PROB_FLOOR;
use crate::processes::{check_unit_interval, MaskingFlow};
use crate::smallnet::{log_softmax, NeuralNet, Optimizer, TrainOpts};
use crate::state_space::{Embedding, State, StateSpace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    /// Real value of the label; class ids are read as ordinal values.
    pub fn as_value(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }

    pub fn class(&self) -> Result<usize> {
        match *self {
            Label::Class(c) => Ok(c),
            Label::Value(v) => Err(Error::Contract(format!("categorical predictor given real label {v}"))),
        }
    }

    fn key(&self) -> LabelKey {
        match *self {
            Label::Class(c) => LabelKey::Class(c),
            Label::Value(v) => LabelKey::Value(v.to_bits()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LabelKey {
    Class(usize),
    Value(u64),
}

/// A predictive model `p(y | x, t)`.
///
/// `log_prob` evaluates discrete states. Models that are continuous in the
/// one-hot embedding also implement `log_prob_relaxed` and `grad_log_prob`,
/// which Taylor-approximated guidance needs.
pub trait Predictor: Send + Sync {
    fn space(&self) -> &StateSpace;

    fn log_prob(&self, x: &State, t: f64, y: &Label) -> Result<f64>;

    fn log_prob_relaxed(&self, _x: &Embedding, _t: f64, _y: &Label) -> Result<f64> {
        Err(Error::Unsupported("predictor is not defined on relaxed inputs"))
    }

    fn grad_log_prob(&self, _x: &Embedding, _t: f64, _y: &Label) -> Result<Vec<f64>> {
        Err(Error::Unsupported("predictor has no input gradient"))
    }

    /// Number of classes for categorical predictors.
    fn num_classes(&self) -> Option<usize> {
        None
    }
}

/// Clean-data likelihood `p(y | x_1)`.
pub type Likelihood = Arc<dyn Fn(&State, &Label) -> f64 + Send + Sync>;

/// `p(y | x_t) = sum_{x_1} p(y | x_1) p(x_1 | x_t)` by enumeration over the
/// data support, with the joint exact-Bayes posterior. Results are memoized.
pub struct ExactNoisyPredictor {
    den: Arc<ExactBayesDenoiser>,
    likelihood: Likelihood,
    num_classes: Option<usize>,
    cache: DashMap<(State, LabelKey), f64>,
    degenerate: AtomicUsize,
}

impl ExactNoisyPredictor {
    pub fn new(den: Arc<ExactBayesDenoiser>, likelihood: Likelihood, num_classes: Option<usize>) -> Self {
        Self { den, likelihood, num_classes, cache: DashMap::new(), degenerate: AtomicUsize::new(0) }
    }

    pub fn denoiser(&self) -> &Arc<ExactBayesDenoiser> {
        &self.den
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    /// Number of evaluations that fell back to the probability floor.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }
}

/// Exact noisy log-likelihood. A state without evidence, or with zero total
/// probability for `y`, yields `ln(1e-300)` and bumps the degenerate counter.
pub fn exact_noisy_log_prob(p: &ExactNoisyPredictor, xt: &State, t: f64, y: &Label) -> Result<f64> {
    check_unit_interval(t)?;
    let key = (xt.clone(), y.key());
    if let Some(v) = p.cache.get(&key) {
        return Ok(*v);
    }
    let prob = match p.den.posterior(xt, t) {
        Ok(post) => {
            let entries = p.den.data().entries();
            post.iter().map(|&(i, w)| w * (p.likelihood)(&entries[i].0, y)).sum::<f64>()
        }
        Err(Error::Evidence(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let lp = if prob > 0.0 {
        prob.ln()
    } else {
        p.degenerate.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR.ln()
    };
    p.cache.insert(key, lp);
    Ok(lp)
}

impl Predictor for ExactNoisyPredictor {
    fn space(&self) -> &StateSpace {
        self.den.data().space()
    }

    fn log_prob(&self, x: &State, t: f64, y: &Label) -> Result<f64> {
        exact_noisy_log_prob(self, x, t, y)
    }

    fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }
}

fn net_input(space: &StateSpace, x: &Embedding, t: f64, time_input: bool) -> Result<Vec<f64>> {
    if x.dims != space.dims() || x.symbols != space.symbols() {
        return Err(Error::Contract("embedding shape does not match the state space".into()));
    }
    let mut v = x.data.clone();
    if time_input {
        v.push(t);
    }
    Ok(v)
}

fn check_net(space: &StateSpace, net: &NeuralNet, time_input: bool, outputs: usize) -> Result<()> {
    let expected_in = space.dims() * space.symbols() + usize::from(time_input);
    if net.input_size() != expected_in || net.output_size() != outputs {
        return Err(Error::Validation(format!(
            "predictor net must map {expected_in} inputs to {outputs} outputs, got {:?}",
            net.layer_sizes()
        )));
    }
    Ok(())
}

/// Predictors trainable with the noisy log-likelihood objective.
pub trait TrainablePredictor: Predictor {
    fn num_params(&self) -> usize;

    /// `-log p(y | x, t)`; adds `scale` times its parameter gradient into `grads`.
    fn accumulate_nll_grad(&self, x: &State, t: f64, y: &Label, scale: f64, grads: &mut [f64]) -> Result<f64>;

    fn apply_update(&mut self, opt: &mut Optimizer, grads: &[f64]) -> Result<()>;

    fn params(&self) -> Vec<f64>;
}

/// `Normal(y | mu(x), sigma(t))` with `sigma(t) = t sigma1 + (1 - t) sigma0`.
///
/// `sigma0` is fixed (the spread of labels on fully-noised inputs);
/// `sigma1` is learned through its logarithm.
#[derive(Debug, Clone)]
pub struct GaussianRegressor {
    space: StateSpace,
    mu_net: NeuralNet,
    sigma0: f64,
    log_sigma1: f64,
    time_input: bool,
}

impl GaussianRegressor {
    pub fn new(space: StateSpace, mu_net: NeuralNet, sigma0: f64, sigma1: f64, time_input: bool) -> Result<Self> {
        check_net(&space, &mu_net, time_input, 1)?;
        if !(sigma0 > 0.0 && sigma1 > 0.0) || !sigma0.is_finite() || !sigma1.is_finite() {
            return Err(Error::Validation(format!("sigmas must be positive, got {sigma0}, {sigma1}")));
        }
        Ok(Self { space, mu_net, sigma0, log_sigma1: sigma1.ln(), time_input })
    }

    pub fn net(&self) -> &NeuralNet {
        &self.mu_net
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t * self.sigma1() + (1.0 - t) * self.sigma0
    }

    pub fn mean(&self, x: &Embedding, t: f64) -> Result<f64> {
        Ok(self.mu_net.forward(&net_input(&self.space, x, t, self.time_input)?)?[0])
    }

    /// `d mu / d x` on the one-hot embedding, together with `mu`.
    fn mean_and_grad(&self, x: &Embedding, t: f64) -> Result<(f64, Vec<f64>)> {
        let (out, tape) = self.mu_net.forward_recorded(&net_input(&self.space, x, t, self.time_input)?)?;
        let mut g = self.mu_net.backward(&tape, &[1.0])?.input;
        g.truncate(x.data.len());
        Ok((out[0], g))
    }
}

/// Log-density of the Gaussian regressor at a real target.
pub fn gaussian_log_prob(g: &GaussianRegressor, x: &Embedding, t: f64, y_value: f64) -> Result<f64> {
    check_unit_interval(t)?;
    let mu = g.mean(x, t)?;
    let sigma = g.sigma(t);
    let z = (y_value - mu) / sigma;
    Ok(-0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
}

impl Predictor for GaussianRegressor {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn log_prob(&self, x: &State, t: f64, y: &Label) -> Result<f64> {
        gaussian_log_prob(self, self.space.encode_one_hot(x)?.embedding(), t, y.as_value())
    }

    fn log_prob_relaxed(&self, x: &Embedding, t: f64, y: &Label) -> Result<f64> {
        gaussian_log_prob(self, x, t, y.as_value())
    }

    fn grad_log_prob(&self, x: &Embedding, t: f64, y: &Label) -> Result<Vec<f64>> {
        check_unit_interval(t)?;
        let (mu, dmu) = self.mean_and_grad(x, t)?;
        let sigma = self.sigma(t);
        let coef = (y.as_value() - mu) / (sigma * sigma);
        Ok(dmu.into_iter().map(|g| coef * g).collect())
    }
}

impl TrainablePredictor for GaussianRegressor {
    fn num_params(&self) -> usize {
        self.mu_net.params().len() + 1
    }

    fn accumulate_nll_grad(&self, x: &State, t: f64, y: &Label, scale: f64, grads: &mut [f64]) -> Result<f64> {
        let input = net_input(&self.space, self.space.encode_one_hot(x)?.embedding(), t, self.time_input)?;
        let (out, tape) = self.mu_net.forward_recorded(&input)?;
        let mu = out[0];
        let sigma1 = self.sigma1();
        let sigma = t * sigma1 + (1.0 - t) * self.sigma0;
        let resid = y.as_value() - mu;
        let nll = 0.5 * (resid / sigma).powi(2) + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        let n = self.mu_net.params().len();
        let d_mu = -resid / (sigma * sigma);
        self.mu_net.backward_accumulate(&tape, &[scale * d_mu], &mut grads[..n])?;
        let d_sigma = 1.0 / sigma - resid * resid / sigma.powi(3);
        grads[n] += scale * d_sigma * t * sigma1;
        Ok(nll)
    }

    fn apply_update(&mut self, opt: &mut Optimizer, grads: &[f64]) -> Result<()> {
        let mut params = self.params();
        opt.step(&mut params, grads)?;
        self.log_sigma1 = params.pop().expect("sigma parameter");
        self.mu_net.params_mut().copy_from_slice(&params);
        Ok(())
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.mu_net.params().to_vec();
        p.push(self.log_sigma1);
        p
    }
}

/// Softmax classifier over `K` classes.
#[derive(Debug, Clone)]
pub struct NeuralClassifier {
    space: StateSpace,
    net: NeuralNet,
    time_input: bool,
}

impl NeuralClassifier {
    pub fn new(space: StateSpace, net: NeuralNet, time_input: bool) -> Result<Self> {
        let k = net.output_size();
        if k < 2 {
            return Err(Error::Validation("classifier needs at least two classes".into()));
        }
        check_net(&space, &net, time_input, k)?;
        Ok(Self { space, net, time_input })
    }

    pub fn net(&self) -> &NeuralNet {
        &self.net
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    fn class_of(&self, y: &Label) -> Result<usize> {
        let c = y.class()?;
        if c >= self.net.output_size() {
            return Err(Error::Validation(format!("class {c} outside 0..{}", self.net.output_size())));
        }
        Ok(c)
    }
}

impl Predictor for NeuralClassifier {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn log_prob(&self, x: &State, t: f64, y: &Label) -> Result<f64> {
        self.log_prob_relaxed(self.space.encode_one_hot(x)?.embedding(), t, y)
    }

    fn log_prob_relaxed(&self, x: &Embedding, t: f64, y: &Label) -> Result<f64> {
        let c = self.class_of(y)?;
        let logits = self.net.forward(&net_input(&self.space, x, t, self.time_input)?)?;
        Ok(log_softmax(&logits)[c])
    }

    fn grad_log_prob(&self, x: &Embedding, t: f64, y: &Label) -> Result<Vec<f64>> {
        let c = self.class_of(y)?;
        let (logits, tape) = self.net.forward_recorded(&net_input(&self.space, x, t, self.time_input)?)?;
        let mut upstream: Vec<f64> = log_softmax(&logits).iter().map(|lp| -lp.exp()).collect();
        upstream[c] += 1.0;
        let mut g = self.net.backward(&tape, &upstream)?.input;
        g.truncate(x.data.len());
        Ok(g)
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.net.output_size())
    }
}

impl TrainablePredictor for NeuralClassifier {
    fn num_params(&self) -> usize {
        self.net.params().len()
    }

    fn accumulate_nll_grad(&self, x: &State, t: f64, y: &Label, scale: f64, grads: &mut [f64]) -> Result<f64> {
        let c = self.class_of(y)?;
        let input = net_input(&self.space, self.space.encode_one_hot(x)?.embedding(), t, self.time_input)?;
        let (logits, tape) = self.net.forward_recorded(&input)?;
        let lp = log_softmax(&logits);
        let mut upstream: Vec<f64> = lp.iter().map(|l| scale * l.exp()).collect();
        upstream[c] -= scale;
        self.net.backward_accumulate(&tape, &upstream, grads)?;
        Ok(-lp[c].max(PROB_FLOOR.ln()))
    }

    fn apply_update(&mut self, opt: &mut Optimizer, grads: &[f64]) -> Result<()> {
        opt.step(self.net.params_mut(), grads)
    }

    fn params(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }
}

/// Binary event `y >= threshold` under a Gaussian regressor: class 1 when the
/// event holds, class 0 otherwise.
#[derive(Debug, Clone)]
pub struct ThresholdPredictor {
    pub regressor: GaussianRegressor,
    pub threshold: f64,
}

impl ThresholdPredictor {
    fn log_prob_and_dmu(&self, x: &Embedding, t: f64, y: &Label) -> Result<(f64, f64)> {
        check_unit_interval(t)?;
        let c = y.class()?;
        if c > 1 {
            return Err(Error::Validation(format!("threshold predictor has classes 0 and 1, got {c}")));
        }
        let mu = self.regressor.mean(x, t)?;
        let sigma = self.regressor.sigma(t);
        let z = (self.threshold - mu) / sigma;
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // P(y >= tau) = Phi(-z); P(y < tau) = Phi(z)
        let (p, dp_dmu) = if c == 1 {
            (0.5 * erfc(z / std::f64::consts::SQRT_2), density / sigma)
        } else {
            (0.5 * erfc(-z / std::f64::consts::SQRT_2), -density / sigma)
        };
        let p = p.max(PROB_FLOOR);
        Ok((p.ln(), dp_dmu / p))
    }
}

impl Predictor for ThresholdPredictor {
    fn space(&self) -> &StateSpace {
        self.regressor.space()
    }

    fn log_prob(&self, x: &State, t: f64, y: &Label) -> Result<f64> {
        self.log_prob_relaxed(self.regressor.space.encode_one_hot(x)?.embedding(), t, y)
    }

    fn log_prob_relaxed(&self, x: &Embedding, t: f64, y: &Label) -> Result<f64> {
        Ok(self.log_prob_and_dmu(x, t, y)?.0)
    }

    fn grad_log_prob(&self, x: &Embedding, t: f64, y: &Label) -> Result<Vec<f64>> {
        let (_, dlog_dmu) = self.log_prob_and_dmu(x, t, y)?;
        let (_, dmu) = self.regressor.mean_and_grad(x, t)?;
        Ok(dmu.into_iter().map(|g| dlog_dmu * g).collect())
    }

    fn num_classes(&self) -> Option<usize> {
        Some(2)
    }
}

/// `log p(y | x) = sum_{d,s} w[d][s] x[d][s] + bias`, linear in the embedding.
/// Its first-order Taylor expansion is exact.
#[derive(Debug, Clone)]
pub struct LogLinearPredictor {
    space: StateSpace,
    weights: Vec<f64>,
    bias: f64,
}

impl LogLinearPredictor {
    pub fn new(space: StateSpace, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != space.dims() * space.symbols() {
            return Err(Error::Validation("log-linear weights must be D x S".into()));
        }
        Ok(Self { space, weights, bias })
    }
}

impl Predictor for LogLinearPredictor {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn log_prob(&self, x: &State, _t: f64, _y: &Label) -> Result<f64> {
        self.space.validate(x)?;
        let s = self.space.symbols();
        Ok(self.bias + x.iter().enumerate().map(|(d, &v)| self.weights[d * s + v]).sum::<f64>())
    }

    fn log_prob_relaxed(&self, x: &Embedding, _t: f64, _y: &Label) -> Result<f64> {
        Ok(self.bias + x.data.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    fn grad_log_prob(&self, _x: &Embedding, _t: f64, _y: &Label) -> Result<Vec<f64>> {
        Ok(self.weights.clone())
    }
}

/// Sample standard deviation of real-valued labels.
pub fn empirical_std(labels: &[Label]) -> f64 {
    let n = labels.len() as f64;
    let mean = labels.iter().map(Label::as_value).sum::<f64>() / n;
    (labels.iter().map(|l| (l.as_value() - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Maximize the Monte-Carlo noisy log-likelihood
/// `E_{(x_1, y), t, x_t}[log p(y | x_t, t)]` with `t ~ U[0, 1 - T_EPS]` and
/// `x_t` drawn from the masking flow. Returns the mean loss per epoch.
pub fn train_noisy_predictor<P: TrainablePredictor + ?Sized>(
    dataset: &[(State, Label)],
    pred: &mut P,
    flow: &MaskingFlow,
    opts: &TrainOpts,
) -> Result<Vec<f64>> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Optimizer::new(opts.optimizer, opts.learning_rate, pred.num_params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = vec![0.0; pred.num_params()];
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x1, y) = &dataset[i];
                let t = rng.random::<f64>() * (1.0 - T_EPS);
                let xt = flow.sample_forward(x1, t, &mut rng)?;
                batch_loss += pred.accumulate_nll_grad(&xt, t, y, scale, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            pred.apply_update(&mut opt, &grads).map_err(|_| Error::Divergence { epoch, loss: batch_loss })?;
        }
        history.push(epoch_loss / dataset.len() as f64);
        opt.learning_rate *= opts.lr_decay;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::EnumeratedDistribution;
    use crate::smallnet::{Activation, OptimizerKind};

    fn two_point() -> (StateSpace, Arc<ExactBayesDenoiser>, State, State) {
        let space = StateSpace::new(2, 3).unwrap();
        let a = State(vec![0, 0]);
        let b = State(vec![1, 1]);
        let data = EnumeratedDistribution::new(space.clone(), vec![(a.clone(), 0.5), (b.clone(), 0.5)]).unwrap();
        (space, Arc::new(ExactBayesDenoiser::new(Arc::new(data)).unwrap()), a, b)
    }

    #[test]
    fn exact_predictor_marginalizes() {
        let (_, den, a, _) = two_point();
        let a2 = a.clone();
        let lik: Likelihood = Arc::new(move |x, y| {
            let is_a = *x == a2;
            match y.class().unwrap() {
                1 => f64::from(u8::from(is_a)),
                _ => f64::from(u8::from(!is_a)),
            }
        });
        let p = ExactNoisyPredictor::new(den, lik, Some(2));
        let masked = State(vec![2, 2]);
        assert!((exact_noisy_log_prob(&p, &masked, 0.3, &Label::Class(1)).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        // Clean endpoint: point-mass posterior.
        assert_eq!(exact_noisy_log_prob(&p, &a, 1.0, &Label::Class(1)).unwrap(), 0.0);
        assert_eq!(p.degenerate_count(), 0);
        let lp = exact_noisy_log_prob(&p, &a, 1.0, &Label::Class(0)).unwrap();
        assert_eq!(lp, PROB_FLOOR.ln());
        assert_eq!(p.degenerate_count(), 1);
    }

    #[test]
    fn exact_predictor_certain_label() {
        let (_, den, _, _) = two_point();
        let p = ExactNoisyPredictor::new(den, Arc::new(|_, _| 1.0), None);
        assert_eq!(exact_noisy_log_prob(&p, &State(vec![2, 1]), 0.6, &Label::Class(0)).unwrap(), 0.0);
    }

    #[test]
    fn exact_predictor_zero_evidence_is_floored() {
        let (_, den, _, _) = two_point();
        let p = ExactNoisyPredictor::new(den, Arc::new(|_, _| 1.0), None);
        assert_eq!(exact_noisy_log_prob(&p, &State(vec![0, 1]), 0.6, &Label::Class(0)).unwrap(), PROB_FLOOR.ln());
        assert_eq!(p.degenerate_count(), 1);
    }

    fn zero_mean_regressor(sigma0: f64, sigma1: f64) -> GaussianRegressor {
        let space = StateSpace::new(2, 3).unwrap();
        let net = NeuralNet::from_params(vec![6, 1], Activation::Identity, 0, vec![0.0; 7]).unwrap();
        GaussianRegressor::new(space, net, sigma0, sigma1, false).unwrap()
    }

    #[test]
    fn gaussian_examples() {
        let g = zero_mean_regressor(1.0, 1.0);
        let x = g.space().encode_one_hot(&State(vec![0, 2])).unwrap();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for t in [0.0, 0.4, 1.0] {
            let lp = gaussian_log_prob(&g, &x, t, 1.0).unwrap();
            assert!((lp - (-0.5 - half_log_2pi)).abs() < 1e-12);
            assert!((lp + 1.4189).abs() < 1e-4);
        }
        let g = zero_mean_regressor(2.0, 0.5);
        assert_eq!(g.sigma(0.0), 2.0);
        let lp = gaussian_log_prob(&g, &x, 0.0, 0.0).unwrap();
        assert!((lp + (2.0f64 * (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let space = StateSpace::new(2, 3).unwrap();
        let net = NeuralNet::new(vec![6, 1], Activation::Identity, 0).unwrap();
        assert!(GaussianRegressor::new(space, net, 0.0, 1.0, false).is_err());
    }

    fn max_rel_fd_error(p: &dyn Predictor, x: &Embedding, t: f64, y: &Label) -> f64 {
        let g = p.grad_log_prob(x, t, y).unwrap();
        let h = 1e-4;
        (0..x.data.len())
            .map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[i] += h;
                xm.data[i] -= h;
                let num = (p.log_prob_relaxed(&xp, t, y).unwrap() - p.log_prob_relaxed(&xm, t, y).unwrap()) / (2.0 * h);
                (num - g[i]).abs() / g[i].abs().max(1e-8)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let space = StateSpace::new(3, 4).unwrap();
        let x = space.encode_one_hot(&State(vec![3, 0, 2])).unwrap();
        let net = NeuralNet::new(vec![12, 16, 1], Activation::Relu, 7).unwrap();
        let g = GaussianRegressor::new(space.clone(), net, 1.3, 0.4, false).unwrap();
        assert!(max_rel_fd_error(&g, &x, 0.3, &Label::Value(0.7)) < 1e-5);

        let net = NeuralNet::new(vec![12, 3], Activation::Identity, 8).unwrap();
        let c = NeuralClassifier::new(space.clone(), net, false).unwrap();
        assert!(max_rel_fd_error(&c, &x, 0.3, &Label::Class(2)) < 1e-5);

        let th = ThresholdPredictor { regressor: g, threshold: 0.2 };
        assert!(max_rel_fd_error(&th, &x, 0.5, &Label::Class(1)) < 1e-5);
        assert!(max_rel_fd_error(&th, &x, 0.5, &Label::Class(0)) < 1e-5);
    }

    #[test]
    fn categorical_predictors_normalize() {
        let space = StateSpace::new(3, 4).unwrap();
        let net = NeuralNet::new(vec![12, 8, 5], Activation::Relu, 3).unwrap();
        let c = NeuralClassifier::new(space.clone(), net, false).unwrap();
        let net = NeuralNet::new(vec![12, 8, 1], Activation::Relu, 3).unwrap();
        let th = ThresholdPredictor { regressor: GaussianRegressor::new(space.clone(), net, 1.0, 0.3, false).unwrap(), threshold: 0.1 };
        for x in space.enumerate_states().unwrap() {
            for p in [&c as &dyn Predictor, &th] {
                let k = p.num_classes().unwrap();
                let total: f64 = (0..k).map(|y| p.log_prob(&x, 0.5, &Label::Class(y)).unwrap().exp()).sum();
                assert!((total - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_label_is_learned() {
        let space = StateSpace::new(2, 3).unwrap();
        let net = NeuralNet::new(vec![6, 16, 2], Activation::Relu, 1).unwrap();
        let mut c = NeuralClassifier::new(space.clone(), net, false).unwrap();
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let data: Vec<(State, Label)> =
            space.enumerate_states().unwrap().into_iter().filter(|x| !x.contains(&2)).map(|x| (x, Label::Class(1))).collect();
        let opts = TrainOpts { epochs: 200, batch_size: 4, learning_rate: 1e-2, optimizer: OptimizerKind::Adam, seed: 0, lr_decay: 1.0 };
        let hist = train_noisy_predictor(&data, &mut c, &flow, &opts).unwrap();
        assert!(*hist.last().unwrap() < 1e-2);
        for x in space.enumerate_states().unwrap() {
            assert!(c.log_prob(&x, 0.5, &Label::Class(1)).unwrap() > -1e-2);
        }
    }

    #[test]
    fn zero_epochs_unchanged() {
        let mut g = zero_mean_regressor(1.0, 0.5);
        let before = g.params();
        let flow = MaskingFlow::new(g.space().clone(), 0.0).unwrap();
        let opts = TrainOpts { epochs: 0, ..TrainOpts::default() };
        train_noisy_predictor(&[(State(vec![0, 1]), Label::Value(1.0))], &mut g, &flow, &opts).unwrap();
        assert_eq!(g.params(), before);
    }

    #[test]
    fn gaussian_training_fits_mean_and_sigma() {
        let space = StateSpace::new(2, 3).unwrap();
        let data: Vec<(State, Label)> = space
            .enumerate_states()
            .unwrap()
            .into_iter()
            .filter(|x| !x.contains(&2))
            .map(|x| {
                let y = x.count(1) as f64;
                (x, Label::Value(y))
            })
            .collect();
        let labels: Vec<Label> = data.iter().map(|d| d.1).collect();
        let net = NeuralNet::new(vec![6, 16, 1], Activation::Relu, 2).unwrap();
        let mut g = GaussianRegressor::new(space.clone(), net, empirical_std(&labels), 1.0, false).unwrap();
        let flow = MaskingFlow::new(space.clone(), 0.0).unwrap();
        let opts = TrainOpts { epochs: 400, batch_size: 4, learning_rate: 5e-3, optimizer: OptimizerKind::Adam, seed: 3, lr_decay: 1.0 };
        train_noisy_predictor(&data, &mut g, &flow, &opts).unwrap();
        let clean = space.encode_one_hot(&State(vec![1, 1])).unwrap();
        assert!((g.mean(&clean, 1.0).unwrap() - 2.0).abs() < 0.1);
        assert!(g.sigma1() < 0.5, "sigma1 = {}", g.sigma1());
    }
}
