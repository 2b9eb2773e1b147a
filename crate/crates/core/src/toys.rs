//! Built-in enumerable tasks.
//!
//! * `counting`: binary sequences, label = number of ones observed with unit
//!   Gaussian noise (discretized to `0..=D`).
//! * `pairs`: three ternary positions with a correlated data law, label says
//!   whether the first and last positions agree.
//! * `padded`: variable-length binary sequences right-padded with a fixed pad
//!   token, labelled like `counting`.

use std::sync::Arc;

use rand::Rng;

use crate::denoiser::{EnumeratedDistribution, ExactBayesDenoiser};
use crate::oracle::{exact_posterior, JointVector};
use crate::predictor::{ExactNoisyPredictor, Label, Likelihood};
use crate::sampler::InitialState;
use crate::state_space::{State, StateSpace};
use crate::{Error, Result};

pub const TOY_NAMES: [&str; 3] = ["counting", "pairs", "padded"];

/// A task with a known data distribution and clean-label likelihood.
#[derive(Clone)]
pub struct Toy {
    pub name: String,
    pub data: Arc<EnumeratedDistribution>,
    pub likelihood: Likelihood,
    pub num_classes: usize,
    /// Label used as the guidance target.
    pub target: Label,
    /// Law of the number of trailing pad positions, when the space has a fixed token.
    pub pad_law: Option<Vec<(usize, f64)>>,
    property: fn(&State) -> f64,
}

impl std::fmt::Debug for Toy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Toy").field("name", &self.name).field("space", self.space()).finish_non_exhaustive()
    }
}

fn count_ones(x: &State) -> f64 {
    x.count(1) as f64
}

fn ends_agree(x: &State) -> f64 {
    f64::from(u8::from(x[0] == x[2]))
}

/// `p(y | n) ∝ exp(-(y - n)^2 / 2)` on `y = 0..=dims`.
fn soft_count_likelihood(dims: usize) -> Likelihood {
    let table: Vec<Vec<f64>> = (0..=dims)
        .map(|n| {
            let w: Vec<f64> = (0..=dims).map(|y| (-0.5 * (y as f64 - n as f64).powi(2)).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / z).collect()
        })
        .collect();
    Arc::new(move |x: &State, y: &Label| match y {
        Label::Class(k) if *k <= dims => table[x.count(1)][*k],
        _ => 0.0,
    })
}

impl Toy {
    pub fn space(&self) -> &StateSpace {
        self.data.space()
    }

    /// Scalar summary of a clean state used in reports.
    pub fn property(&self, x: &State) -> f64 {
        (self.property)(x)
    }

    pub fn initial_state(&self) -> InitialState {
        match &self.pad_law {
            Some(law) => InitialState::TrailingPads(law.clone()),
            None => InitialState::AllMasked,
        }
    }

    pub fn label_probs(&self, x: &State) -> Vec<f64> {
        (0..self.num_classes).map(|k| (self.likelihood)(x, &Label::Class(k))).collect()
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, x: &State, rng: &mut R) -> Label {
        let probs = self.label_probs(x);
        let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Label::Class(k);
            }
        }
        Label::Class(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
    }

    /// `n` i.i.d. clean states with labels drawn from the likelihood.
    pub fn dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(State, Label)> {
        (0..n)
            .map(|_| {
                let x = self.data.sample(rng).clone();
                let y = self.sample_label(&x, rng);
                (x, y)
            })
            .collect()
    }

    pub fn exact_denoiser(&self) -> Result<Arc<ExactBayesDenoiser>> {
        Ok(Arc::new(ExactBayesDenoiser::new(self.data.clone())?))
    }

    pub fn exact_predictor(&self, den: Arc<ExactBayesDenoiser>) -> ExactNoisyPredictor {
        ExactNoisyPredictor::new(den, self.likelihood.clone(), Some(self.num_classes))
    }

    /// `p(x | y)` annealed by `gamma`.
    pub fn posterior(&self, y: &Label, gamma: f64) -> Result<JointVector> {
        exact_posterior(&self.data, self.likelihood.as_ref(), y, gamma)
    }

    /// The law a guided chain targets. Pads are drawn from `pad_law` before
    /// sampling and guidance cannot move them, so with pads the target is
    /// `sum_k pad_law(k) p(x | y, k pads)` rather than `p(x | y)`.
    pub fn sampling_target(&self, y: &Label, gamma: f64) -> Result<JointVector> {
        let post = self.posterior(y, gamma)?;
        let (Some(law), Some(pad)) = (&self.pad_law, self.space().fixed()) else {
            return Ok(post);
        };
        let mut probs = vec![0.0; post.probs().len()];
        for &(pads, w) in law {
            let group: Vec<(State, f64)> = post.support().filter(|(x, _)| x.count(pad) == pads).collect();
            let mass: f64 = group.iter().map(|g| g.1).sum();
            if !(mass > 0.0) {
                return Err(Error::Evidence(vec![pad; pads]));
            }
            for (x, p) in group {
                probs[self.space().index_of(&x)] += w * p / mass;
            }
        }
        JointVector::new(self.space().clone(), probs)
    }
}

/// Binary sequences of length `dims` with i.i.d. `Bernoulli(p_one)` entries.
pub fn counting(dims: usize, p_one: f64) -> Result<Toy> {
    if !(0.0..=1.0).contains(&p_one) || !(1..=16).contains(&dims) {
        return Err(Error::Validation(format!("counting toy needs 1 <= dims <= 16 and p in [0, 1], got {dims}, {p_one}")));
    }
    let space = StateSpace::new(dims, 3)?;
    let weights = (0..1usize << dims)
        .map(|bits| {
            let x = State((0..dims).map(|d| (bits >> (dims - 1 - d)) & 1).collect());
            let ones = x.count(1) as i32;
            (x, p_one.powi(ones) * (1.0 - p_one).powi(dims as i32 - ones))
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    Ok(Toy {
        name: "counting".into(),
        data: Arc::new(EnumeratedDistribution::from_weights(space, weights)?),
        likelihood: soft_count_likelihood(dims),
        num_classes: dims + 1,
        target: Label::Class(dims - 2.min(dims)),
        pad_law: None,
        property: count_ones,
    })
}

/// Three positions over `{0, 1, 2}` (mask 3) with neighbour correlations.
pub fn pairs() -> Result<Toy> {
    let space = StateSpace::new(3, 4)?;
    let weights = space
        .enumerate_states()?
        .into_iter()
        .filter(|x| !x.contains(&3))
        .map(|x| {
            let score = 1.2 * f64::from(u8::from(x[0] == x[1])) + 0.8 * f64::from(u8::from(x[1] == x[2]))
                + 0.3 * x[0] as f64
                - 0.2 * x[2] as f64;
            (x, score.exp())
        })
        .collect();
    let likelihood: Likelihood = Arc::new(|x: &State, y: &Label| {
        let p1 = if x[0] == x[2] { 0.85 } else { 0.1 };
        match y {
            Label::Class(1) => p1,
            Label::Class(0) => 1.0 - p1,
            _ => 0.0,
        }
    });
    Ok(Toy {
        name: "pairs".into(),
        data: Arc::new(EnumeratedDistribution::from_weights(space, weights)?),
        likelihood,
        num_classes: 2,
        target: Label::Class(1),
        pad_law: None,
        property: ends_agree,
    })
}

/// Six positions: content `{0, 1}`, pad 2 (fixed), mask 3. Lengths 3 to 6
/// with a persistent Markov chain over the content.
pub fn padded() -> Result<Toy> {
    let dims = 6;
    let space = StateSpace::with_tokens(dims, 4, 3, Some(2))?;
    let length_law = [(3usize, 0.2), (4, 0.3), (5, 0.3), (6, 0.2)];
    let mut weights = Vec::new();
    for &(len, pl) in &length_law {
        for bits in 0..1usize << len {
            let content: Vec<usize> = (0..len).map(|d| (bits >> (len - 1 - d)) & 1).collect();
            let mut w = pl * if content[0] == 1 { 0.4 } else { 0.6 };
            for pair in content.windows(2) {
                w *= if pair[0] == pair[1] { 0.7 } else { 0.3 };
            }
            let mut x = content;
            x.resize(dims, 2);
            weights.push((State(x), w));
        }
    }
    Ok(Toy {
        name: "padded".into(),
        data: Arc::new(EnumeratedDistribution::from_weights(space, weights)?),
        likelihood: soft_count_likelihood(dims),
        num_classes: dims + 1,
        target: Label::Class(4),
        pad_law: Some(length_law.iter().map(|&(len, p)| (dims - len, p)).collect()),
        property: count_ones,
    })
}

pub fn by_name(name: &str, dims: Option<usize>, p_one: Option<f64>) -> Result<Toy> {
    match name {
        "counting" => counting(dims.unwrap_or(8), p_one.unwrap_or(0.35)),
        "pairs" => pairs(),
        "padded" => padded(),
        other => Err(Error::Config(format!("unknown task {other:?}; expected one of {TOY_NAMES:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn toys_are_normalized() {
        for toy in [counting(6, 0.3).unwrap(), pairs().unwrap(), padded().unwrap()] {
            let total: f64 = toy.data.entries().iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12, "{}", toy.name);
            for (x, _) in toy.data.entries() {
                let labels: f64 = toy.label_probs(x).iter().sum();
                assert!((labels - 1.0).abs() < 1e-12, "{}", toy.name);
            }
        }
    }

    #[test]
    fn counting_mean() {
        let toy = counting(8, 0.25).unwrap();
        assert!((toy.data.expectation(count_ones) - 2.0).abs() < 1e-12);
        assert_eq!(toy.target, Label::Class(6));
    }

    #[test]
    fn padded_lengths() {
        let toy = padded().unwrap();
        for (x, _) in toy.data.entries() {
            let first_pad = x.iter().position(|&s| s == 2).unwrap_or(6);
            assert!(first_pad >= 3);
            assert!(x[first_pad..].iter().all(|&s| s == 2));
        }
        let law = toy.pad_law.as_ref().unwrap();
        for &(pads, p) in law {
            let mass: f64 = toy.data.entries().iter().filter(|(x, _)| x.count(2) == pads).map(|e| e.1).sum();
            assert!((mass - p).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_target_keeps_pad_law() {
        let toy = padded().unwrap();
        let target = toy.sampling_target(&Label::Class(5), 1.0).unwrap();
        for &(pads, p) in toy.pad_law.as_ref().unwrap() {
            let mass: f64 = target.support().filter(|(x, _)| x.count(2) == pads).map(|e| e.1).sum();
            assert!((mass - p).abs() < 1e-12);
        }
        let pairs = pairs().unwrap();
        assert_eq!(pairs.sampling_target(&Label::Class(1), 1.0).unwrap(), pairs.posterior(&Label::Class(1), 1.0).unwrap());
    }

    #[test]
    fn labels_follow_likelihood() {
        let toy = pairs().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = State(vec![1, 0, 1]);
        let ones = (0..20_000).filter(|_| toy.sample_label(&x, &mut rng) == Label::Class(1)).count();
        assert!((ones as f64 / 20_000.0 - 0.85).abs() < 0.015);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(by_name("nope", None, None), Err(Error::Config(_))));
    }
}
