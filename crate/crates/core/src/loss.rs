//! Terms of the steering objective: a KL anchor to the unperturbed
//! distribution, a topic bag-of-words term and a Gaussian-weighted affect
//! term. All values are in nats.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{AffectBag, EmotionCategory, TopicBag};
use crate::model::ProbabilityLoss;

pub const DEFAULT_KNOB: f64 = 0.5;
pub const DEFAULT_VARIANCE: f64 = 0.05;
pub const DEFAULT_STEP_SIZE: f64 = 0.005;
pub const DEFAULT_GD_ITERATIONS: usize = 3;
pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl_scale: f64,
    pub topic_scale: f64,
    pub affect_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl_scale: 0.01,
            topic_scale: 1.0,
            affect_scale: 1.0,
        }
    }
}

/// How a raw history gradient is turned into an update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScaling {
    /// `delta -= step_size * grad`.
    #[default]
    Raw,
    /// Each key/value tensor of the gradient is scaled to unit norm first.
    PerTensorNorm,
}

/// Every steering parameter of one generation session.
#[derive(Debug, Clone)]
pub struct ControlConfig {
    /// Target emotion bag; `None` disables the affect term.
    pub affect: Option<Arc<AffectBag>>,
    /// Target intensity, the mean of the Gaussian weighting.
    pub knob: f64,
    pub variance: f64,
    /// `None` disables the topic term.
    pub topic: Option<Arc<TopicBag>>,
    pub step_size: f64,
    pub gd_iterations: usize,
    pub weights: LossWeights,
    pub epsilon_floor: f64,
    /// Restricts the perturbation to the most recent `window` positions.
    pub window: Option<usize>,
    pub gradient_scaling: GradientScaling,
    /// Keep the perturbed history for later tokens instead of extending the
    /// unperturbed one.
    pub carry_perturbed_history: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            affect: None,
            knob: DEFAULT_KNOB,
            variance: DEFAULT_VARIANCE,
            topic: None,
            step_size: DEFAULT_STEP_SIZE,
            gd_iterations: DEFAULT_GD_ITERATIONS,
            weights: LossWeights::default(),
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            window: None,
            gradient_scaling: GradientScaling::Raw,
            carry_perturbed_history: false,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.knob) {
            return Err(Error::config("knob", format!("{} is outside [0, 1]", self.knob)));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::config("variance", format!("{} must be positive", self.variance)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(
                "step_size",
                format!("{} must be non-negative", self.step_size),
            ));
        }
        if self.gd_iterations == 0 {
            return Err(Error::config("gd_iterations", "must be at least 1"));
        }
        for (field, w) in [
            ("kl_scale", self.weights.kl_scale),
            ("topic_scale", self.weights.topic_scale),
            ("affect_scale", self.weights.affect_scale),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(field, format!("{w} must be non-negative")));
            }
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1.0) {
            return Err(Error::config("epsilon_floor", "must lie in (0, 1)"));
        }
        if self.window == Some(0) {
            return Err(Error::config("window", "must be at least 1 when set"));
        }
        Ok(())
    }

    /// Whether any attribute term is configured.
    pub fn steers(&self) -> bool {
        self.affect.is_some() || self.topic.is_some()
    }

    pub fn snapshot(&self) -> ControlSnapshot {
        ControlSnapshot {
            emotion: self.affect.as_ref().map(|b| b.emotion),
            knob: self.knob,
            variance: self.variance,
            topic: self.topic.as_ref().map(|t| t.topic_name.clone()),
            step_size: self.step_size,
            gd_iterations: self.gd_iterations,
            weights: self.weights,
            epsilon_floor: self.epsilon_floor,
            window: self.window,
            gradient_scaling: self.gradient_scaling,
            carry_perturbed_history: self.carry_perturbed_history,
        }
    }
}

/// Serializable view of a [`ControlConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSnapshot {
    pub emotion: Option<EmotionCategory>,
    pub knob: f64,
    pub variance: f64,
    pub topic: Option<String>,
    pub step_size: f64,
    pub gd_iterations: usize,
    pub weights: LossWeights,
    pub epsilon_floor: f64,
    pub window: Option<usize>,
    pub gradient_scaling: GradientScaling,
    pub carry_perturbed_history: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kld: f64,
    pub topic: Option<f64>,
    pub affect: Option<f64>,
    /// `kl_scale * kld + topic_scale * topic + affect_scale * affect`.
    pub total: f64,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown = LossBreakdown {
        kld: 0.0,
        topic: None,
        affect: None,
        total: 0.0,
    };
}

/// Unnormalized Gaussian kernel `exp(-(x - knob)^2 / (2 variance))`.
pub fn gaussian_weight(intensity: f64, knob: f64, variance: f64) -> Result<f64> {
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::config("variance", format!("{variance} must be positive")));
    }
    let d = intensity - knob;
    Ok((-d * d / (2.0 * variance)).exp())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&x| x < 0.0) {
        return Err(Error::Shape(format!("not a probability vector (sum {s})")));
    }
    Ok(())
}

fn bag_mass(p: &[f64], ids: &[u32]) -> Result<f64> {
    ids.iter()
        .map(|&i| {
            p.get(i as usize)
                .copied()
                .ok_or_else(|| Error::Shape(format!("bag token {i} outside a {}-way distribution", p.len())))
        })
        .sum()
}

/// `-log(max(sum of bag probabilities, floor))`.
pub fn topic_loss(p: &[f64], topic: &TopicBag, epsilon_floor: f64) -> Result<f64> {
    if topic.is_empty() {
        return Err(Error::Empty(format!("topic bag {:?}", topic.topic_name)));
    }
    check_distribution(p)?;
    Ok(-bag_mass(p, &topic.token_ids)?.max(epsilon_floor).ln())
}

fn affect_weights(bag: &AffectBag, knob: f64, variance: f64) -> Result<Vec<f64>> {
    bag.intensities
        .iter()
        .map(|&x| gaussian_weight(x, knob, variance))
        .collect()
}

fn weighted_mass(p: &[f64], ids: &[u32], weights: &[f64]) -> Result<f64> {
    let mut m = 0.0;
    for (&i, &w) in ids.iter().zip(weights) {
        let pi = p
            .get(i as usize)
            .ok_or_else(|| Error::Shape(format!("bag token {i} outside a {}-way distribution", p.len())))?;
        m += pi * w;
    }
    Ok(m)
}

/// `-log(max(sum_j p[t_j] * gaussian(intensity_j; knob, variance), floor))`.
pub fn affect_loss(p: &[f64], bag: &AffectBag, knob: f64, variance: f64, epsilon_floor: f64) -> Result<f64> {
    if bag.is_empty() {
        return Err(Error::Empty(format!("{} affect bag", bag.emotion)));
    }
    check_distribution(p)?;
    let w = affect_weights(bag, knob, variance)?;
    Ok(-weighted_mass(p, &bag.token_ids, &w)?.max(epsilon_floor).ln())
}

/// `KL(perturbed || unperturbed)` in nats with `floor` applied inside the logs.
pub fn kld_loss(p_perturbed: &[f64], p_unperturbed: &[f64], epsilon_floor: f64) -> Result<f64> {
    if p_perturbed.len() != p_unperturbed.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p_perturbed.len(),
            p_unperturbed.len()
        )));
    }
    let kl: f64 = p_perturbed
        .iter()
        .zip(p_unperturbed)
        .map(|(&a, &b)| a * (a.max(epsilon_floor).ln() - b.max(epsilon_floor).ln()))
        .sum();
    // Rounding can push an exact zero slightly negative.
    Ok(kl.max(0.0))
}

/// Weighted combination of the configured terms.
pub fn total_loss(p_perturbed: &[f64], p_unperturbed: &[f64], config: &ControlConfig) -> Result<LossBreakdown> {
    Objective::new(config, p_unperturbed)?.breakdown(p_perturbed)
}

/// The steering objective at one token, anchored to a fixed unperturbed
/// distribution. Implements [`ProbabilityLoss`] so it can be differentiated
/// through a model.
pub struct Objective<'a> {
    config: &'a ControlConfig,
    p_unperturbed: &'a [f64],
    affect_weights: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(config: &'a ControlConfig, p_unperturbed: &'a [f64]) -> Result<Self> {
        config.validate()?;
        let affect_weights = match &config.affect {
            Some(bag) => {
                if bag.is_empty() {
                    return Err(Error::Empty(format!("{} affect bag", bag.emotion)));
                }
                affect_weights(bag, config.knob, config.variance)?
            }
            None => Vec::new(),
        };
        if let Some(t) = &config.topic {
            if t.is_empty() {
                return Err(Error::Empty(format!("topic bag {:?}", t.topic_name)));
            }
        }
        Ok(Self {
            config,
            p_unperturbed,
            affect_weights,
        })
    }

    pub fn breakdown(&self, p: &[f64]) -> Result<LossBreakdown> {
        let cfg = self.config;
        let eps = cfg.epsilon_floor;
        let kld = kld_loss(p, self.p_unperturbed, eps)?;
        let topic = match &cfg.topic {
            Some(t) => Some(-bag_mass(p, &t.token_ids)?.max(eps).ln()),
            None => None,
        };
        let affect = match &cfg.affect {
            Some(bag) => Some(-weighted_mass(p, &bag.token_ids, &self.affect_weights)?.max(eps).ln()),
            None => None,
        };
        let w = cfg.weights;
        let total = w.kl_scale * kld + w.topic_scale * topic.unwrap_or(0.0) + w.affect_scale * affect.unwrap_or(0.0);
        for (name, v) in [("kld", Some(kld)), ("topic", topic), ("affect", affect)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        Ok(LossBreakdown {
            kld,
            topic,
            affect,
            total,
        })
    }

    /// Gradient of the weighted total with respect to `p`, shifted so that it
    /// is exactly zero for the KL term at `p == p_unperturbed`.
    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config;
        let eps = cfg.epsilon_floor;
        let w = cfg.weights;
        let mut g = vec![0.0; p.len()];
        if w.kl_scale > 0.0 {
            for ((gi, &a), &b) in g.iter_mut().zip(p).zip(self.p_unperturbed) {
                // d/da [a ln max(a, eps)] = ln a + 1 above the floor, ln eps below;
                // the constant 1 is dropped everywhere (a simplex-invariant shift).
                let above = if a >= eps { 0.0 } else { -1.0 };
                *gi += w.kl_scale * (a.max(eps).ln() - b.max(eps).ln() + above);
            }
        }
        if let (Some(t), true) = (&cfg.topic, w.topic_scale > 0.0) {
            let m = bag_mass(p, &t.token_ids)?;
            if m >= eps {
                for &i in &t.token_ids {
                    g[i as usize] -= w.topic_scale / m;
                }
            }
        }
        if let (Some(bag), true) = (&cfg.affect, w.affect_scale > 0.0) {
            let m = weighted_mass(p, &bag.token_ids, &self.affect_weights)?;
            if m >= eps {
                for (&i, &wt) in bag.token_ids.iter().zip(&self.affect_weights) {
                    g[i as usize] -= w.affect_scale * wt / m;
                }
            }
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("objective gradient at token {i}"),
            });
        }
        Ok(g)
    }
}

impl ProbabilityLoss for Objective<'_> {
    fn evaluate(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let b = self.breakdown(p)?;
        Ok((b.total, self.gradient(p)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn affect_bag(ids: &[u32], intensities: &[f64]) -> AffectBag {
        AffectBag {
            emotion: EmotionCategory::Joy,
            token_ids: ids.to_vec(),
            intensities: intensities.to_vec(),
            source_words: ids.iter().map(|i| format!("w{i}")).collect(),
            unprojected: vec![],
        }
    }

    fn topic_bag(ids: &[u32]) -> TopicBag {
        TopicBag {
            topic_name: "t".into(),
            token_ids: ids.to_vec(),
            source_words: ids.iter().map(|i| format!("w{i}")).collect(),
        }
    }

    fn two_token_p() -> Vec<f64> {
        // p(t1) = 0.2, p(t2) = 0.1, rest spread uniformly over 7 tokens.
        let mut p = vec![0.1; 9];
        p[0] = 0.2;
        p[1] = 0.1;
        p
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_weight(0.7, 0.7, 0.05).unwrap(), 1.0);
        assert!((gaussian_weight(0.2, 0.7, 0.05).unwrap() - 0.0821).abs() < 1e-4);
        assert!(gaussian_weight(0.2, 0.7, 0.0).is_err());
        assert!(gaussian_weight(0.2, 0.7, -1.0).is_err());
    }

    #[test]
    fn topic_examples() {
        let p = vec![0.01; 100];
        assert!((topic_loss(&p, &topic_bag(&[0, 1, 2, 3, 4]), 1e-10).unwrap() - 2.9957).abs() < 1e-4);
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        assert_eq!(topic_loss(&onehot, &topic_bag(&[3]), 1e-10).unwrap(), 0.0);
        assert!((topic_loss(&onehot, &topic_bag(&[4]), 1e-10).unwrap() - 23.0259).abs() < 1e-4);
        assert!(matches!(
            topic_loss(&onehot, &topic_bag(&[]), 1e-10),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn affect_examples() {
        let mut p = vec![0.5 / 9.0; 10];
        p[0] = 0.5;
        let single = affect_loss(&p, &affect_bag(&[0], &[0.9]), 0.9, 0.05, 1e-10).unwrap();
        assert!((single - 0.6931).abs() < 1e-4);

        let two = affect_loss(&two_token_p(), &affect_bag(&[0, 1], &[0.9, 0.3]), 0.9, 0.05, 1e-10).unwrap();
        assert!((two - 1.5959).abs() < 1e-4, "{two}");

        let mut zero = vec![0.0; 4];
        zero[3] = 1.0;
        let floored = affect_loss(&zero, &affect_bag(&[0], &[0.9]), 0.9, 0.05, 1e-10).unwrap();
        assert!((floored - (-(1e-10f64).ln())).abs() < 1e-12);
        assert!(affect_loss(&zero, &affect_bag(&[], &[]), 0.9, 0.05, 1e-10).is_err());
    }

    #[test]
    fn kld_examples() {
        let p = [0.9, 0.1];
        assert_eq!(kld_loss(&p, &p, 1e-10).unwrap(), 0.0);
        assert!((kld_loss(&p, &[0.5, 0.5], 1e-10).unwrap() - 0.3681).abs() < 1e-4);
        assert!(matches!(kld_loss(&p, &[1.0], 1e-10), Err(Error::Shape(_))));
    }

    fn full_config(weights: LossWeights) -> ControlConfig {
        ControlConfig {
            affect: Some(Arc::new(affect_bag(&[0, 1], &[0.9, 0.3]))),
            topic: Some(Arc::new(topic_bag(&[2, 3]))),
            knob: 0.9,
            weights,
            ..Default::default()
        }
    }

    #[test]
    fn total_loss_weighting() {
        let p = two_token_p();
        let q = vec![1.0 / 9.0; 9];
        let zero = LossWeights {
            kl_scale: 0.0,
            topic_scale: 0.0,
            affect_scale: 0.0,
        };
        assert_eq!(total_loss(&p, &q, &full_config(zero)).unwrap().total, 0.0);

        let kl_only = ControlConfig::default();
        assert_eq!(total_loss(&p, &p, &kl_only).unwrap().total, 0.0);

        let ones = LossWeights {
            kl_scale: 1.0,
            topic_scale: 1.0,
            affect_scale: 1.0,
        };
        let b = total_loss(&p, &q, &full_config(ones)).unwrap();
        let expected = kld_loss(&p, &q, 1e-10).unwrap()
            + topic_loss(&p, &topic_bag(&[2, 3]), 1e-10).unwrap()
            + affect_loss(&p, &affect_bag(&[0, 1], &[0.9, 0.3]), 0.9, 0.05, 1e-10).unwrap();
        assert!((b.total - expected).abs() < 1e-9);
        assert!((b.affect.unwrap() - 1.5959).abs() < 1e-4);
        assert!((b.topic.unwrap() - (-(0.2f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = ControlConfig {
            knob: 1.3,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("knob"));
        c.knob = 0.5;
        c.variance = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("variance"));
        c.variance = 0.05;
        c.gd_iterations = 0;
        assert!(c.validate().unwrap_err().to_string().contains("gd_iterations"));
    }

    #[test]
    fn objective_gradient_matches_finite_differences_in_logit_space() {
        use crate::model::{softmax, softmax_backward};
        let cfg = full_config(LossWeights {
            kl_scale: 0.7,
            topic_scale: 1.0,
            affect_scale: 1.3,
        });
        let q = softmax(&[0.1, -0.3, 0.2, 0.0, 0.5, -1.0, 0.3, 0.0, 0.4]);
        let obj = Objective::new(&cfg, &q).unwrap();
        let z = [0.4, 0.1, -0.2, 0.3, 0.0, -0.5, 0.9, 0.2, -0.1];
        let f = |z: &[f64]| obj.breakdown(&softmax(z)).unwrap().total;
        let p = softmax(&z);
        let dz = softmax_backward(&p, &obj.gradient(&p).unwrap());
        for i in 0..z.len() {
            let (mut zp, mut zm) = (z, z);
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - dz[i]).abs() < 1e-7, "{i}: {fd} vs {}", dz[i]);
        }
        // KL gradient vanishes at the anchor.
        let kl_only = ControlConfig::default();
        let obj = Objective::new(&kl_only, &q).unwrap();
        assert!(obj.gradient(&q).unwrap().iter().all(|&g| g == 0.0));
    }

    /// Brute-force scan: the knob minimizing the affect loss sits at the
    /// intensity of the dominant bag token.
    #[test]
    fn knob_scan_minimum_tracks_dominant_token() {
        for (dominant, other) in [(0.3, 0.8), (0.75, 0.1), (0.5, 0.95)] {
            let bag = affect_bag(&[0, 1, 2], &[dominant, other, 1.0 - other]);
            let p = vec![0.6, 0.05, 0.05, 0.3];
            let best = (0..=100)
                .map(|k| k as f64 / 100.0)
                .map(|k| (k, affect_loss(&p, &bag, k, 0.05, 1e-10).unwrap()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert!((best - dominant).abs() <= 0.02, "{best} vs {dominant}");
        }
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn gaussian_is_bounded_and_symmetric(x in 0.0f64..=1.0, k in 0.0f64..=1.0, v in 1e-3f64..10.0, d in 0.0f64..1.0) {
            let g = gaussian_weight(x, k, v).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
            let (lo, hi) = (gaussian_weight(k - d, k, v).unwrap(), gaussian_weight(k + d, k, v).unwrap());
            prop_assert!((lo - hi).abs() <= 1e-12 * lo.max(hi));
        }

        #[test]
        fn kl_is_non_negative(p in distribution(6), q in distribution(6)) {
            prop_assert!(kld_loss(&p, &q, 1e-10).unwrap() >= 0.0);
        }

        #[test]
        fn moving_mass_onto_bag_never_increases_loss(p in distribution(6), frac in 0.0f64..1.0) {
            let topic = topic_bag(&[0, 1]);
            let bag = affect_bag(&[0, 1], &[0.9, 0.2]);
            let mut moved = p.clone();
            let amount = moved[4] * frac;
            moved[4] -= amount;
            moved[0] += amount; // the maximally weighted bag token at knob 0.9
            prop_assert!(topic_loss(&moved, &topic, 1e-10).unwrap() <= topic_loss(&p, &topic, 1e-10).unwrap() + 1e-12);
            prop_assert!(
                affect_loss(&moved, &bag, 0.9, 0.05, 1e-10).unwrap()
                    <= affect_loss(&p, &bag, 0.9, 0.05, 1e-10).unwrap() + 1e-12
            );
        }

        #[test]
        fn breakdown_total_is_weighted_sum(p in distribution(9), q in distribution(9),
                                           a in 0.0f64..3.0, b in 0.0f64..3.0, c in 0.0f64..3.0) {
            let cfg = full_config(LossWeights { kl_scale: a, topic_scale: b, affect_scale: c });
            let br = total_loss(&p, &q, &cfg).unwrap();
            let expect = a * br.kld + b * br.topic.unwrap() + c * br.affect.unwrap();
            prop_assert!((br.total - expect).abs() <= 1e-9);
        }
    }
}
