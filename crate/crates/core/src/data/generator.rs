//! Synthetic fraud-like data with known latent concepts.
//!
//! Features are i.i.d. standard normal. Each concept is a linear-threshold
//! rule over a few features; its threshold is set from the normal quantile of
//! the rule score so the population prevalence matches the configured target.
//! The fraud label is a noisy logistic function of the concepts, and the
//! teacher-only columns are the concept indicators with random flips.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Dataset;
use crate::error::{ensure, Error, Result};
use crate::nn::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRule {
    pub name: String,
    pub features: Vec<usize>,
    pub weights: Vec<f64>,
    /// Target fraction of instances where the rule fires.
    pub prevalence: f64,
}

impl ConceptRule {
    fn new(name: &str, features: [usize; 3], weights: [f64; 3], prevalence: f64) -> Self {
        ConceptRule {
            name: name.into(),
            features: features.to_vec(),
            weights: weights.to_vec(),
            prevalence,
        }
    }

    /// Score threshold giving the target prevalence under standard normal
    /// features: `||w|| * Phi^-1(1 - p)`.
    pub fn threshold(&self) -> f64 {
        let norm = self.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        norm * std_normal.inverse_cdf(1.0 - self.prevalence)
    }

    fn score(&self, row: &[f64]) -> f64 {
        self.features.iter().zip(&self.weights).map(|(&f, w)| row[f] * w).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_instances: usize,
    pub d_features: usize,
    pub concepts: Vec<ConceptRule>,
    /// One weight per concept in the fraud logit.
    pub fraud_weights: Vec<f64>,
    pub fraud_bias: f64,
    /// Scale of the logistic noise on the fraud logit; 0 makes the label a
    /// deterministic function of the concepts.
    pub noise: f64,
    /// Probability of flipping a concept indicator in the teacher columns.
    pub teacher_flip: f64,
    /// Number of teacher-only columns (one per leading concept).
    pub teacher_feature_count: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// Six fraud concepts at the global golden-set prevalences of the
    /// reference fraud use case.
    fn default() -> Self {
        let concepts = vec![
            ConceptRule::new("good_customer_history", [0, 1, 2], [1.0, 0.8, -0.6], 0.2445),
            ConceptRule::new("high_speed_ordering", [3, 4, 5], [1.0, 1.0, 0.5], 0.1133),
            ConceptRule::new("suspicious_delivery", [5, 6, 7], [0.7, 1.0, -0.8], 0.2286),
            ConceptRule::new("suspicious_device", [8, 9, 10], [1.0, -0.7, 0.9], 0.1173),
            ConceptRule::new("suspicious_email", [10, 11, 12], [0.6, 1.0, 0.8], 0.2107),
            ConceptRule::new("suspicious_items", [13, 14, 15], [1.0, 0.9, -0.5], 0.1849),
        ];
        GeneratorConfig {
            n_instances: 50_000,
            d_features: 20,
            concepts,
            fraud_weights: vec![-2.0, 1.5, 1.2, 1.5, 1.2, 0.8],
            fraud_bias: -2.0,
            noise: 1.0,
            teacher_flip: 0.1,
            teacher_feature_count: 6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_instances > 0, Config, "n_instances must be positive");
        ensure!(self.d_features > 0, Config, "d_features must be positive");
        ensure!(!self.concepts.is_empty(), Config, "need at least one concept");
        for c in &self.concepts {
            ensure!(
                c.prevalence > 0.0 && c.prevalence < 1.0,
                Config,
                "concept {}: prevalence {} must lie strictly between 0 and 1",
                c.name,
                c.prevalence
            );
            ensure!(
                !c.features.is_empty() && c.features.len() == c.weights.len(),
                Config,
                "concept {}: features and weights must be non-empty and equally long",
                c.name
            );
            ensure!(
                c.features.iter().all(|&f| f < self.d_features),
                Config,
                "concept {}: feature index out of range",
                c.name
            );
            ensure!(
                c.weights.iter().all(|w| w.is_finite()) && c.weights.iter().any(|&w| w != 0.0),
                Config,
                "concept {}: weights must be finite and not all zero",
                c.name
            );
        }
        ensure!(
            self.fraud_weights.len() == self.concepts.len(),
            Config,
            "{} fraud weights for {} concepts",
            self.fraud_weights.len(),
            self.concepts.len()
        );
        ensure!(
            self.fraud_weights.iter().all(|w| w.is_finite()) && self.fraud_bias.is_finite(),
            Config,
            "fraud weights must be finite"
        );
        ensure!(self.noise >= 0.0 && self.noise.is_finite(), Config, "noise must be >= 0");
        ensure!((0.0..=1.0).contains(&self.teacher_flip), Config, "teacher_flip outside [0, 1]");
        ensure!(
            self.teacher_feature_count <= self.concepts.len(),
            Config,
            "teacher_feature_count exceeds the number of concepts"
        );
        Ok(())
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Generates a labeled dataset: features, task labels, golden (true) concept
/// labels and noisy teacher-only columns.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_instances;
    let d = config.d_features;
    let k = config.concepts.len();

    let mut rng = rng_from_seed(derive_seed(config.seed, 0));
    let feats: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let features = Matrix::new(n, d, feats)?;

    let thresholds: Vec<f64> = config.concepts.iter().map(ConceptRule::threshold).collect();
    let mut golden = Matrix::zeros(n, k);
    for r in 0..n {
        let row = features.row(r);
        for (i, (c, t)) in config.concepts.iter().zip(&thresholds).enumerate() {
            golden.set(r, i, f64::from(u8::from(c.score(row) >= *t)));
        }
    }

    // logistic noise: P(y = 1) = sigmoid(logit / noise)
    let mut rng = rng_from_seed(derive_seed(config.seed, 1));
    let labels: Vec<f64> = (0..n)
        .map(|r| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let eps = (u / (1.0 - u)).ln();
            let logit: f64 = golden
                .row(r)
                .iter()
                .zip(&config.fraud_weights)
                .map(|(c, w)| c * w)
                .sum::<f64>()
                + config.fraud_bias;
            f64::from(u8::from(logit + config.noise * eps > 0.0))
        })
        .collect();

    let mut rng = rng_from_seed(derive_seed(config.seed, 2));
    let tcount = config.teacher_feature_count;
    let mut teacher = Matrix::zeros(n, tcount);
    for r in 0..n {
        for i in 0..tcount {
            let c = golden.get(r, i);
            let flip = rng.random_bool(config.teacher_flip);
            teacher.set(r, i, if flip { 1.0 - c } else { c });
        }
    }

    let width = n.saturating_sub(1).to_string().len().max(6);
    let ids = (0..n).map(|i| format!("{i:0width$}")).collect();
    let mut ds = Dataset::new(ids, features)?
        .with_labels(labels)?
        .with_golden(config.concept_names(), golden)?;
    if tcount > 0 {
        ds = ds.with_teacher_features(teacher)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_hits_prevalences() {
        let cfg = GeneratorConfig { n_instances: 50_000, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        for (p, c) in ds.concept_prevalences().unwrap().iter().zip(&cfg.concepts) {
            assert!((p - c.prevalence).abs() < 0.015, "{}: {p} vs {}", c.name, c.prevalence);
        }
    }

    #[test]
    fn noiseless_one_hot_link_copies_concept() {
        let mut cfg = GeneratorConfig { n_instances: 2_000, noise: 0.0, ..Default::default() };
        cfg.fraud_weights = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        cfg.fraud_bias = -0.5;
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.labels().unwrap(), ds.golden().unwrap().column(2).as_slice());
    }

    #[test]
    fn fixed_seed_regenerates_identical_bytes() {
        let cfg = GeneratorConfig { n_instances: 500, seed: 17, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap().to_csv_bytes().unwrap();
        let b = generate_synthetic(&cfg).unwrap().to_csv_bytes().unwrap();
        assert_eq!(a, b);
        let other = GeneratorConfig { seed: 18, ..cfg };
        assert_ne!(a, generate_synthetic(&other).unwrap().to_csv_bytes().unwrap());
    }

    #[test]
    fn teacher_columns_are_noisy_concepts() {
        let cfg = GeneratorConfig { n_instances: 20_000, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let t = ds.teacher_features().unwrap();
        let g = ds.golden().unwrap();
        let flips = (0..ds.len()).filter(|&r| t.get(r, 0) != g.get(r, 0)).count();
        let rate = flips as f64 / ds.len() as f64;
        assert!((rate - 0.1).abs() < 0.01, "flip rate {rate}");
    }

    #[test]
    fn infeasible_prevalence_rejected() {
        let mut cfg = GeneratorConfig::default();
        cfg.concepts[0].prevalence = 1.0;
        assert!(generate_synthetic(&cfg).is_err());
        cfg.concepts[0].prevalence = 0.0;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
