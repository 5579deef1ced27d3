//! The surrogate architecture: a concept model (shared trunk followed by one
//! head per concept) and an attention branch that reads the raw features and
//! weights the concept probabilities into a single distilled score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nn::{softmax_rowwise, Activation, ForwardTrace, LayerSpec, Matrix, Mlp, Mode};
use crate::rng::derive_seed;

pub const FORMAT_VERSION: u32 = 1;

// dropout streams per sub-network, so one branch never shifts another's masks
const TRUNK_STREAM: u64 = 0;
const ATTENTION_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

/// Compact, data-independent description of an architecture: hidden widths
/// only. Input and output sizes are filled in from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub trunk_widths: Vec<usize>,
    /// Hidden widths of each head; the final single sigmoid unit is implied.
    pub head_hidden_widths: Vec<usize>,
    /// Hidden widths of the attention branch; the final K logits are implied.
    pub attention_hidden_widths: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub batchnorm: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            trunk_widths: vec![32, 32, 16],
            head_hidden_widths: vec![16, 8],
            attention_hidden_widths: vec![32],
            dropout: 0.0,
            batchnorm: false,
        }
    }
}

impl ArchitectureSpec {
    pub fn build(&self, n_features: usize, k_concepts: usize) -> Result<ArchitectureConfig> {
        ensure!(!self.trunk_widths.is_empty(), Config, "trunk needs at least one layer");
        let hidden = |widths: &[usize], input: usize| -> Vec<LayerSpec> {
            let mut prev = input;
            widths
                .iter()
                .map(|&w| {
                    let s = LayerSpec::new(prev, w, Activation::Relu)
                        .with_dropout(self.dropout)
                        .with_batchnorm(self.batchnorm);
                    prev = w;
                    s
                })
                .collect()
        };
        let trunk = hidden(&self.trunk_widths, n_features);
        let trunk_out = *self.trunk_widths.last().unwrap();
        let mut head_template = hidden(&self.head_hidden_widths, trunk_out);
        let head_in = self.head_hidden_widths.last().copied().unwrap_or(trunk_out);
        head_template.push(LayerSpec::new(head_in, 1, Activation::Sigmoid));
        let mut attention = hidden(&self.attention_hidden_widths, n_features);
        let att_in = self.attention_hidden_widths.last().copied().unwrap_or(n_features);
        attention.push(LayerSpec::new(att_in, k_concepts, Activation::Identity));
        let cfg = ArchitectureConfig { n_features, k_concepts, trunk, head_template, attention };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Full layer-level description of a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub n_features: usize,
    pub k_concepts: usize,
    pub trunk: Vec<LayerSpec>,
    /// Replicated once per concept; ends in one sigmoid unit.
    pub head_template: Vec<LayerSpec>,
    /// Ends in `k_concepts` identity outputs (the attention logits).
    pub attention: Vec<LayerSpec>,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k_concepts >= 1, Config, "need at least one concept");
        ensure!(
            !self.trunk.is_empty() && !self.head_template.is_empty() && !self.attention.is_empty(),
            Config,
            "trunk, heads and attention each need at least one layer"
        );
        for s in self.trunk.iter().chain(&self.head_template).chain(&self.attention) {
            s.validate()?;
        }
        ensure!(
            self.trunk[0].in_dim == self.n_features,
            Config,
            "trunk expects {} inputs, data has {}",
            self.trunk[0].in_dim,
            self.n_features
        );
        ensure!(
            self.attention[0].in_dim == self.n_features,
            Config,
            "attention must consume the raw features ({}), got {}",
            self.n_features,
            self.attention[0].in_dim
        );
        let trunk_out = self.trunk.last().unwrap().out_dim;
        ensure!(
            self.head_template[0].in_dim == trunk_out,
            Config,
            "heads expect {} inputs, trunk emits {trunk_out}",
            self.head_template[0].in_dim
        );
        let head_last = self.head_template.last().unwrap();
        ensure!(
            head_last.out_dim == 1 && head_last.activation == Activation::Sigmoid,
            Config,
            "each head must end in a single sigmoid unit"
        );
        let att_last = self.attention.last().unwrap();
        ensure!(
            att_last.out_dim == self.k_concepts && att_last.activation == Activation::Identity,
            Config,
            "attention must end in {} identity logits",
            self.k_concepts
        );
        Ok(())
    }

    /// Depth limits of the hyperparameter search space: trunk 3..=5, heads
    /// 3..=7 (output unit included), attention 1..=4.
    pub fn validate_search_depths(&self) -> Result<()> {
        ensure!((3..=5).contains(&self.trunk.len()), Config, "trunk depth {}", self.trunk.len());
        ensure!(
            (3..=7).contains(&self.head_template.len()),
            Config,
            "head depth {}",
            self.head_template.len()
        );
        ensure!(
            (1..=4).contains(&self.attention.len()),
            Config,
            "attention depth {}",
            self.attention.len()
        );
        Ok(())
    }
}

/// Per-instance explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub concept_names: Vec<String>,
    /// Probability of each concept being present.
    pub concept_probs: Vec<f64>,
    /// Attention weights; sum to one.
    pub attention: Vec<f64>,
    /// `attention[i] * concept_probs[i]`.
    pub contributions: Vec<f64>,
    /// Distilled score: sum of the contributions.
    pub kd_score: f64,
}

impl Explanation {
    pub fn new(concept_names: Vec<String>, concept_probs: Vec<f64>, attention: Vec<f64>) -> Self {
        let contributions: Vec<f64> =
            concept_probs.iter().zip(&attention).map(|(p, a)| p * a).collect();
        let kd_score = contributions.iter().sum();
        Explanation { concept_names, concept_probs, attention, contributions, kd_score }
    }

    /// One JSON object; keys follow `concept_names` order.
    pub fn to_json(&self, id: Option<&str>) -> serde_json::Value {
        let section = |vals: &[f64]| {
            let map: serde_json::Map<String, serde_json::Value> = self
                .concept_names
                .iter()
                .zip(vals)
                .map(|(n, v)| (n.clone(), serde_json::Value::from(*v)))
                .collect();
            serde_json::Value::Object(map)
        };
        let mut obj = serde_json::Map::new();
        if let Some(id) = id {
            obj.insert("id".into(), id.into());
        }
        obj.insert("concepts".into(), section(&self.concept_probs));
        obj.insert("contributions".into(), section(&self.contributions));
        obj.insert("attention".into(), section(&self.attention));
        obj.insert("kd_score".into(), self.kd_score.into());
        serde_json::Value::Object(obj)
    }
}

/// Traces for the concept model.
#[derive(Debug, Clone)]
pub struct ConceptTrace {
    pub trunk: ForwardTrace,
    pub heads: Vec<ForwardTrace>,
}

/// Everything the training loop needs from one joint forward pass.
#[derive(Debug, Clone)]
pub struct SurrogateForward {
    pub concept_probs: Matrix,
    pub attention: Matrix,
    pub kd_scores: Vec<f64>,
    pub concept_trace: ConceptTrace,
    pub attention_trace: ForwardTrace,
}

/// Learnable parameters of the full surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConceptDistilRepr")]
pub struct ConceptDistil {
    config: ArchitectureConfig,
    concept_names: Vec<String>,
    trunk: Mlp,
    heads: Vec<Mlp>,
    attention: Mlp,
}

#[derive(Deserialize)]
struct ConceptDistilRepr {
    config: ArchitectureConfig,
    concept_names: Vec<String>,
    trunk: Mlp,
    heads: Vec<Mlp>,
    attention: Mlp,
}

impl TryFrom<ConceptDistilRepr> for ConceptDistil {
    type Error = Error;

    fn try_from(r: ConceptDistilRepr) -> Result<Self> {
        ConceptDistil::from_parts(r.config, r.concept_names, r.trunk, r.heads, r.attention)
    }
}

impl ConceptDistil {
    pub fn new(config: ArchitectureConfig, concept_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let trunk = Mlp::new(config.trunk.clone(), derive_seed(seed, TRUNK_STREAM))?;
        let attention = Mlp::new(config.attention.clone(), derive_seed(seed, ATTENTION_STREAM))?;
        let heads = (0..config.k_concepts)
            .map(|i| Mlp::new(config.head_template.clone(), derive_seed(seed, HEAD_STREAM + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        ConceptDistil::from_parts(config, concept_names, trunk, heads, attention)
    }

    pub fn from_parts(
        config: ArchitectureConfig,
        concept_names: Vec<String>,
        trunk: Mlp,
        heads: Vec<Mlp>,
        attention: Mlp,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(
            concept_names.len() == config.k_concepts,
            Config,
            "{} concept names for K = {}",
            concept_names.len(),
            config.k_concepts
        );
        ensure!(heads.len() == config.k_concepts, Shape, "{} heads for K = {}", heads.len(), config.k_concepts);
        ensure!(trunk.specs() == config.trunk.as_slice(), Shape, "trunk does not match its config");
        ensure!(
            attention.specs() == config.attention.as_slice(),
            Shape,
            "attention does not match its config"
        );
        for (i, h) in heads.iter().enumerate() {
            ensure!(h.specs() == config.head_template.as_slice(), Shape, "head {i} does not match its config");
        }
        Ok(ConceptDistil { config, concept_names, trunk, heads, attention })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn k(&self) -> usize {
        self.config.k_concepts
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn attention(&self) -> &Mlp {
        &self.attention
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn heads_mut(&mut self) -> &mut [Mlp] {
        &mut self.heads
    }

    pub fn attention_mut(&mut self) -> &mut Mlp {
        &mut self.attention
    }

    /// Concept probabilities, `n x K`; column `i` is `head_i(trunk(x))`.
    pub fn concept_forward(&self, x: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, ConceptTrace)> {
        ensure!(
            x.cols() == self.config.n_features,
            Shape,
            "input has {} features, model expects {}",
            x.cols(),
            self.config.n_features
        );
        let (hidden, trunk_trace) = self.trunk.forward(x, mode, derive_seed(seed, TRUNK_STREAM))?;
        let n = x.rows();
        let k = self.k();
        let mut probs = Matrix::zeros(n, k);
        let mut head_traces = Vec::with_capacity(k);
        for (i, head) in self.heads.iter().enumerate() {
            let (out, t) = head.forward(&hidden, mode, derive_seed(seed, HEAD_STREAM + i as u64))?;
            for r in 0..n {
                probs.set(r, i, out.get(r, 0));
            }
            head_traces.push(t);
        }
        Ok((probs, ConceptTrace { trunk: trunk_trace, heads: head_traces }))
    }

    /// Attention weights `softmax(h(x; theta_A))`, `n x K`.
    pub fn attention_forward(&self, x: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, ForwardTrace)> {
        ensure!(
            x.cols() == self.config.n_features,
            Shape,
            "input has {} features, model expects {}",
            x.cols(),
            self.config.n_features
        );
        let (logits, trace) = self.attention.forward(x, mode, derive_seed(seed, ATTENTION_STREAM))?;
        Ok((softmax_rowwise(&logits)?, trace))
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, seed: u64) -> Result<SurrogateForward> {
        let (concept_probs, concept_trace) = self.concept_forward(x, mode, seed)?;
        let (attention, attention_trace) = self.attention_forward(x, mode, seed)?;
        let kd_scores = combine(&concept_probs, &attention);
        Ok(SurrogateForward { concept_probs, attention, kd_scores, concept_trace, attention_trace })
    }

    pub fn explain_forward(&self, x: &Matrix, mode: Mode, seed: u64) -> Result<(Vec<Explanation>, SurrogateForward)> {
        let fwd = self.forward(x, mode, seed)?;
        let explanations = (0..x.rows())
            .map(|r| {
                Explanation::new(
                    self.concept_names.clone(),
                    fwd.concept_probs.row(r).to_vec(),
                    fwd.attention.row(r).to_vec(),
                )
            })
            .collect();
        Ok((explanations, fwd))
    }

    /// Eval-mode explanations.
    pub fn explain(&self, x: &Matrix) -> Result<Vec<Explanation>> {
        Ok(self.explain_forward(x, Mode::Eval, 0)?.0)
    }

    pub fn predict_concepts(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.concept_forward(x, Mode::Eval, 0)?.0)
    }

    pub fn predict_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval, 0)?.kd_scores)
    }

    /// Digest of the concept model (trunk and heads) only.
    pub fn concept_digest(&self) -> String {
        let mut h = Sha256::new();
        self.trunk.hash_into(&mut h);
        for head in &self.heads {
            head.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn attention_digest(&self) -> String {
        self.attention.digest()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.trunk.hash_into(&mut h);
        for head in &self.heads {
            head.hash_into(&mut h);
        }
        self.attention.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// `kd[r] = sum_i probs[r, i] * alpha[r, i]`.
pub fn combine(probs: &Matrix, alpha: &Matrix) -> Vec<f64> {
    probs
        .iter_rows()
        .zip(alpha.iter_rows())
        .map(|(p, a)| p.iter().zip(a).map(|(x, y)| x * y).sum())
        .collect()
}

/// A trained surrogate of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surrogate {
    /// Concept model plus attention-based distillation.
    ConceptDistil(ConceptDistil),
    /// Plain network emitting one score (distillation baseline, FFNN black box).
    Network { network: Mlp },
}

impl Surrogate {
    pub fn n_features(&self) -> usize {
        match self {
            Surrogate::ConceptDistil(m) => m.config().n_features,
            Surrogate::Network { network } => network.in_dim(),
        }
    }

    pub fn predict_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Surrogate::ConceptDistil(m) => m.predict_scores(x),
            Surrogate::Network { network } => Ok(network.predict(x)?.into_vec()),
        }
    }

    pub fn as_concept_distil(&self) -> Option<&ConceptDistil> {
        match self {
            Surrogate::ConceptDistil(m) => Some(m),
            Surrogate::Network { .. } => None,
        }
    }

    pub fn digest(&self) -> String {
        match self {
            Surrogate::ConceptDistil(m) => m.digest(),
            Surrogate::Network { network } => network.digest(),
        }
    }
}

/// Versioned on-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    /// Free-form role tag, e.g. the training variant.
    #[serde(default)]
    pub label: String,
    pub model: Surrogate,
}

impl ModelFile {
    pub fn new(label: impl Into<String>, model: Surrogate) -> Self {
        ModelFile { format_version: FORMAT_VERSION, label: label.into(), model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        ensure!(
            f.format_version == FORMAT_VERSION,
            Data,
            "unsupported model format version {}",
            f.format_version
        );
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read model {}: {e}", path.display())))?;
        ModelFile::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DenseLayer, Matrix};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn rand_x(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn small(d: usize, k: usize, seed: u64) -> ConceptDistil {
        let spec = ArchitectureSpec {
            trunk_widths: vec![6, 5],
            head_hidden_widths: vec![4],
            attention_hidden_widths: vec![5],
            dropout: 0.0,
            batchnorm: false,
        };
        ConceptDistil::new(spec.build(d, k).unwrap(), names(k), seed).unwrap()
    }

    fn zero_mlp(m: &mut Mlp) {
        for s in m.param_slices_mut() {
            s.fill(0.0);
        }
    }

    #[test]
    fn zero_heads_give_half() {
        let mut m = small(4, 3, 1);
        for h in m.heads_mut() {
            zero_mlp(h);
        }
        let probs = m.predict_concepts(&rand_x(5, 4, 2)).unwrap();
        assert!(probs.as_slice().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn single_concept_is_plain_stack() {
        let m = small(4, 1, 3);
        let mut specs = m.trunk().specs().to_vec();
        specs.extend_from_slice(m.heads()[0].specs());
        let layers: Vec<DenseLayer> =
            m.trunk().layers().iter().chain(m.heads()[0].layers()).cloned().collect();
        let stacked = Mlp::from_parts(specs, layers).unwrap();
        let x = rand_x(9, 4, 4);
        let a = m.predict_concepts(&x).unwrap();
        let b = stacked.predict(&x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_are_independent() {
        let m = small(4, 3, 5);
        let x = rand_x(6, 4, 6);
        let before = m.predict_concepts(&x).unwrap();
        let mut perturbed = m.clone();
        for s in perturbed.heads_mut()[2].param_slices_mut() {
            s.iter_mut().for_each(|v| *v += 0.3);
        }
        let after = perturbed.predict_concepts(&x).unwrap();
        assert_eq!(before.column(0), after.column(0));
        assert_eq!(before.column(1), after.column(1));
        assert_ne!(before.column(2), after.column(2));
    }

    #[test]
    fn zero_attention_is_uniform() {
        let mut m = small(4, 4, 7);
        zero_mlp(m.attention_mut());
        let (alpha, _) = m.attention_forward(&rand_x(3, 4, 8), Mode::Eval, 0).unwrap();
        assert!(alpha.as_slice().iter().all(|&a| a == 0.25));
    }

    #[test]
    fn saturated_attention_selects_slot() {
        let spec = ArchitectureSpec {
            trunk_widths: vec![3],
            head_hidden_widths: vec![],
            attention_hidden_widths: vec![],
            dropout: 0.0,
            batchnorm: false,
        };
        let mut m = ConceptDistil::new(spec.build(2, 3).unwrap(), names(3), 0).unwrap();
        let att = m.attention_mut();
        zero_mlp(att);
        att.layers_mut()[0].weights.set(2, 0, 1000.0);
        let x = Matrix::from_rows(&[vec![0.5, -3.0], vec![2.0, 1.0]]).unwrap();
        let (alpha, _) = m.attention_forward(&x, Mode::Eval, 0).unwrap();
        for r in 0..2 {
            assert!(alpha.get(r, 2) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn attention_is_softmax_of_branch() {
        let m = small(5, 4, 9);
        let x = rand_x(7, 5, 10);
        let (alpha, _) = m.attention_forward(&x, Mode::Eval, 0).unwrap();
        let logits = m.attention().predict(&x).unwrap();
        assert_eq!(alpha, softmax_rowwise(&logits).unwrap());
    }

    #[test]
    fn explanation_arithmetic() {
        let e = Explanation::new(names(2), vec![0.2, 0.8], vec![0.5, 0.5]);
        assert!((e.kd_score - 0.5).abs() < 1e-15);
        assert!((e.contributions[0] - 0.1).abs() < 1e-15);
        assert!((e.contributions[1] - 0.4).abs() < 1e-15);
        let e = Explanation::new(names(3), vec![0.2, 0.7, 0.4], vec![0.0, 1.0, 0.0]);
        assert_eq!(e.kd_score, 0.7);
    }

    #[test]
    fn kd_score_inside_concept_range() {
        let m = small(6, 6, 11);
        let (ex, _) = m.explain_forward(&rand_x(32, 6, 12), Mode::Eval, 0).unwrap();
        for e in ex {
            let lo = e.concept_probs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.concept_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(e.kd_score >= lo - 1e-12 && e.kd_score <= hi + 1e-12);
            assert!((e.kd_score - e.contributions.iter().sum::<f64>()).abs() < 1e-9);
            assert!((e.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = small(4, 2, 0);
        assert!(m.concept_forward(&rand_x(2, 5, 0), Mode::Eval, 0).is_err());
        let bad = ArchitectureSpec::default().build(4, 2).unwrap();
        assert!(ConceptDistil::new(bad, names(3), 0).is_err());
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let spec = ArchitectureSpec { batchnorm: true, dropout: 0.2, ..ArchitectureSpec::default() };
        let m = ConceptDistil::new(spec.build(5, 3).unwrap(), names(3), 13).unwrap();
        let file = ModelFile::new("default", Surrogate::ConceptDistil(m.clone()));
        let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
        let x = rand_x(20, 5, 14);
        let a = m.forward(&x, Mode::Eval, 0).unwrap();
        let b = back.model.as_concept_distil().unwrap().forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(a.kd_scores, b.kd_scores);
        assert_eq!(a.concept_probs, b.concept_probs);
    }

    #[test]
    fn json_line_keeps_concept_order() {
        let e = Explanation::new(vec!["zeta".into(), "alpha".into()], vec![0.1, 0.9], vec![0.5, 0.5]);
        let line = serde_json::to_string(&e.to_json(Some("r1"))).unwrap();
        assert!(line.starts_with(r#"{"id":"r1","concepts":{"zeta":0.1,"alpha":0.9}"#));
    }
}
