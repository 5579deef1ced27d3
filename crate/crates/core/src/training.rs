//! Multi-task training.
//!
//! The surrogate minimizes `lambda * L_KD + (1 - lambda) * L_E`, where `L_KD`
//! is the cross-entropy between the distilled score and the black-box score
//! and `L_E` is the mean per-concept cross-entropy. The variants differ only
//! in where gradients are allowed to flow:
//!
//! - `Default`: everything is trained jointly.
//! - `NoGradient`: the distillation term does not reach the concept model.
//! - `TwoStaged`: the concept model is trained alone, frozen, and the
//!   attention branch is then fitted on its (Eval-mode) predictions.
//! - `BaselineConceptOnly` / `BaselineDistillOnly`: single-task references.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::metrics::{fidelity, mean_concept_auc, EvalReport};
use crate::model::{ArchitectureSpec, ConceptDistil, Surrogate, SurrogateForward};
use crate::nn::{
    bce_loss, softmax_backward, Activation, Gradients, LayerSpec, Matrix, Mlp, Mode, Optimizer,
    OptimizerConfig,
};
use crate::rng::{derive_path, derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "default")]
    Default,
    #[serde(rename = "no-gradient")]
    NoGradient,
    #[serde(rename = "2-staged")]
    TwoStaged,
    #[serde(rename = "baseline-distill")]
    BaselineDistillOnly,
    #[serde(rename = "baseline-concept")]
    BaselineConceptOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BaselineDistillOnly,
        Variant::BaselineConceptOnly,
        Variant::Default,
        Variant::NoGradient,
        Variant::TwoStaged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoGradient => "no-gradient",
            Variant::TwoStaged => "2-staged",
            Variant::BaselineDistillOnly => "baseline-distill",
            Variant::BaselineConceptOnly => "baseline-concept",
        }
    }

    /// Whether the trained model's distilled score is meaningful.
    pub fn has_distillation(self) -> bool {
        self != Variant::BaselineConceptOnly
    }

    /// Whether the trained model predicts concepts.
    pub fn has_concepts(self) -> bool {
        self != Variant::BaselineDistillOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of default, no-gradient, 2-staged, baseline-distill, baseline-concept"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    CombinedLoss,
    Fidelity,
    MeanConceptBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub variant: Variant,
    pub optimizer: OptimizerConfig,
    pub validation_metric: ValidationMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 0.003,
            epochs: 100,
            batch_size: 256,
            early_stop_patience: 10,
            seed: 0,
            variant: Variant::Default,
            optimizer: OptimizerConfig::default(),
            validation_metric: ValidationMetric::CombinedLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.lambda), Config, "lambda {} outside [0, 1]", self.lambda);
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning rate must be positive"
        );
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch size must be >= 1");
        self.optimizer.validate()
    }

    /// Loss weight actually applied to the distillation term.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::BaselineConceptOnly => 0.0,
            Variant::BaselineDistillOnly => 1.0,
            _ => self.lambda,
        }
    }
}

/// Loss value and its parts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kd_component: f64,
    pub concept_component: f64,
    pub per_concept_bce: Vec<f64>,
}

/// Mean per-concept cross-entropy. Each concept's BCE is averaged over rows
/// and the K values are averaged, which equals the mean over all entries.
///
/// Returns the loss, the per-concept values and the gradient w.r.t. `pred`.
pub fn concept_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Vec<f64>, Matrix)> {
    let (loss, grad) = bce_loss(pred, target)?;
    let per = (0..pred.cols())
        .map(|c| {
            let p = Matrix::from_raw(pred.rows(), 1, pred.column(c));
            let t = Matrix::from_raw(pred.rows(), 1, target.column(c));
            bce_loss(&p, &t).map(|(l, _)| l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, per, grad))
}

/// Gradients of the total loss w.r.t. the surrogate's outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    /// w.r.t. the concept probabilities, `n x K`.
    pub concepts: Matrix,
    /// w.r.t. the attention logits, `n x K`; absent without a KD term.
    pub logits: Option<Matrix>,
}

/// Combined loss on one batch of outputs.
///
/// `concept_target` may be omitted only when `lambda == 1` and `kd_target`
/// only when `lambda == 0`. With `stop_gradient` the distillation term does
/// not contribute to the concept gradient.
pub fn total_loss(
    fwd: &SurrogateForward,
    concept_target: Option<&Matrix>,
    kd_target: Option<&[f64]>,
    lambda: f64,
    stop_gradient: bool,
) -> Result<(LossBreakdown, OutputGrads)> {
    ensure!((0.0..=1.0).contains(&lambda), Config, "lambda {lambda} outside [0, 1]");
    let n = fwd.concept_probs.rows();
    let k = fwd.concept_probs.cols();
    let mut out = LossBreakdown::default();
    let mut d_concepts = Matrix::zeros(n, k);

    match concept_target {
        Some(t) => {
            let (l, per, g) = concept_loss(&fwd.concept_probs, t)?;
            out.concept_component = l;
            out.per_concept_bce = per;
            let w = 1.0 - lambda;
            for (d, gi) in d_concepts.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d = w * gi;
            }
        }
        None => ensure!(lambda == 1.0, Data, "concept targets required when lambda < 1"),
    }

    let logits = match kd_target {
        Some(t) => {
            ensure!(t.len() == n, Data, "{} black-box scores for a batch of {n}", t.len());
            let pred = Matrix::from_raw(n, 1, fwd.kd_scores.clone());
            let (l, g) = bce_loss(&pred, &Matrix::from_raw(n, 1, t.to_vec()))?;
            out.kd_component = l;
            let mut d_alpha = Matrix::zeros(n, k);
            for r in 0..n {
                let gr = lambda * g.as_slice()[r];
                let probs = fwd.concept_probs.row(r);
                for (da, p) in d_alpha.row_mut(r).iter_mut().zip(probs) {
                    *da = gr * p;
                }
                if !stop_gradient {
                    let alpha = fwd.attention.row(r);
                    for (dc, a) in d_concepts.row_mut(r).iter_mut().zip(alpha) {
                        *dc += gr * a;
                    }
                }
            }
            Some(softmax_backward(&fwd.attention, &d_alpha))
        }
        None => {
            ensure!(lambda == 0.0, Data, "black-box scores required when lambda > 0");
            None
        }
    };
    out.total = lambda * out.kd_component + (1.0 - lambda) * out.concept_component;
    if !out.total.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((out, OutputGrads { concepts: d_concepts, logits }))
}

/// Parameter gradients for each sub-network; `None` where not requested.
#[derive(Debug, Clone)]
pub struct SurrogateGrads {
    pub trunk: Option<Gradients>,
    pub heads: Option<Vec<Gradients>>,
    pub attention: Option<Gradients>,
}

/// Backpropagates output gradients through the surrogate.
pub fn backward(
    model: &ConceptDistil,
    fwd: &SurrogateForward,
    grads: &OutputGrads,
    concepts: bool,
    attention: bool,
) -> Result<SurrogateGrads> {
    let (trunk, heads) = if concepts {
        let n = grads.concepts.rows();
        let mut hidden_grad: Option<Matrix> = None;
        let mut head_grads = Vec::with_capacity(model.k());
        for (i, (head, trace)) in model.heads().iter().zip(&fwd.concept_trace.heads).enumerate() {
            let up = Matrix::from_raw(n, 1, grads.concepts.column(i));
            let (g, dx) = head.backward(trace, &up)?;
            head_grads.push(g);
            match &mut hidden_grad {
                None => hidden_grad = Some(dx),
                Some(acc) => {
                    for (a, b) in acc.as_mut_slice().iter_mut().zip(dx.as_slice()) {
                        *a += b;
                    }
                }
            }
        }
        let hidden_grad = hidden_grad.expect("at least one head");
        let (g, _) = model.trunk().backward(&fwd.concept_trace.trunk, &hidden_grad)?;
        (Some(g), Some(head_grads))
    } else {
        (None, None)
    };
    let attention = match (attention, &grads.logits) {
        (true, Some(d)) => Some(model.attention().backward(&fwd.attention_trace, d)?.0),
        (true, None) => Some(Gradients::zeros_like(model.attention())),
        _ => None,
    };
    Ok(SurrogateGrads { trunk, heads, attention })
}

/// Loss and full parameter gradients for one batch.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    model: &ConceptDistil,
    x: &Matrix,
    concept_target: &Matrix,
    kd_target: &[f64],
    lambda: f64,
    stop_gradient: bool,
    mode: Mode,
    seed: u64,
) -> Result<(LossBreakdown, SurrogateGrads)> {
    let fwd = model.forward(x, mode, seed)?;
    let (loss, og) = total_loss(&fwd, Some(concept_target), Some(kd_target), lambda, stop_gradient)?;
    let grads = backward(model, &fwd, &og, true, true)?;
    Ok((loss, grads))
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1 for single-stage runs; 1 or 2 for the two-staged variant.
    pub stage: u8,
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub valid_fidelity: Option<f64>,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, per stage.
    pub best_epochs: Vec<usize>,
    /// Concept-model digest after each epoch (for trajectory comparisons).
    #[serde(default)]
    pub concept_digests: Vec<String>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stage,epoch,train_total,train_kd,train_concept,valid_total,valid_kd,valid_concept,valid_fidelity,valid_metric\n",
        );
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?}\n",
                r.stage,
                r.epoch,
                r.train.total,
                r.train.kd_component,
                r.train.concept_component,
                r.valid.total,
                r.valid.kd_component,
                r.valid.concept_component,
                r.valid_fidelity.map(|f| format!("{f:?}")).unwrap_or_default(),
                r.valid_metric
            ));
        }
        s
    }

    /// SHA-256 of the CSV export.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Which parts a training stage updates and how.
#[derive(Debug, Clone, Copy)]
struct Plan {
    stage: u8,
    lambda: f64,
    train_concepts: bool,
    train_attention: bool,
    /// Run the attention branch and the distillation term at all.
    use_attention: bool,
    stop_gradient: bool,
    /// Frozen concept model evaluated in Eval mode.
    concepts_eval: bool,
}

impl Plan {
    fn needs_concept_targets(&self) -> bool {
        self.lambda < 1.0
    }

    fn needs_kd_targets(&self) -> bool {
        self.use_attention
    }
}

struct Optimizers {
    trunk: Optimizer,
    heads: Vec<Optimizer>,
    attention: Optimizer,
}

impl Optimizers {
    fn new(cfg: &TrainConfig, k: usize) -> Result<Self> {
        let o = || Optimizer::new(cfg.optimizer, cfg.learning_rate);
        Ok(Optimizers { trunk: o()?, heads: (0..k).map(|_| o()).collect::<Result<_>>()?, attention: o()? })
    }
}

fn metric_value(metric: ValidationMetric, loss: &LossBreakdown, fid: Option<f64>) -> Result<f64> {
    let v = match metric {
        ValidationMetric::CombinedLoss => loss.total,
        ValidationMetric::MeanConceptBce => loss.concept_component,
        ValidationMetric::Fidelity => {
            -fid.ok_or_else(|| Error::Data("fidelity metric needs black-box scores".into()))?
        }
    };
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite validation metric".into()));
    }
    Ok(v)
}

fn validate_targets(ds: &Dataset, plan: &Plan, what: &str) -> Result<()> {
    if plan.needs_concept_targets() {
        ds.concept_targets()
            .map_err(|e| Error::Data(format!("{what}: {e}")))?;
    }
    if plan.needs_kd_targets() {
        ds.require_bb_scores().map_err(|e| Error::Data(format!("{what}: {e}")))?;
    }
    Ok(())
}

fn check_schema(model: &ConceptDistil, ds: &Dataset, what: &str) -> Result<()> {
    ensure!(
        ds.n_features() == model.config().n_features,
        Shape,
        "{what} has {} features, model expects {}",
        ds.n_features(),
        model.config().n_features
    );
    ensure!(!ds.is_empty(), Data, "{what} is empty");
    if ds.k() > 0 {
        ensure!(
            ds.k() == model.k(),
            Data,
            "{what} has {} concepts, model has {}",
            ds.k(),
            model.k()
        );
    }
    Ok(())
}

fn eval_loss(model: &ConceptDistil, ds: &Dataset, plan: &Plan) -> Result<(LossBreakdown, Option<f64>)> {
    let x = ds.features();
    let (probs, trace) = model.concept_forward(x, Mode::Eval, 0)?;
    let (attention, att_trace) = if plan.use_attention {
        model.attention_forward(x, Mode::Eval, 0)?
    } else {
        (Matrix::zeros(0, 0), trace.trunk.clone())
    };
    let kd_scores = if plan.use_attention { crate::model::combine(&probs, &attention) } else { Vec::new() };
    let fwd = SurrogateForward {
        concept_probs: probs,
        attention,
        kd_scores,
        concept_trace: trace,
        attention_trace: att_trace,
    };
    let ct = if plan.needs_concept_targets() { Some(ds.concept_targets()?) } else { None };
    let kt = if plan.use_attention { Some(ds.require_bb_scores()?) } else { None };
    let (loss, _) = total_loss(&fwd, ct, kt, plan.lambda, true)?;
    let fid = match kt {
        Some(t) => Some(fidelity(&fwd.kd_scores, t)?),
        None => None,
    };
    Ok((loss, fid))
}

fn accumulate(acc: &mut LossBreakdown, batch: &LossBreakdown, w: f64) {
    acc.total += w * batch.total;
    acc.kd_component += w * batch.kd_component;
    acc.concept_component += w * batch.concept_component;
    if acc.per_concept_bce.len() < batch.per_concept_bce.len() {
        acc.per_concept_bce.resize(batch.per_concept_bce.len(), 0.0);
    }
    for (a, b) in acc.per_concept_bce.iter_mut().zip(&batch.per_concept_bce) {
        *a += w * b;
    }
}

/// Runs one stage of mini-batch training with early stopping; leaves the
/// best-epoch parameters in `model`.
fn run_stage(
    model: &mut ConceptDistil,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    plan: Plan,
    metric: ValidationMetric,
    history: &mut History,
) -> Result<()> {
    validate_targets(train, &plan, "training set")?;
    validate_targets(valid, &plan, "validation set")?;
    let n = train.len();
    let mut opt = Optimizers::new(cfg, model.k())?;
    let mut best: Option<(f64, usize, ConceptDistil)> = None;
    let mut since_best = 0;
    let concept_mode = if plan.concepts_eval { Mode::Eval } else { Mode::Train };

    for epoch in 0..cfg.epochs {
        let stage_seed = derive_path(cfg.seed, &[u64::from(plan.stage), epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(stage_seed));
        let mut epoch_loss = LossBreakdown::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = derive_seed(stage_seed, b as u64 + 1);
            let x = train.features().select_rows(idx);
            let ct = if plan.needs_concept_targets() {
                Some(train.concept_targets()?.select_rows(idx))
            } else {
                None
            };
            let kt: Option<Vec<f64>> = if plan.needs_kd_targets() {
                let s = train.require_bb_scores()?;
                Some(idx.iter().map(|&i| s[i]).collect())
            } else {
                None
            };

            let (probs, concept_trace) = model.concept_forward(&x, concept_mode, step_seed)?;
            let (attention, attention_trace) = if plan.use_attention {
                model.attention_forward(&x, Mode::Train, step_seed)?
            } else {
                (Matrix::zeros(0, 0), concept_trace.trunk.clone())
            };
            let kd_scores =
                if plan.use_attention { crate::model::combine(&probs, &attention) } else { Vec::new() };
            let fwd = SurrogateForward { concept_probs: probs, attention, kd_scores, concept_trace, attention_trace };
            let (loss, og) = total_loss(&fwd, ct.as_ref(), kt.as_deref(), plan.lambda, plan.stop_gradient)
                .map_err(|e| match e {
                    Error::Numeric(m) | Error::NonFinite(m) => {
                        Error::Numeric(format!("{m} at stage {} epoch {epoch} batch {b}", plan.stage))
                    }
                    other => other,
                })?;
            accumulate(&mut epoch_loss, &loss, idx.len() as f64 / n as f64);

            let grads = backward(model, &fwd, &og, plan.train_concepts, plan.train_attention && plan.use_attention)?;
            if let (Some(tg), Some(hg)) = (&grads.trunk, &grads.heads) {
                opt.trunk.step(model.trunk_mut(), tg)?;
                model.trunk_mut().commit_batch_stats(&fwd.concept_trace.trunk);
                for (i, g) in hg.iter().enumerate() {
                    opt.heads[i].step(&mut model.heads_mut()[i], g)?;
                    model.heads_mut()[i].commit_batch_stats(&fwd.concept_trace.heads[i]);
                }
            }
            if let Some(ag) = &grads.attention {
                opt.attention.step(model.attention_mut(), ag)?;
                model.attention_mut().commit_batch_stats(&fwd.attention_trace);
            }
        }

        let (vloss, vfid) = eval_loss(model, valid, &plan)?;
        let m = metric_value(metric, &vloss, vfid)?;
        history.records.push(EpochRecord {
            stage: plan.stage,
            epoch,
            train: epoch_loss,
            valid: vloss,
            valid_fidelity: vfid,
            valid_metric: m,
        });
        history.concept_digests.push(model.concept_digest());
        match &best {
            Some((b, _, _)) if m >= *b => {
                since_best += 1;
                if since_best >= cfg.early_stop_patience.max(1) {
                    break;
                }
            }
            _ => {
                best = Some((m, epoch, model.clone()));
                since_best = 0;
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        *model = params;
        history.best_epochs.push(epoch);
    }
    Ok(())
}

/// Trains a concept-distillation surrogate under `cfg.variant`.
///
/// `BaselineDistillOnly` has no concept model; use
/// [`train_distill_baseline`] for it.
pub fn train(
    mut model: ConceptDistil,
    train_set: &Dataset,
    valid_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ConceptDistil, History)> {
    cfg.validate()?;
    check_schema(&model, train_set, "training set")?;
    check_schema(&model, valid_set, "validation set")?;
    let mut history = History::default();
    let concept_only = Plan {
        stage: 1,
        lambda: 0.0,
        train_concepts: true,
        train_attention: false,
        use_attention: false,
        stop_gradient: true,
        concepts_eval: false,
    };
    match cfg.variant {
        Variant::Default => {
            let plan = Plan {
                stage: 1,
                lambda: cfg.lambda,
                train_concepts: true,
                train_attention: true,
                use_attention: true,
                stop_gradient: false,
                concepts_eval: false,
            };
            run_stage(&mut model, train_set, valid_set, cfg, plan, cfg.validation_metric, &mut history)?;
        }
        Variant::NoGradient => {
            let plan = Plan {
                stage: 1,
                lambda: cfg.lambda,
                train_concepts: cfg.lambda < 1.0,
                train_attention: cfg.lambda > 0.0,
                use_attention: true,
                stop_gradient: true,
                concepts_eval: false,
            };
            run_stage(&mut model, train_set, valid_set, cfg, plan, cfg.validation_metric, &mut history)?;
        }
        Variant::BaselineConceptOnly => {
            run_stage(&mut model, train_set, valid_set, cfg, concept_only, concept_metric(cfg), &mut history)?;
        }
        Variant::TwoStaged => {
            run_stage(&mut model, train_set, valid_set, cfg, concept_only, concept_metric(cfg), &mut history)?;
            let stage2 = Plan {
                stage: 2,
                lambda: 1.0,
                train_concepts: false,
                train_attention: true,
                use_attention: true,
                stop_gradient: true,
                concepts_eval: true,
            };
            run_stage(&mut model, train_set, valid_set, cfg, stage2, distill_metric(cfg), &mut history)?;
        }
        Variant::BaselineDistillOnly => {
            return Err(Error::Config(
                "the distillation baseline has no concept model; use train_distill_baseline".into(),
            ))
        }
    }
    Ok((model, history))
}

/// Model-selection metric for a concept-only stage.
fn concept_metric(cfg: &TrainConfig) -> ValidationMetric {
    match cfg.validation_metric {
        ValidationMetric::Fidelity => ValidationMetric::MeanConceptBce,
        m => m,
    }
}

/// Model-selection metric for a distillation-only stage.
fn distill_metric(cfg: &TrainConfig) -> ValidationMetric {
    match cfg.validation_metric {
        ValidationMetric::MeanConceptBce => ValidationMetric::CombinedLoss,
        m => m,
    }
}

/// Plain network mimicking the black-box score: the trunk widths followed by
/// the head hidden widths and one sigmoid output.
pub fn distill_baseline_network(spec: &ArchitectureSpec, n_features: usize, seed: u64) -> Result<Mlp> {
    let mut widths = spec.trunk_widths.clone();
    widths.extend(&spec.head_hidden_widths);
    plain_network(n_features, &widths, spec.dropout, spec.batchnorm, seed)
}

/// ReLU hidden layers then a single sigmoid unit.
pub fn plain_network(n_features: usize, hidden: &[usize], dropout: f64, batchnorm: bool, seed: u64) -> Result<Mlp> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = n_features;
    for &w in hidden {
        specs.push(LayerSpec::new(prev, w, Activation::Relu).with_dropout(dropout).with_batchnorm(batchnorm));
        prev = w;
    }
    specs.push(LayerSpec::new(prev, 1, Activation::Sigmoid));
    Mlp::new(specs, seed)
}

/// BCE training of a single-output network against soft targets in [0, 1],
/// with the same batching, seeding and early stopping as [`train`].
pub fn fit_network(
    mut net: Mlp,
    x: &Matrix,
    targets: &[f64],
    valid_x: &Matrix,
    valid_targets: &[f64],
    cfg: &TrainConfig,
) -> Result<(Mlp, History)> {
    cfg.validate()?;
    ensure!(net.out_dim() == 1, Config, "network must have a single output");
    ensure!(x.rows() == targets.len() && x.rows() > 0, Data, "training targets do not match rows");
    ensure!(valid_x.rows() == valid_targets.len() && valid_x.rows() > 0, Data, "validation targets do not match rows");
    ensure!(x.cols() == net.in_dim() && valid_x.cols() == net.in_dim(), Shape, "feature count mismatch");
    let n = x.rows();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut history = History::default();
    let mut best: Option<(f64, usize, Mlp)> = None;
    let mut since_best = 0;
    let vt = Matrix::from_raw(valid_targets.len(), 1, valid_targets.to_vec());
    for epoch in 0..cfg.epochs {
        let stage_seed = derive_path(cfg.seed, &[1, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(stage_seed));
        let mut train_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(idx);
            let tb = Matrix::from_raw(idx.len(), 1, idx.iter().map(|&i| targets[i]).collect());
            let (out, trace) = net.forward(&xb, Mode::Train, derive_seed(stage_seed, b as u64 + 1))?;
            let (l, g) = bce_loss(&out, &tb)
                .map_err(|e| Error::Numeric(format!("{e} at epoch {epoch} batch {b}")))?;
            train_loss += l * idx.len() as f64 / n as f64;
            let (grads, _) = net.backward(&trace, &g)?;
            opt.step(&mut net, &grads)?;
            net.commit_batch_stats(&trace);
        }
        let vpred = net.predict(valid_x)?;
        let (vl, _) = bce_loss(&vpred, &vt)?;
        let vfid = fidelity(vpred.as_slice(), valid_targets)?;
        let valid = LossBreakdown { total: vl, kd_component: vl, ..Default::default() };
        let m = metric_value(distill_metric(cfg), &valid, Some(vfid))?;
        history.records.push(EpochRecord {
            stage: 1,
            epoch,
            train: LossBreakdown { total: train_loss, kd_component: train_loss, ..Default::default() },
            valid,
            valid_fidelity: Some(vfid),
            valid_metric: m,
        });
        match &best {
            Some((b, _, _)) if m >= *b => {
                since_best += 1;
                if since_best >= cfg.early_stop_patience.max(1) {
                    break;
                }
            }
            _ => {
                best = Some((m, epoch, net.clone()));
                since_best = 0;
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        net = params;
        history.best_epochs.push(epoch);
    }
    Ok((net, history))
}

/// Distillation-only baseline trained on the black-box scores.
pub fn train_distill_baseline(net: Mlp, train_set: &Dataset, valid_set: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, History)> {
    let t = train_set.require_bb_scores().map_err(|e| Error::Data(format!("training set: {e}")))?;
    let v = valid_set.require_bb_scores().map_err(|e| Error::Data(format!("validation set: {e}")))?;
    fit_network(net, train_set.features(), t, valid_set.features(), v, cfg)
}

/// A freshly trained surrogate and its history.
#[derive(Debug, Clone)]
pub struct TrainedSurrogate {
    pub variant: Variant,
    pub model: Surrogate,
    pub history: History,
}

/// Initializes from `cfg.seed` and trains whichever model `cfg.variant` calls for.
pub fn train_surrogate(
    spec: &ArchitectureSpec,
    concept_names: &[String],
    train_set: &Dataset,
    valid_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedSurrogate> {
    let d = train_set.n_features();
    let init_seed = derive_seed(cfg.seed, 0x1A17);
    let (model, history) = match cfg.variant {
        Variant::BaselineDistillOnly => {
            let net = distill_baseline_network(spec, d, init_seed)?;
            let (net, h) = train_distill_baseline(net, train_set, valid_set, cfg)?;
            (Surrogate::Network { network: net }, h)
        }
        _ => {
            let arch = spec.build(d, concept_names.len())?;
            let model = ConceptDistil::new(arch, concept_names.to_vec(), init_seed)?;
            let (m, h) = train(model, train_set, valid_set, cfg)?;
            (Surrogate::ConceptDistil(m), h)
        }
    };
    Ok(TrainedSurrogate { variant: cfg.variant, model, history })
}

/// Fidelity on `eval` (against its black-box scores) and mean concept AUC on
/// `golden` (against its golden labels), as applicable to `variant`.
pub fn evaluate(model: &Surrogate, variant: Variant, eval: Option<&Dataset>, golden: Option<&Dataset>) -> Result<EvalReport> {
    let mut report = EvalReport {
        fidelity: None,
        concept_names: Vec::new(),
        per_concept_auc: Vec::new(),
        mean_auc: None,
        n_eval: 0,
        n_golden: 0,
        recall_at_fpr: None,
    };
    if let (true, Some(ds)) = (variant.has_distillation(), eval) {
        let truth = ds.require_bb_scores()?;
        let pred = model.predict_scores(ds.features())?;
        report.fidelity = Some(fidelity(&pred, truth)?);
        report.n_eval = ds.len();
    }
    if let (true, Some(ds), Some(m)) = (variant.has_concepts(), golden, model.as_concept_distil()) {
        let g = ds.require_golden()?;
        let pred = m.predict_concepts(ds.features())?;
        let (per, mean) = mean_concept_auc(&pred, g, m.concept_names())?;
        report.concept_names = m.concept_names().to_vec();
        report.per_concept_auc = per;
        report.mean_auc = Some(mean);
        report.n_golden = ds.len();
    }
    Ok(report)
}
