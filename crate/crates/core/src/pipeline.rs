//! End-to-end composition: synthetic data, golden sets, black box, teachers,
//! soft labels and the surrogate variants.

use serde::{Deserialize, Serialize};

use crate::blackbox::{attach_scores, train_ffnn_blackbox, BlackBoxConfig, FfnnBlackBox};
use crate::data::{generate_synthetic, golden_partition, split, Dataset, GeneratorConfig, GoldenSizes, SplitSpec};
use crate::error::Result;
use crate::hpo::DataBundle;
use crate::metrics::{mean_concept_auc, EvalReport};
use crate::model::{ArchitectureSpec, Surrogate};
use crate::rng::derive_seed;
use crate::teachers::{fit_teachers, ForestParams, TeacherSet};
use crate::training::{evaluate, train_surrogate, History, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub golden: GoldenSizes,
    /// Split of the rows left after the golden draws.
    pub split: SplitSpec,
    pub blackbox: BlackBoxConfig,
    pub teachers: ForestParams,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            generator: GeneratorConfig::default(),
            golden: GoldenSizes::default(),
            split: SplitSpec::default(),
            blackbox: BlackBoxConfig::default(),
            teachers: ForestParams::default(),
            architecture: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Everything up to (not including) surrogate training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub golden_train: Dataset,
    pub golden_valid: Dataset,
    pub golden_test: Dataset,
    pub blackbox: FfnnBlackBox,
    pub blackbox_history: History,
    pub teachers: TeacherSet,
    /// Teachers' per-concept and mean AUC on the golden test set.
    pub teacher_auc: (Vec<f64>, f64),
    /// Soft-labeled, scored train/valid; scored test; golden test.
    pub bundle: DataBundle,
}

/// Generated data: golden sets drawn first, the remainder split in three.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub golden_train: Dataset,
    pub golden_valid: Dataset,
    pub golden_test: Dataset,
}

impl Splits {
    /// `(file stem, dataset)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, &Dataset); 6] {
        [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("golden_train", &self.golden_train),
            ("golden_valid", &self.golden_valid),
            ("golden_test", &self.golden_test),
        ]
    }
}

/// The generator's own seed is replaced by one derived from `seed`.
pub fn generate_splits(generator: &GeneratorConfig, golden: GoldenSizes, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let gen = GeneratorConfig { seed: derive_seed(seed, 1), ..generator.clone() };
    let full = generate_synthetic(&gen)?;
    let g = golden_partition(&full, golden, derive_seed(seed, 2))?;
    let (train, valid, test) = split(&g.rest, spec)?;
    Ok(Splits { train, valid, test, golden_train: g.train, golden_valid: g.valid, golden_test: g.test })
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let s = generate_splits(&cfg.generator, cfg.golden, &cfg.split, cfg.seed)?;

    let mut bb_cfg = cfg.blackbox.clone();
    bb_cfg.train.seed = derive_seed(cfg.seed, 3);
    let (blackbox, blackbox_history) = train_ffnn_blackbox(&s.train, &s.valid, &bb_cfg)?;

    let params: Vec<ForestParams> = (0..s.golden_train.k())
        .map(|c| ForestParams { seed: derive_seed(derive_seed(cfg.seed, 4), c as u64), ..cfg.teachers.clone() })
        .collect();
    let teachers = fit_teachers(&s.golden_train, &params)?;
    let teacher_pred = teachers.teach_labels(&s.golden_test)?;
    let teacher_auc = mean_concept_auc(&teacher_pred, s.golden_test.require_golden()?, s.golden_train.concept_names())?;

    let label = |ds: Dataset| -> Result<Dataset> { attach_scores(&blackbox, teachers.label(ds)?) };
    let bundle = DataBundle {
        train: label(s.train)?,
        valid: label(s.valid)?,
        test: attach_scores(&blackbox, s.test)?,
        golden_test: s.golden_test.clone(),
    };
    Ok(Prepared {
        golden_train: s.golden_train,
        golden_valid: s.golden_valid,
        golden_test: s.golden_test,
        blackbox,
        blackbox_history,
        teachers,
        teacher_auc,
        bundle,
    })
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub model: Surrogate,
    pub history: History,
    pub report: EvalReport,
}

/// Trains and evaluates each variant from the same seed.
pub fn run_variants(
    prepared: &Prepared,
    variants: &[Variant],
    arch: &ArchitectureSpec,
    train: &TrainConfig,
) -> Result<Vec<VariantResult>> {
    let b = &prepared.bundle;
    variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig { variant, ..train.clone() };
            let t = train_surrogate(arch, b.concept_names(), &b.train, &b.valid, &cfg)?;
            let report = evaluate(&t.model, variant, Some(&b.test), Some(&b.golden_test))?;
            Ok(VariantResult { variant, model: t.model, history: t.history, report })
        })
        .collect()
}
