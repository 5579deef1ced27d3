use std::io::Write;
use std::path::{Path, PathBuf};

use conceptdistil::blackbox::{
    attach_scores, train_ffnn_blackbox, uncertainty_sample, write_score_file, BlackBox, BlackBoxConfig, FfnnBlackBox,
    ScoreFile,
};
use conceptdistil::data::{Dataset, GeneratorConfig, GoldenSizes, SplitSpec};
use conceptdistil::hpo::{lambda_grid, lambda_sweep, run_search, DataBundle, SampledConfig, SearchOptions, SearchSpace};
use conceptdistil::metrics::{recall_at_fpr, EvalReport};
use conceptdistil::model::{ArchitectureSpec, ModelFile};
use conceptdistil::pipeline::generate_splits;
use conceptdistil::teachers::{fit_teachers, tune_teachers, ForestParams, TeacherSearch};
use conceptdistil::training::{evaluate, train_surrogate, TrainConfig, Variant};
use conceptdistil::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{beside, Recorder};
use crate::{Command, Common};

pub const SEED_ENV: &str = "CONCEPTDISTIL_SEED";

/// 1 usage/configuration, 2 data or contract violation, 3 numeric failure.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn resolve_seed(common: &Common) -> Result<Option<u64>> {
    if common.seed.is_some() {
        return Ok(common.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>, rec: &mut Recorder) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            rec.config_path = Some(p.to_path_buf());
            let text = std::fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        }
    }
}

fn load(path: &Path, rec: &mut Recorder) -> Result<Dataset> {
    rec.input(path);
    Dataset::load_csv(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn write_file(path: &Path, bytes: &[u8], rec: &mut Recorder) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    rec.output(path);
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, n, common } => gen_data(config.as_deref(), &out, n, &common),
        Command::TrainBlackbox { train, valid, config, out, common } => {
            train_blackbox(&train, &valid, config.as_deref(), &out, &common)
        }
        Command::Teach { golden_train, golden_valid, trials, config, out, common } => {
            teach(&golden_train, golden_valid.as_deref(), trials, config.as_deref(), &out, &common)
        }
        Command::Label { data, out, teachers, blackbox, scores, scores_out, uncertainty, center } => label(LabelArgs {
            data,
            out,
            teachers,
            blackbox,
            scores,
            scores_out,
            uncertainty,
            center,
        }),
        Command::Distill { variant, train, valid, config, lambda, epochs, learning_rate, batch_size, patience, out, common } => {
            let overrides = TrainOverrides { lambda, epochs, learning_rate, batch_size, patience };
            distill(variant, &train, &valid, config.as_deref(), &overrides, &out, &common)
        }
        Command::Evaluate { models, data, golden, blackbox, out } => {
            evaluate_cmd(&models, &data, golden.as_deref(), blackbox.as_deref(), out.as_deref())
        }
        Command::Explain { model, input, out } => explain(&model, &input, out.as_deref()),
        Command::Sweep { train, valid, test, golden, config, trials, variant, lambda_grid, repeats, jobs, out, common } => {
            sweep(SweepArgs { train, valid, test, golden, config, trials, variant, lambda_grid, repeats, jobs, out }, &common)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub generator: GeneratorConfig,
    pub golden: GoldenSizes,
    pub split: SplitSpec,
    pub seed: u64,
}

fn gen_data(config: Option<&Path>, out: &Path, n: Option<usize>, common: &Common) -> Result<()> {
    let mut rec = Recorder::start("gen-data");
    let mut cfg: GenDataConfig = read_config(config, &mut rec)?;
    if let Some(s) = resolve_seed(common)? {
        cfg.seed = s;
    }
    if let Some(n) = n {
        cfg.generator.n_instances = n;
    }
    cfg.generator.validate()?;
    cfg.split.validate()?;
    let golden = cfg.golden.scaled_to(cfg.generator.n_instances / 2);
    if golden != cfg.golden {
        eprintln!(
            "note: golden sets shrunk to {}/{}/{} to fit {} rows",
            golden.train, golden.valid, golden.test, cfg.generator.n_instances
        );
        cfg.golden = golden;
    }
    rec.seed = Some(cfg.seed);
    rec.config = serde_json::to_value(&cfg)?;
    let splits = generate_splits(&cfg.generator, cfg.golden, &cfg.split, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    for (stem, ds) in splits.named() {
        write_file(&out.join(format!("{stem}.csv")), &ds.to_csv_bytes()?, &mut rec)?;
    }
    write_file(&out.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes(), &mut rec)?;
    for (stem, ds) in splits.named() {
        println!("{stem}: {} rows", ds.len());
    }
    rec.finish(&out.join("manifest.json"))
}

fn train_blackbox(train: &Path, valid: &Path, config: Option<&Path>, out: &Path, common: &Common) -> Result<()> {
    let mut rec = Recorder::start("train-blackbox");
    let mut cfg: BlackBoxConfig = read_config(config, &mut rec)?;
    if let Some(s) = resolve_seed(common)? {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    rec.seed = Some(cfg.train.seed);
    rec.config = serde_json::to_value(&cfg)?;
    let tr = load(train, &mut rec)?;
    let va = load(valid, &mut rec)?;
    let (bb, history) = train_ffnn_blackbox(&tr, &va, &cfg)?;
    write_file(out, serde_json::to_string_pretty(&bb)?.as_bytes(), &mut rec)?;
    write_file(&sibling(out, ".history.csv"), history.to_csv().as_bytes(), &mut rec)?;
    let scores = bb.score(&va)?;
    if let Ok(r) = recall_at_fpr(&scores, va.require_labels()?, 0.05) {
        println!("validation recall@5%FPR: {r:.4}");
    }
    rec.finish(&beside(out))
}

fn teach(golden_train: &Path, golden_valid: Option<&Path>, trials: Option<usize>, config: Option<&Path>, out: &Path, common: &Common) -> Result<()> {
    let mut rec = Recorder::start("teach");
    let mut params: ForestParams = read_config(config, &mut rec)?;
    if let Some(s) = resolve_seed(common)? {
        params.seed = s;
    }
    params.validate()?;
    rec.seed = Some(params.seed);
    let gt = load(golden_train, &mut rec)?;
    let teachers = match trials {
        None => {
            rec.config = serde_json::to_value(&params)?;
            let per: Vec<ForestParams> = (0..gt.k())
                .map(|c| ForestParams { seed: conceptdistil::rng::derive_seed(params.seed, c as u64), ..params.clone() })
                .collect();
            fit_teachers(&gt, &per)?
        }
        Some(n) => {
            let gv_path = golden_valid.ok_or_else(|| Error::Config("--trials needs --golden-valid".into()))?;
            let gv = load(gv_path, &mut rec)?;
            let search = TeacherSearch { n_trials: n, seed: params.seed, ..Default::default() };
            rec.config = serde_json::to_value(&search)?;
            let (t, trial_log) = tune_teachers(&gt, &gv, &search)?;
            write_file(&sibling(out, ".trials.json"), serde_json::to_string_pretty(&trial_log)?.as_bytes(), &mut rec)?;
            for (name, auc) in t.concept_names.iter().zip(&t.valid_auc) {
                println!("{name}: golden-valid AUC {auc:.4}");
            }
            t
        }
    };
    write_file(out, serde_json::to_string(&teachers)?.as_bytes(), &mut rec)?;
    rec.finish(&beside(out))
}

struct LabelArgs {
    data: PathBuf,
    out: PathBuf,
    teachers: Option<PathBuf>,
    blackbox: Option<PathBuf>,
    scores: Option<PathBuf>,
    scores_out: Option<PathBuf>,
    uncertainty: Option<f64>,
    center: f64,
}

fn label(a: LabelArgs) -> Result<()> {
    let mut rec = Recorder::start("label");
    rec.config = serde_json::json!({ "uncertainty": a.uncertainty, "center": a.center });
    let mut ds = load(&a.data, &mut rec)?;
    let adapter: Option<Box<dyn BlackBox>> = match (&a.blackbox, &a.scores) {
        (Some(p), _) => {
            rec.input(p);
            Some(Box::new(FfnnBlackBox::load(p)?))
        }
        (None, Some(p)) => {
            rec.input(p);
            Some(Box::new(ScoreFile::load(p)?))
        }
        (None, None) => None,
    };
    ensure_config(
        a.teachers.is_some() || adapter.is_some(),
        "nothing to attach: pass --teachers and/or --blackbox/--scores",
    )?;
    if let Some(f) = a.uncertainty {
        let bb = adapter.as_deref().ok_or_else(|| Error::Config("--uncertainty needs --blackbox or --scores".into()))?;
        ds = uncertainty_sample(bb, &ds, f, a.center)?;
    } else if let Some(bb) = adapter.as_deref() {
        ds = attach_scores(bb, ds)?;
    }
    if let Some(p) = &a.teachers {
        rec.input(p);
        let t = conceptdistil::teachers::TeacherSet::load(p)?;
        ds = t.label(ds)?;
    }
    if let Some(p) = &a.scores_out {
        let s = ds.require_bb_scores()?;
        write_score_file(p, ds.ids(), s)?;
        rec.output(p);
    }
    write_file(&a.out, &ds.to_csv_bytes()?, &mut rec)?;
    println!("{} rows labeled", ds.len());
    rec.finish(&beside(&a.out))
}

fn ensure_config(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
}

struct TrainOverrides {
    lambda: Option<f64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    patience: Option<usize>,
}

fn distill(variant: Variant, train: &Path, valid: &Path, config: Option<&Path>, o: &TrainOverrides, out: &Path, common: &Common) -> Result<()> {
    let mut rec = Recorder::start("distill");
    let mut cfg: DistillConfig = read_config(config, &mut rec)?;
    let t = &mut cfg.train;
    t.variant = variant;
    if let Some(v) = o.lambda {
        t.lambda = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.patience {
        t.early_stop_patience = v;
    }
    if let Some(s) = resolve_seed(common)? {
        t.seed = s;
    }
    t.validate()?;
    rec.seed = Some(t.seed);
    rec.config = serde_json::to_value(&cfg)?;
    let tr = load(train, &mut rec)?;
    let va = load(valid, &mut rec)?;
    if variant.has_concepts() {
        for (ds, p) in [(&tr, train), (&va, valid)] {
            if ds.soft().is_none() {
                return Err(Error::Data(format!(
                    "{}: no soft concept labels (c_<name>_soft columns); run `label --teachers` first",
                    p.display()
                )));
            }
        }
    }
    let trained = train_surrogate(&cfg.architecture, tr.concept_names(), &tr, &va, &cfg.train)?;
    let file = ModelFile::new(variant.as_str(), trained.model);
    write_file(out, file.to_json()?.as_bytes(), &mut rec)?;
    write_file(&sibling(out, ".history.csv"), trained.history.to_csv().as_bytes(), &mut rec)?;
    let last = trained.history.records.len();
    println!("{variant}: {last} epochs, best {:?}", trained.history.best_epochs);
    rec.finish(&beside(out))
}

#[derive(Debug, Serialize)]
struct ModelRow {
    model: String,
    variant: String,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Debug, Serialize)]
struct PrevalenceRow {
    dataset: String,
    concept: String,
    prevalence: f64,
    n: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn evaluate_cmd(models: &[PathBuf], data: &Path, golden: Option<&Path>, blackbox: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("evaluate");
    let mut ds = load(data, &mut rec)?;
    let golden_ds = golden.map(|p| load(p, &mut rec)).transpose()?;
    if let (Some(p), None) = (blackbox, ds.bb_scores()) {
        rec.input(p);
        ds = attach_scores(&FfnnBlackBox::load(p)?, ds)?;
    }
    let json = if models.is_empty() {
        let mut rows = Vec::new();
        let named = std::iter::once((data, &ds)).chain(golden.zip(golden_ds.as_ref()));
        for (p, d) in named {
            let prev = d.concept_prevalences()?;
            for (c, v) in d.concept_names().iter().zip(prev) {
                rows.push(PrevalenceRow { dataset: p.display().to_string(), concept: c.clone(), prevalence: v, n: d.len() });
            }
        }
        println!("dataset,concept,prevalence_pct,n");
        for r in &rows {
            println!("{},{},{:.2},{}", r.dataset, r.concept, 100.0 * r.prevalence, r.n);
        }
        if let (Some(s), Some(y)) = (ds.bb_scores(), ds.labels()) {
            let r = recall_at_fpr(s, y, 0.05)?;
            println!("black-box recall@5%FPR: {:.2}", 100.0 * r);
        }
        serde_json::to_string_pretty(&rows)?
    } else {
        let mut rows = Vec::new();
        for m in models {
            rec.input(m);
            let file = ModelFile::load(m)?;
            let variant: Variant = file.label.parse()?;
            let report = evaluate(&file.model, variant, Some(&ds), golden_ds.as_ref())?;
            let name = m.file_stem().map_or_else(|| m.display().to_string(), |s| s.to_string_lossy().into_owned());
            rows.push(ModelRow { model: name, variant: variant.to_string(), report });
        }
        println!("model,variant,fidelity_pct,mean_auc_pct");
        for r in &rows {
            println!("{},{},{},{}", r.model, r.variant, fmt_opt(r.report.fidelity), fmt_opt(r.report.mean_auc));
        }
        serde_json::to_string_pretty(&rows)?
    };
    if let Some(p) = out {
        write_file(p, json.as_bytes(), &mut rec)?;
        rec.finish(&beside(p))?;
    }
    Ok(())
}

fn explain(model: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("explain");
    rec.input(model);
    let file = ModelFile::load(model)?;
    let m = file
        .model
        .as_concept_distil()
        .ok_or_else(|| Error::Data(format!("{}: {} model has no concept output", model.display(), file.label)))?;
    let ds = load(input, &mut rec)?;
    let explanations = m.explain(ds.features())?;
    let mut buf = Vec::new();
    for (id, e) in ds.ids().iter().zip(&explanations) {
        serde_json::to_writer(&mut buf, &e.to_json(Some(id)))?;
        buf.push(b'\n');
    }
    match out {
        Some(p) => {
            write_file(p, &buf, &mut rec)?;
            rec.finish(&beside(p))
        }
        None => match std::io::stdout().write_all(&buf) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            other => Ok(other?),
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub space: SearchSpace,
    pub options: SearchOptions,
    /// Fixed configuration for lambda sweeps.
    pub base: Option<SampledConfig>,
}

struct SweepArgs {
    train: PathBuf,
    valid: PathBuf,
    test: PathBuf,
    golden: PathBuf,
    config: Option<PathBuf>,
    trials: Option<usize>,
    variant: Option<Variant>,
    lambda_grid: Option<usize>,
    repeats: usize,
    jobs: usize,
    out: PathBuf,
}

fn sweep(a: SweepArgs, common: &Common) -> Result<()> {
    let mut rec = Recorder::start("sweep");
    let mut cfg: SweepConfig = read_config(a.config.as_deref(), &mut rec)?;
    if let Some(s) = resolve_seed(common)? {
        cfg.options.master_seed = s;
    }
    if let Some(n) = a.trials {
        cfg.options.n_trials = n;
    }
    if let Some(v) = a.variant {
        cfg.options.variant = v;
    }
    cfg.options.jobs = a.jobs;
    rec.seed = Some(cfg.options.master_seed);
    rec.config = serde_json::to_value(&cfg)?;
    let data = DataBundle {
        train: load(&a.train, &mut rec)?,
        valid: load(&a.valid, &mut rec)?,
        test: load(&a.test, &mut rec)?,
        golden_test: load(&a.golden, &mut rec)?,
    };
    let report = match a.lambda_grid {
        Some(points) => {
            let base = cfg.base.clone().unwrap_or_else(|| SampledConfig {
                architecture: ArchitectureSpec::default(),
                train: cfg.options.base.clone(),
            });
            lambda_sweep(&base, &lambda_grid(points), a.repeats, cfg.options.master_seed, a.jobs, &data)?
        }
        None => run_search(&cfg.space, &cfg.options, &data)?,
    };
    std::fs::create_dir_all(&a.out)?;
    write_file(&a.out.join("sweep.csv"), report.to_csv().as_bytes(), &mut rec)?;
    write_file(&a.out.join("sweep.json"), report.to_json()?.as_bytes(), &mut rec)?;
    let done = report.trials.iter().filter(|t| t.fidelity.is_some() || t.mean_auc.is_some()).count();
    println!("{done}/{} trials completed, {} on the frontier", report.trials.len(), report.on_frontier.iter().filter(|&&f| f).count());
    rec.finish(&a.out.join("manifest.json"))
}
