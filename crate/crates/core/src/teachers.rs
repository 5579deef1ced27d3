//! Concept teachers: one random forest per concept, fitted on a small golden
//! set and used to produce probabilistic concept labels for unlabeled data.

use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::metrics::roc_auc;
use crate::nn::Matrix;
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// A fitted CART node. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        positive_fraction: f64,
        sample_count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { positive_fraction, .. } => return *positive_fraction,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub feature_subsample: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: 8, min_leaf: 5, feature_subsample: None, bootstrap: true, seed: 0 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_trees >= 1, Config, "n_trees must be >= 1");
        ensure!(self.min_leaf >= 1, Config, "min_leaf must be >= 1");
        if let Some(m) = self.feature_subsample {
            ensure!(m >= 1, Config, "feature_subsample must be >= 1");
        }
        Ok(())
    }

    pub fn features_per_split(&self, d: usize) -> usize {
        self.feature_subsample
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

pub fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn check_binary(y: &[f64]) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        ensure!(v == 0.0 || v == 1.0, Data, "label {v} at row {i} is not 0/1");
    }
    Ok(())
}

struct Grower<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    m_try: usize,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1.0).count();
        TreeNode::Leaf { positive_fraction: pos as f64 / idx.len() as f64, sample_count: idx.len() }
    }

    fn grow(&self, idx: &mut [usize], depth: usize, rng: &mut Rng) -> TreeNode {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i] == 1.0).count();
        if pos == 0 || pos == n || depth >= self.max_depth || n < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let parent = gini(pos, n);
        let d = self.x.cols();
        let features = index::sample(rng, d, self.m_try.min(d));
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n);
        for f in features.iter() {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x.get(i, f), self.y[i] == 1.0)));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 0..n - 1 {
                left_pos += usize::from(pairs[i].1);
                let n_left = i + 1;
                if pairs[i].0 == pairs[i + 1].0 || n_left < self.min_leaf || n - n_left < self.min_leaf {
                    continue;
                }
                let child = (n_left as f64 * gini(left_pos, n_left)
                    + (n - n_left) as f64 * gini(pos - left_pos, n - n_left))
                    / n as f64;
                let gain = parent - child;
                if gain > 0.0 && best.is_none_or(|(g, _, _)| gain > g) {
                    let (lo, hi) = (pairs[i].0, pairs[i + 1].0);
                    let mut t = lo + (hi - lo) / 2.0;
                    if t >= hi {
                        t = lo;
                    }
                    best = Some((gain, f, t));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        let mut split = 0;
        for j in 0..n {
            if self.x.get(idx[j], feature) <= threshold {
                idx.swap(j, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = Box::new(self.grow(l, depth + 1, rng));
        let right = Box::new(self.grow(r, depth + 1, rng));
        TreeNode::Split { feature, threshold, left, right }
    }
}

/// Grows one CART tree on the rows `idx` (repeats allowed) using Gini gain.
pub fn fit_tree_on(x: &Matrix, y: &[f64], idx: &[usize], params: &ForestParams, rng: &mut Rng) -> Result<TreeNode> {
    params.validate()?;
    ensure!(!idx.is_empty(), Data, "cannot fit a tree on empty data");
    ensure!(x.rows() == y.len(), Shape, "{} rows but {} labels", x.rows(), y.len());
    check_binary(y)?;
    let grower = Grower {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        m_try: params.features_per_split(x.cols()),
    };
    let mut idx = idx.to_vec();
    // sorted rows make the tree independent of input row order
    idx.sort_by(|&a, &b| {
        x.row(a).iter().zip(x.row(b)).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(grower.grow(&mut idx, 0, rng))
}

pub fn fit_tree(x: &Matrix, y: &[f64], params: &ForestParams, rng: &mut Rng) -> Result<TreeNode> {
    let idx: Vec<usize> = (0..x.rows()).collect();
    fit_tree_on(x, y, &idx, params, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub n_features: usize,
    pub trees: Vec<TreeNode>,
}

pub fn fit_forest(x: &Matrix, y: &[f64], params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    ensure!(x.rows() > 0, Data, "cannot fit a forest on empty data");
    ensure!(x.rows() == y.len(), Shape, "{} rows but {} labels", x.rows(), y.len());
    check_binary(y)?;
    let n = x.rows();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(params.seed, t as u64));
            let idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree_on(x, y, &idx, params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest { params: params.clone(), n_features: x.cols(), trees })
}

impl Forest {
    /// Mean of the leaf positive fractions across trees.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        ensure!(
            x.cols() == self.n_features,
            Shape,
            "forest expects {} features, got {}",
            self.n_features,
            x.cols()
        );
        let m = self.trees.len() as f64;
        Ok(x.iter_rows()
            .map(|row| self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / m)
            .collect())
    }
}

/// One fitted forest per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSet {
    pub concept_names: Vec<String>,
    /// Model features the teachers were fitted on.
    pub n_features: usize,
    /// Extra teacher-only columns appended to the model features.
    pub n_teacher_features: usize,
    pub forests: Vec<Forest>,
    /// Golden-validation AUC per concept, when tuning was run.
    #[serde(default)]
    pub valid_auc: Vec<f64>,
}

fn concept_column(ds: &Dataset, c: usize) -> Result<Vec<f64>> {
    Ok(ds.require_golden()?.column(c))
}

fn teacher_columns(ds: &Dataset) -> usize {
    ds.teacher_features().map_or(0, Matrix::cols)
}

/// Fits a forest for each concept with the given parameters (one per concept).
pub fn fit_teachers(golden_train: &Dataset, params: &[ForestParams]) -> Result<TeacherSet> {
    let k = golden_train.k();
    ensure!(k > 0, Data, "golden set has no concept labels");
    ensure!(params.len() == k, Config, "{} parameter sets for {k} concepts", params.len());
    let x = golden_train.teacher_input();
    let forests = params
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let y = concept_column(golden_train, c)?;
            fit_forest(&x, &y, p).map_err(|e| Error::Data(format!("concept {}: {e}", golden_train.concept_names()[c])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherSet {
        concept_names: golden_train.concept_names().to_vec(),
        n_features: golden_train.n_features(),
        n_teacher_features: teacher_columns(golden_train),
        forests,
        valid_auc: Vec::new(),
    })
}

impl TeacherSet {
    pub fn k(&self) -> usize {
        self.forests.len()
    }

    fn check_schema(&self, ds: &Dataset) -> Result<()> {
        ensure!(
            ds.n_features() == self.n_features && teacher_columns(ds) == self.n_teacher_features,
            Data,
            "teachers expect {} features and {} teacher columns, dataset has {} and {}",
            self.n_features,
            self.n_teacher_features,
            ds.n_features(),
            teacher_columns(ds)
        );
        Ok(())
    }

    /// Soft concept labels, `n x K`.
    pub fn teach_labels(&self, ds: &Dataset) -> Result<Matrix> {
        self.check_schema(ds)?;
        let x = ds.teacher_input();
        let cols = self.forests.iter().map(|f| f.predict_proba(&x)).collect::<Result<Vec<_>>>()?;
        Matrix::from_columns(&cols)
    }

    /// Returns `ds` with the teachers' soft labels attached.
    pub fn label(&self, ds: Dataset) -> Result<Dataset> {
        let soft = self.teach_labels(&ds)?;
        ds.with_soft(self.concept_names.clone(), soft)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: TeacherSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ensure!(
            t.forests.len() == t.concept_names.len() && !t.forests.is_empty(),
            Data,
            "{}: teacher file has {} forests for {} concepts",
            path.display(),
            t.forests.len(),
            t.concept_names.len()
        );
        Ok(t)
    }
}

/// Random search over forest hyperparameters, scored by golden-validation AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSearch {
    pub n_trials: usize,
    pub n_trees: Vec<usize>,
    pub max_depth: (usize, usize),
    pub min_leaf: (usize, usize),
    pub seed: u64,
}

impl Default for TeacherSearch {
    fn default() -> Self {
        TeacherSearch { n_trials: 200, n_trees: vec![50, 100, 200], max_depth: (3, 12), min_leaf: (1, 20), seed: 0 }
    }
}

impl TeacherSearch {
    pub fn sample(&self, d: usize, rng: &mut Rng) -> ForestParams {
        ForestParams {
            n_trees: *self.n_trees.choose(rng).unwrap_or(&100),
            max_depth: rng.random_range(self.max_depth.0..=self.max_depth.1),
            min_leaf: rng.random_range(self.min_leaf.0.max(1)..=self.min_leaf.1.max(1)),
            feature_subsample: Some(rng.random_range(1..=d.max(1))),
            bootstrap: rng.random_bool(0.8),
            seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrial {
    pub concept: String,
    pub trial: usize,
    pub params: ForestParams,
    pub valid_auc: f64,
}

/// Tunes each concept's forest independently and refits nothing: the best
/// trial's forest is kept as is.
pub fn tune_teachers(golden_train: &Dataset, golden_valid: &Dataset, search: &TeacherSearch) -> Result<(TeacherSet, Vec<TeacherTrial>)> {
    ensure!(search.n_trials >= 1, Config, "n_trials must be >= 1");
    ensure!(!search.n_trees.is_empty(), Config, "n_trees candidate list is empty");
    ensure!(
        search.max_depth.0 <= search.max_depth.1 && search.min_leaf.0 <= search.min_leaf.1,
        Config,
        "empty search range"
    );
    ensure!(
        golden_valid.concept_names() == golden_train.concept_names(),
        Data,
        "golden train and valid concepts differ"
    );
    let xt = golden_train.teacher_input();
    let xv = golden_valid.teacher_input();
    let d = xt.cols();
    let mut trials = Vec::new();
    let mut forests = Vec::new();
    let mut aucs = Vec::new();
    for (c, name) in golden_train.concept_names().iter().enumerate() {
        let yt = concept_column(golden_train, c)?;
        let yv = concept_column(golden_valid, c)?;
        let mut rng = rng_from_seed(derive_seed(search.seed, c as u64));
        let mut best: Option<(f64, Forest)> = None;
        for trial in 0..search.n_trials {
            let params = search.sample(d, &mut rng);
            let forest = fit_forest(&xt, &yt, &params)?;
            let auc = roc_auc(&forest.predict_proba(&xv)?, &yv)
                .map_err(|e| Error::Data(format!("golden validation, concept {name}: {e}")))?;
            trials.push(TeacherTrial { concept: name.clone(), trial, params, valid_auc: auc });
            if best.as_ref().is_none_or(|(b, _)| auc > *b) {
                best = Some((auc, forest));
            }
        }
        let (auc, forest) = best.expect("at least one trial");
        forests.push(forest);
        aucs.push(auc);
    }
    Ok((
        TeacherSet {
            concept_names: golden_train.concept_names().to_vec(),
            n_features: golden_train.n_features(),
            n_teacher_features: teacher_columns(golden_train),
            forests,
            valid_auc: aucs,
        },
        trials,
    ))
}
