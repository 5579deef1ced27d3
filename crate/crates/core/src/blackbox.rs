//! The black box being explained: anything that maps an instance to a score
//! in [0, 1]. Either a feed-forward classifier trained here or a score file
//! produced by an external model.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{Matrix, Mlp};
use crate::training::{fit_network, plain_network, History, TrainConfig};

pub trait BlackBox: Send + Sync {
    /// Scores every row of `ds`, in dataset order.
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>>;
    fn descriptor(&self) -> String;
}

/// Feed-forward network classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnnBlackBox {
    pub network: Mlp,
}

impl FfnnBlackBox {
    pub fn score_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.network.predict(x)?.into_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bb: FfnnBlackBox = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ensure!(bb.network.out_dim() == 1, Data, "{}: network has {} outputs", path.display(), bb.network.out_dim());
        Ok(bb)
    }
}

impl BlackBox for FfnnBlackBox {
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ensure!(
            ds.n_features() == self.network.in_dim(),
            Shape,
            "black box expects {} features, dataset has {}",
            self.network.in_dim(),
            ds.n_features()
        );
        self.score_matrix(ds.features())
    }

    fn descriptor(&self) -> String {
        format!("ffnn:{}:{}", self.network.n_params(), &self.network.digest()[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackBoxConfig {
    pub hidden_widths: Vec<usize>,
    pub dropout: f64,
    pub batchnorm: bool,
    pub train: TrainConfig,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig {
            hidden_widths: vec![64, 32],
            dropout: 0.1,
            batchnorm: false,
            train: TrainConfig { learning_rate: 0.003, ..Default::default() },
        }
    }
}

/// Trains a BCE classifier on the fraud labels.
pub fn train_ffnn_blackbox(train_set: &Dataset, valid_set: &Dataset, cfg: &BlackBoxConfig) -> Result<(FfnnBlackBox, History)> {
    let yt = train_set.require_labels().map_err(|e| Error::Data(format!("training set: {e}")))?;
    let yv = valid_set.require_labels().map_err(|e| Error::Data(format!("validation set: {e}")))?;
    let net = plain_network(train_set.n_features(), &cfg.hidden_widths, cfg.dropout, cfg.batchnorm, cfg.train.seed)?;
    let (network, history) = fit_network(net, train_set.features(), yt, valid_set.features(), yv, &cfg.train)?;
    Ok((FfnnBlackBox { network }, history))
}

/// Replays scores stored by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    source: String,
    scores: HashMap<String, f64>,
}

impl ScoreFile {
    pub fn from_pairs(source: &str, pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut scores = HashMap::new();
        for (id, s) in pairs {
            ensure!((0.0..=1.0).contains(&s), Data, "{source}: score {s} for id {id} outside [0, 1]");
            ensure!(scores.insert(id.clone(), s).is_none(), Data, "{source}: duplicate id {id}");
        }
        Ok(ScoreFile { source: source.to_string(), scores })
    }

    /// Reads an `id,score` CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = rdr.headers()?.clone();
        ensure!(
            headers.len() == 2 && &headers[0] == "id" && &headers[1] == "score",
            Data,
            "{}: expected header id,score",
            path.display()
        );
        let mut pairs = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { path: path.to_path_buf(), line, msg: e.to_string() })?;
            let score: f64 = rec[1].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("bad score {:?}", &rec[1]),
            })?;
            pairs.push((rec[0].to_string(), score));
        }
        Self::from_pairs(&path.display().to_string(), pairs)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl BlackBox for ScoreFile {
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.ids()
            .iter()
            .map(|id| {
                self.scores
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("{}: no score for id {id}", self.source)))
            })
            .collect()
    }

    fn descriptor(&self) -> String {
        format!("score-file:{}", self.source)
    }
}

/// Writes an `id,score` CSV with round-trip float formatting.
pub fn write_score_file(path: &Path, ids: &[String], scores: &[f64]) -> Result<()> {
    ensure!(ids.len() == scores.len(), Shape, "{} ids but {} scores", ids.len(), scores.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score"])?;
    for (id, s) in ids.iter().zip(scores) {
        w.write_record([id.as_str(), &format!("{s:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Indices of the `ceil(fraction * n)` rows whose score lies closest to
/// `center`; ties go to the smaller id. Returned in dataset order.
pub fn uncertainty_indices(scores: &[f64], ids: &[String], fraction: f64, center: f64) -> Result<Vec<usize>> {
    ensure!(!scores.is_empty(), Data, "cannot sample from an empty dataset");
    ensure!(ids.len() == scores.len(), Shape, "{} ids but {} scores", ids.len(), scores.len());
    ensure!(fraction > 0.0 && fraction <= 1.0, Config, "fraction {fraction} outside (0, 1]");
    let n = scores.len();
    let m = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (scores[a] - center)
            .abs()
            .total_cmp(&(scores[b] - center).abs())
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The most uncertain rows of `ds` under `adapter`, with their scores attached.
pub fn uncertainty_sample(adapter: &dyn BlackBox, ds: &Dataset, fraction: f64, center: f64) -> Result<Dataset> {
    let scores = adapter.score(ds)?;
    let idx = uncertainty_indices(&scores, ds.ids(), fraction, center)?;
    ds.select(&idx).with_bb_scores(idx.iter().map(|&i| scores[i]).collect())
}

/// Attaches the adapter's scores to `ds`.
pub fn attach_scores(adapter: &dyn BlackBox, ds: Dataset) -> Result<Dataset> {
    let s = adapter.score(&ds)?;
    ds.with_bb_scores(s)
}
