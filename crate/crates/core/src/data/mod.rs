//! Datasets: features plus the optional label blocks the pipeline attaches
//! along the way (task labels, golden concepts, soft concepts, black-box
//! scores, teacher-only features).

mod csv_io;
mod generator;
mod split;

pub use generator::{generate_synthetic, ConceptRule, GeneratorConfig};
pub use split::{golden_partition, golden_subset, split, GoldenSizes, GoldenSplit, SplitMode, SplitSpec};

use crate::error::{ensure, Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: Matrix,
    labels: Option<Vec<f64>>,
    concept_names: Vec<String>,
    golden: Option<Matrix>,
    soft: Option<Matrix>,
    bb_scores: Option<Vec<f64>>,
    teacher_features: Option<Matrix>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, features: Matrix) -> Result<Self> {
        ensure!(
            ids.len() == features.rows(),
            Shape,
            "{} ids for {} feature rows",
            ids.len(),
            features.rows()
        );
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for id in &ids {
            ensure!(seen.insert(id.as_str()), Data, "duplicate id {id:?}");
        }
        Ok(Dataset {
            ids,
            features,
            labels: None,
            concept_names: Vec::new(),
            golden: None,
            soft: None,
            bb_scores: None,
            teacher_features: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        ensure!(labels.len() == self.len(), Shape, "{} labels for {} rows", labels.len(), self.len());
        ensure!(
            labels.iter().all(|&y| y == 0.0 || y == 1.0),
            Data,
            "task labels must be 0 or 1"
        );
        self.labels = Some(labels);
        Ok(self)
    }

    fn set_concept_names(&mut self, names: Vec<String>) -> Result<()> {
        if self.golden.is_some() || self.soft.is_some() {
            ensure!(
                self.concept_names == names,
                Data,
                "concept names {:?} differ from existing {:?}",
                names,
                self.concept_names
            );
        }
        for n in &names {
            ensure!(
                !n.is_empty() && !n.ends_with("_soft") && !n.contains(','),
                Data,
                "invalid concept name {n:?}"
            );
        }
        self.concept_names = names;
        Ok(())
    }

    /// Hard (expert) concept labels, `n x K`, entries 0 or 1.
    pub fn with_golden(mut self, names: Vec<String>, golden: Matrix) -> Result<Self> {
        golden.check_shape(self.len(), names.len(), "golden concept labels")?;
        ensure!(
            golden.as_slice().iter().all(|&v| v == 0.0 || v == 1.0),
            Data,
            "golden concept labels must be 0 or 1"
        );
        self.set_concept_names(names)?;
        self.golden = Some(golden);
        Ok(self)
    }

    /// Probabilistic concept labels, `n x K`, entries in [0, 1].
    pub fn with_soft(mut self, names: Vec<String>, soft: Matrix) -> Result<Self> {
        soft.check_shape(self.len(), names.len(), "soft concept labels")?;
        ensure!(
            soft.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
            Data,
            "soft concept labels must lie in [0, 1]"
        );
        self.set_concept_names(names)?;
        self.soft = Some(soft);
        Ok(self)
    }

    pub fn with_bb_scores(mut self, scores: Vec<f64>) -> Result<Self> {
        ensure!(scores.len() == self.len(), Shape, "{} scores for {} rows", scores.len(), self.len());
        ensure!(
            scores.iter().all(|v| (0.0..=1.0).contains(v)),
            Data,
            "black-box scores must lie in [0, 1]"
        );
        self.bb_scores = Some(scores);
        Ok(self)
    }

    pub fn with_teacher_features(mut self, t: Matrix) -> Result<Self> {
        ensure!(t.rows() == self.len(), Shape, "{} teacher rows for {} rows", t.rows(), self.len());
        self.teacher_features = Some(t);
        Ok(self)
    }

    pub fn without_soft(mut self) -> Self {
        self.soft = None;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn k(&self) -> usize {
        self.concept_names.len()
    }

    pub fn golden(&self) -> Option<&Matrix> {
        self.golden.as_ref()
    }

    pub fn soft(&self) -> Option<&Matrix> {
        self.soft.as_ref()
    }

    pub fn bb_scores(&self) -> Option<&[f64]> {
        self.bb_scores.as_deref()
    }

    pub fn teacher_features(&self) -> Option<&Matrix> {
        self.teacher_features.as_ref()
    }

    pub fn require_labels(&self) -> Result<&[f64]> {
        self.labels().ok_or_else(|| Error::Data("dataset has no task labels (column y)".into()))
    }

    pub fn require_golden(&self) -> Result<&Matrix> {
        self.golden().ok_or_else(|| Error::Data("dataset has no golden concept labels".into()))
    }

    pub fn require_bb_scores(&self) -> Result<&[f64]> {
        self.bb_scores()
            .ok_or_else(|| Error::Data("dataset has no black-box scores (column bb_score)".into()))
    }

    /// Training targets for the concept model: soft labels when present,
    /// otherwise the golden labels.
    pub fn concept_targets(&self) -> Result<&Matrix> {
        self.soft
            .as_ref()
            .or(self.golden.as_ref())
            .ok_or_else(|| Error::Data("dataset has neither soft nor golden concept labels".into()))
    }

    /// Features followed by the teacher-only columns.
    pub fn teacher_input(&self) -> Matrix {
        match &self.teacher_features {
            None => self.features.clone(),
            Some(t) => {
                let cols = self.features.cols() + t.cols();
                let mut data = Vec::with_capacity(self.len() * cols);
                for r in 0..self.len() {
                    data.extend_from_slice(self.features.row(r));
                    data.extend_from_slice(t.row(r));
                }
                Matrix::from_raw(self.len(), cols, data)
            }
        }
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            concept_names: self.concept_names.clone(),
            golden: self.golden.as_ref().map(|m| m.select_rows(idx)),
            soft: self.soft.as_ref().map(|m| m.select_rows(idx)),
            bb_scores: self.bb_scores.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            teacher_features: self.teacher_features.as_ref().map(|m| m.select_rows(idx)),
        }
    }

    /// Fraction of positives per golden concept column.
    pub fn concept_prevalences(&self) -> Result<Vec<f64>> {
        let g = self.require_golden()?;
        ensure!(!self.is_empty(), Data, "empty dataset");
        Ok((0..g.cols())
            .map(|c| g.column(c).iter().sum::<f64>() / self.len() as f64)
            .collect())
    }
}
