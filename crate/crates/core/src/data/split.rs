use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ensure, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Keep file order (the temporal analogue).
    Sequential,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.8, valid_frac: 0.1, test_frac: 0.1, mode: SplitMode::Sequential }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.valid_frac, self.test_frac];
        ensure!(fr.iter().all(|f| (0.0..=1.0).contains(f)), Config, "split fractions must lie in [0, 1]");
        ensure!(
            (fr.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            Config,
            "split fractions sum to {}, not 1",
            fr.iter().sum::<f64>()
        );
        Ok(())
    }

    /// Sizes `(train, valid, test)` for `n` rows; test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train_frac * n as f64).round() as usize).min(n);
        let valid = ((self.valid_frac * n as f64).round() as usize).min(n - train);
        (train, valid, n - train - valid)
    }
}

/// Partitions `ds` into train, validation and test sets.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.len();
    let (a, b, c) = spec.sizes(n);
    ensure!(a > 0 && b > 0 && c > 0, Data, "split of {n} rows leaves an empty part ({a}, {b}, {c})");
    let mut idx: Vec<usize> = (0..n).collect();
    if let SplitMode::Random { seed } = spec.mode {
        idx.shuffle(&mut rng_from_seed(seed));
    }
    Ok((ds.select(&idx[..a]), ds.select(&idx[a..a + b]), ds.select(&idx[a + b..])))
}

/// Sizes of the expert-annotated (golden) sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for GoldenSizes {
    /// Teacher training, teacher tuning and final evaluation.
    fn default() -> Self {
        GoldenSizes { train: 1934, valid: 203, test: 506 }
    }
}

impl GoldenSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    /// Proportionally shrunk to fit `available` rows; unchanged if they fit.
    pub fn scaled_to(&self, available: usize) -> GoldenSizes {
        let total = self.total();
        if total <= available {
            return *self;
        }
        let f = available as f64 / total as f64;
        let train = (self.train as f64 * f).floor() as usize;
        let valid = (self.valid as f64 * f).floor() as usize;
        let test = ((self.test as f64 * f).floor() as usize).min(available - train - valid);
        GoldenSizes { train, valid, test }
    }
}

#[derive(Debug, Clone)]
pub struct GoldenSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Rows not drawn into any golden set, in original order.
    pub rest: Dataset,
}

/// Random disjoint golden draws plus the untouched remainder.
pub fn golden_partition(ds: &Dataset, sizes: GoldenSizes, seed: u64) -> Result<GoldenSplit> {
    ds.require_golden()?;
    let n = ds.len();
    ensure!(
        sizes.total() <= n,
        Data,
        "golden sets need {} labeled rows, only {n} available",
        sizes.total()
    );
    ensure!(sizes.train > 0 && sizes.test > 0, Config, "golden train and test sets must be non-empty");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let (a, b, c) = (sizes.train, sizes.valid, sizes.test);
    let mut rest: Vec<usize> = idx[a + b + c..].to_vec();
    rest.sort_unstable();
    Ok(GoldenSplit {
        train: ds.select(&idx[..a]),
        valid: ds.select(&idx[a..a + b]),
        test: ds.select(&idx[a + b..a + b + c]),
        rest: ds.select(&rest),
    })
}

pub fn golden_subset(ds: &Dataset, sizes: GoldenSizes, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let g = golden_partition(ds, sizes, seed)?;
    Ok((g.train, g.valid, g.test))
}
