//! Structural similarity, the two-alternative identification protocol,
//! ablation runners and report writers.

mod experiments;
mod report;
mod ssim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::gan::GanError;
use crate::image::{Image, ImageError};
use crate::semantic::SemanticError;
use crate::shape::ShapeError;

pub use experiments::{
    ablation_run, roi_ablation, validation_split, AblationMode, RoiAblationConfig, RoiAblationRow, ROI_SETS,
};
pub use report::{comparison_montage, metrics_csv, MetricRow, METRICS_HEADER, PUBLISHED_REFERENCE};
pub use ssim::{ssim, ssim_with, SsimParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image shape: {0}")]
    Shape(String),
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    ShapeDecoder(#[from] ShapeError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Outcome of the pairwise identification test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SSIM between each reconstruction and its own ground truth.
    pub per_image_ssim: Vec<f64>,
    /// Per-image fraction of wins over all runs, ties counted as half.
    pub per_image_win: Vec<f64>,
    pub run_win_rates: Vec<f64>,
    pub mean_win_rate: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn mean_ssim(&self) -> f64 {
        self.per_image_ssim.iter().sum::<f64>() / self.per_image_ssim.len() as f64
    }
}

/// Full matrix `s[i][j] = ssim(recons[i], truths[j])`. Rows run on the
/// rayon pool; every entry is computed independently, so the result does
/// not depend on the thread count.
pub fn ssim_matrix(recons: &[Image], truths: &[Image], params: &SsimParams) -> Result<Vec<Vec<f64>>, EvalError> {
    recons
        .par_iter()
        .map(|r| truths.iter().map(|t| ssim_with(r, t, params)).collect())
        .collect()
}

/// Each reconstruction is compared with its own ground truth and with one
/// distractor drawn uniformly from the other ground truths; it wins when its
/// own truth is strictly more similar, and a tie scores 0.5. All runs share
/// one ChaCha8 stream seeded by `seed`.
pub fn pairwise_win_rate(recons: &[Image], truths: &[Image], runs: usize, seed: u64) -> Result<EvalReport, EvalError> {
    pairwise_win_rate_with(recons, truths, runs, seed, &SsimParams::default())
}

pub fn pairwise_win_rate_with(
    recons: &[Image],
    truths: &[Image],
    runs: usize,
    seed: u64,
    params: &SsimParams,
) -> Result<EvalReport, EvalError> {
    let n = recons.len();
    if n != truths.len() {
        return Err(EvalError::Config(format!(
            "{n} reconstructions for {} ground truths",
            truths.len()
        )));
    }
    if n < 2 || runs == 0 {
        return Err(EvalError::Config("need at least two images and one run".into()));
    }
    let s = ssim_matrix(recons, truths, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run_win_rates = Vec::with_capacity(runs);
    let mut per_image_win = vec![0f64; n];
    for _ in 0..runs {
        let mut total = 0.0;
        for i in 0..n {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let score = match s[i][i].partial_cmp(&s[i][j]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
            per_image_win[i] += score;
            total += score;
        }
        run_win_rates.push(total / n as f64);
    }
    for w in &mut per_image_win {
        *w /= runs as f64;
    }
    let mean_win_rate = run_win_rates.iter().sum::<f64>() / runs as f64;
    Ok(EvalReport {
        per_image_ssim: (0..n).map(|i| s[i][i]).collect(),
        per_image_win,
        run_win_rates,
        mean_win_rate,
        seed,
    })
}
