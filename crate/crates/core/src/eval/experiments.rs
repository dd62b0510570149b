use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{pairwise_win_rate, EvalError, EvalReport};
use crate::dataset::{expand_roi_set, Dataset, ExternalImage, Split, TrialRecord};
use crate::image::Image;
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use crate::semantic::{train_semantic, SemanticConfig};
use crate::shape::{ShapeConfig, ShapeDecoder};

pub const ROI_SETS: [&str; 6] = ["V1", "V2", "V3", "LVC", "HVC", "VC"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAblationConfig {
    pub roi_sets: Vec<String>,
    /// Training stimuli held out for scoring, taken from the end.
    pub validation: usize,
    pub shape: ShapeConfig,
    /// `rois` is replaced by each set's members.
    pub semantic: SemanticConfig,
    pub runs: usize,
    pub seed: u64,
}

impl Default for RoiAblationConfig {
    fn default() -> Self {
        Self {
            roi_sets: ROI_SETS.iter().map(|s| s.to_string()).collect(),
            validation: 40,
            shape: ShapeConfig::default(),
            semantic: SemanticConfig::default(),
            runs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAblationRow {
    pub roi_set: String,
    pub shape: EvalReport,
    pub semantic_accuracy: f64,
}

/// Training-only dataset without the last `n` training stimuli, plus the
/// records of those stimuli.
pub fn validation_split(dataset: &Dataset, n: usize) -> Result<(Dataset, Vec<TrialRecord>), EvalError> {
    let ids = dataset.stimulus_ids(Split::Train);
    if n < 2 || n + 2 > ids.len() {
        return Err(EvalError::Config(format!(
            "cannot reserve {n} of {} training stimuli for validation",
            ids.len()
        )));
    }
    let held: BTreeSet<&str> = ids[ids.len() - n..].iter().map(|s| s.as_str()).collect();
    let train = dataset.filter_records(|r| r.split == Split::Train && !held.contains(r.stimulus_id.as_str()));
    let val = dataset
        .records_in(Split::Train)
        .filter(|r| held.contains(r.stimulus_id.as_str()))
        .cloned()
        .collect();
    Ok((train, val))
}

/// Fits a shape decoder and a semantic net per ROI set and scores both on
/// the reserved validation records: shape by pairwise win rate against the
/// true masks, semantics by classification accuracy.
pub fn roi_ablation(dataset: &Dataset, config: &RoiAblationConfig) -> Result<Vec<RoiAblationRow>, EvalError> {
    if config.roi_sets.is_empty() {
        return Err(EvalError::Config("no ROI sets given".into()));
    }
    if dataset.category_count() < 2 {
        return Err(EvalError::Config("ROI ablation needs at least two categories".into()));
    }
    let (train, val) = validation_split(dataset, config.validation)?;
    let masks: Vec<Image> = val
        .iter()
        .map(|r| dataset.shape_mask(&r.stimulus_id))
        .collect::<Result<_, _>>()?;
    let voxels: Vec<&[f32]> = val.iter().map(|r| r.voxels.as_slice()).collect();
    let mut rows = Vec::with_capacity(config.roi_sets.len());
    for set in &config.roi_sets {
        let members = expand_roi_set(set)?;
        let decoder = ShapeDecoder::fit(&train, &members, &config.shape)?;
        let shapes = voxels
            .iter()
            .map(|v| decoder.decode_shape(v))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = pairwise_win_rate(&shapes, &masks, config.runs, config.seed)?;
        let sem_cfg = SemanticConfig {
            rois: members.iter().map(|s| s.to_string()).collect(),
            ..config.semantic.clone()
        };
        let net = train_semantic(&train, &sem_cfg)?;
        let predicted = net.classify_batch(&voxels)?;
        let correct = predicted.iter().zip(&val).filter(|(p, r)| **p == r.category_id).count();
        rows.push(RoiAblationRow {
            roi_set: set.clone(),
            shape,
            semantic_accuracy: correct as f64 / val.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoSemantics,
    NoAugmentation,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::Full,
        AblationMode::NoSemantics,
        AblationMode::NoAugmentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoSemantics => "no_semantics",
            AblationMode::NoAugmentation => "no_augmentation",
        }
    }

    pub fn apply(self, config: &PipelineConfig) -> PipelineConfig {
        let mut c = config.clone();
        match self {
            AblationMode::Full => {}
            AblationMode::NoSemantics => c.use_semantics = false,
            AblationMode::NoAugmentation => c.use_augmentation = false,
        }
        c
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| EvalError::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// The pipeline with one component switched off; every seed is unchanged.
pub fn ablation_run(
    mode: AblationMode,
    dataset: &Dataset,
    external: &[ExternalImage],
    config: &PipelineConfig,
) -> Result<PipelineOutput, EvalError> {
    run_pipeline(dataset, external, &mode.apply(config))
}
