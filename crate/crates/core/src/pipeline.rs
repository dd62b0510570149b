//! End-to-end orchestration: shape decoding, semantic features, generator
//! training pairs, reconstruction of the averaged test set and scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{average_test_trials, Dataset, ExternalImage, Split, TrialRecord, LVC};
use crate::eval::{pairwise_win_rate, EvalError, EvalReport};
use crate::gan::{make_augmented_pairs, reconstruct_batch, train, EpochLog, GanConfig, GanModel, TrainingPair};
use crate::image::Image;
use crate::semantic::{category_average, train_semantic, SemanticConfig, SemanticNet};
use crate::shape::{CombinerFit, ShapeConfig, ShapeDecoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub shape_rois: Vec<String>,
    pub shape: ShapeConfig,
    pub semantic: SemanticConfig,
    /// `semantic_dim` is overwritten from the semantic net (or 0).
    pub gan: GanConfig,
    /// How the shape inputs of the generator's training pairs are decoded.
    /// Out-of-fold decoding gives training shapes the same error level as
    /// test shapes.
    pub train_shapes: CombinerFit,
    pub use_semantics: bool,
    pub use_augmentation: bool,
    pub eval_runs: usize,
    pub eval_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shape_rois: LVC.iter().map(|s| s.to_string()).collect(),
            shape: ShapeConfig::default(),
            semantic: SemanticConfig::default(),
            gan: GanConfig::default(),
            train_shapes: CombinerFit::CrossFitted(5),
            use_semantics: true,
            use_augmentation: true,
            eval_runs: 5,
            eval_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn rois(&self) -> Vec<&str> {
        self.shape_rois.iter().map(|s| s.as_str()).collect()
    }

    /// Generator configuration with the semantic width filled in.
    pub fn effective_gan(&self) -> GanConfig {
        GanConfig {
            semantic_dim: if self.use_semantics { self.semantic.hidden2 } else { 0 },
            ..self.gan.clone()
        }
    }
}

/// Everything a run produces, in test-record order.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub shape_decoder: ShapeDecoder,
    pub semantic_net: Option<SemanticNet>,
    pub model: GanModel,
    pub loss_log: Vec<EpochLog>,
    pub training_pairs: usize,
    pub augmented_pairs: usize,
    pub rejected_external: usize,
    pub test: TestReconstruction,
    pub report: EvalReport,
}

fn train_records(dataset: &Dataset) -> Vec<&TrialRecord> {
    dataset.records_in(Split::Train).collect()
}

/// Decoded shape image for every training record.
pub fn decode_training_shapes(
    dataset: &Dataset,
    config: &PipelineConfig,
    decoder: &ShapeDecoder,
) -> Result<Vec<Image>, EvalError> {
    let records = train_records(dataset);
    match config.train_shapes {
        CombinerFit::InSample => Ok(records
            .iter()
            .map(|r| decoder.decode_shape(&r.voxels))
            .collect::<Result<_, _>>()?),
        CombinerFit::CrossFitted(folds) => {
            let ids = dataset.stimulus_ids(Split::Train);
            let folds = folds.clamp(2, ids.len().max(2));
            let fold_of = |id: &str| ids.iter().position(|s| s == id).unwrap_or(0) % folds;
            let mut out: Vec<Option<Image>> = vec![None; records.len()];
            for f in 0..folds {
                let sub = dataset.filter_records(|r| r.split == Split::Test || fold_of(&r.stimulus_id) != f);
                let dec = ShapeDecoder::fit(&sub, &config.rois(), &config.shape)?;
                for (i, r) in records.iter().enumerate() {
                    if fold_of(&r.stimulus_id) == f {
                        out[i] = Some(dec.decode_shape(&r.voxels)?);
                    }
                }
            }
            Ok(out.into_iter().map(|o| o.expect("every fold decoded")).collect())
        }
    }
}

/// Generator training set: one pair per training record, plus augmented
/// pairs from `external` when enabled.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
    pub from_records: usize,
    pub augmented: usize,
    pub rejected: usize,
}

pub fn build_training_set(
    dataset: &Dataset,
    external: &[ExternalImage],
    config: &PipelineConfig,
    shape_decoder: &ShapeDecoder,
    semantic_net: Option<&SemanticNet>,
) -> Result<TrainingSet, EvalError> {
    let records = train_records(dataset);
    let shapes = decode_training_shapes(dataset, config, shape_decoder)?;
    let voxels: Vec<&[f32]> = records.iter().map(|r| r.voxels.as_slice()).collect();
    let features = match semantic_net.filter(|_| config.use_semantics) {
        Some(net) => Some(net.features_batch(&voxels)?),
        None => None,
    };
    let mut pairs = Vec::with_capacity(records.len() + external.len());
    for (i, (r, shape)) in records.iter().zip(shapes).enumerate() {
        let target = dataset
            .image(&r.stimulus_id)
            .ok_or_else(|| EvalError::Config(format!("no stimulus image for {}", r.stimulus_id)))?
            .clone();
        let semantic = features.as_ref().map_or_else(Vec::new, |f| f[i].values.clone());
        pairs.push(TrainingPair {
            shape,
            semantic,
            target,
        });
    }
    let from_records = pairs.len();
    let (mut augmented, mut rejected) = (0, 0);
    if config.use_augmentation && !external.is_empty() {
        let labels: Vec<usize> = records.iter().map(|r| r.category_id).collect();
        let seen: BTreeSet<usize> = labels.iter().copied().collect();
        let averages = features.as_ref().map(|f| category_average(f, &labels)).transpose()?;
        let aug = make_augmented_pairs(external, averages.as_ref(), &seen, config.shape.patch_size)?;
        augmented = aug.pairs.len();
        rejected = aug.rejected;
        pairs.extend(aug.pairs);
    }
    Ok(TrainingSet {
        pairs,
        from_records,
        augmented,
        rejected,
    })
}

/// Reconstructions of the trial-averaged test set.
#[derive(Clone, Debug)]
pub struct TestReconstruction {
    pub test_ids: Vec<String>,
    pub truths: Vec<Image>,
    pub decoded_shapes: Vec<Image>,
    pub reconstructions: Vec<Image>,
}

pub fn reconstruct_test_set(
    dataset: &Dataset,
    model: &GanModel,
    shape_decoder: &ShapeDecoder,
    semantic_net: Option<&SemanticNet>,
) -> Result<TestReconstruction, EvalError> {
    let data = average_test_trials(dataset);
    let test: Vec<&TrialRecord> = data.records_in(Split::Test).collect();
    let voxels: Vec<&[f32]> = test.iter().map(|r| r.voxels.as_slice()).collect();
    let reconstructions = reconstruct_batch(model, shape_decoder, semantic_net, &voxels)?;
    let decoded_shapes = voxels
        .iter()
        .map(|v| shape_decoder.decode_shape(v))
        .collect::<Result<Vec<_>, _>>()?;
    let test_ids: Vec<String> = test.iter().map(|r| r.stimulus_id.clone()).collect();
    let truths = test_ids
        .iter()
        .map(|id| {
            data.image(id)
                .cloned()
                .ok_or_else(|| EvalError::Config(format!("no stimulus image for {id}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(TestReconstruction {
        test_ids,
        truths,
        decoded_shapes,
        reconstructions,
    })
}

/// Runs every stage on `dataset`. Test trials are averaged per stimulus
/// before decoding.
pub fn run_pipeline(
    dataset: &Dataset,
    external: &[ExternalImage],
    config: &PipelineConfig,
) -> Result<PipelineOutput, EvalError> {
    let data = average_test_trials(dataset);
    let shape_decoder = ShapeDecoder::fit(&data, &config.rois(), &config.shape)?;
    let semantic_net = if config.use_semantics {
        Some(train_semantic(&data, &config.semantic)?)
    } else {
        None
    };
    let set = build_training_set(&data, external, config, &shape_decoder, semantic_net.as_ref())?;
    let (model, loss_log) = train(&set.pairs, &config.effective_gan())?;
    let test = reconstruct_test_set(&data, &model, &shape_decoder, semantic_net.as_ref())?;
    let report = pairwise_win_rate(&test.reconstructions, &test.truths, config.eval_runs, config.eval_seed)?;
    Ok(PipelineOutput {
        shape_decoder,
        semantic_net,
        model,
        loss_log,
        training_pairs: set.from_records,
        augmented_pairs: set.augmented,
        rejected_external: set.rejected,
        test,
        report,
    })
}
