//! Conditional generator with skip connections, pair discriminator, losses,
//! alternating training and augmentation.

mod augment;
mod loss;
mod nets;
mod train;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::numeric::{read_u32, AdamConfig, Tensor, TensorError};
use crate::semantic::{SemanticError, SemanticNet};
use crate::shape::{ShapeDecoder, ShapeError};

pub use augment::{make_augmented_pairs, Augmentation};
pub use loss::{discriminator_loss, discriminator_loss_value, generator_loss, generator_loss_value, GeneratorLoss};
pub use nets::{
    batch_inputs, BatchNormParams, ConvLayer, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Phase, Trace,
    LEAKY_SLOPE,
};
pub use train::{
    batches, learning_rate, loss_log_csv, train, BatchLosses, EpochLog, GeneratorPass, Trainer, LOSS_LOG_HEADER,
};

const MAGIC: &[u8; 4] = b"GAN1";

#[derive(Debug, Error)]
pub enum GanError {
    #[error("GAN configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numeric(#[from] TensorError),
    #[error(transparent)]
    ShapeDecoder(#[from] ShapeError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    /// Patch discriminator depth; ignored when `global_discriminator` is set.
    pub disc_depth: usize,
    pub global_discriminator: bool,
    /// 0 trains a pure shape-to-image translator.
    pub semantic_dim: usize,
    pub lambda_img: f32,
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub decay_start: usize,
    pub recalibrate_bn: bool,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            disc_channels: 16,
            disc_depth: 3,
            global_discriminator: false,
            semantic_dim: 64,
            lambda_img: 100.0,
            adam: AdamConfig::default(),
            batch: 10,
            epochs: 200,
            decay_start: 120,
            recalibrate_bn: true,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let err = |m: String| Err(GanError::Config(m));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return err(format!("image size {} must be a power of two ≥ 16", self.image_size));
        }
        if self.decay_start >= self.epochs {
            return err(format!(
                "decay_start {} must precede the final epoch {}",
                self.decay_start, self.epochs
            ));
        }
        if self.batch == 0 || self.base_channels == 0 || self.disc_channels == 0 {
            return err("batch and channel widths must be positive".into());
        }
        if !(self.lambda_img >= 0.0) || !(self.adam.lr > 0.0) {
            return err("lambda_img must be ≥ 0 and lr > 0".into());
        }
        let max = self.image_size.trailing_zeros() as usize;
        if !self.global_discriminator && !(2..=max).contains(&self.disc_depth) {
            return err(format!("discriminator depth {} outside 2..={max}", self.disc_depth));
        }
        Ok(())
    }

    pub fn disc_layers(&self) -> usize {
        if self.global_discriminator {
            self.image_size.trailing_zeros() as usize
        } else {
            self.disc_depth
        }
    }
}

/// One generator training example: decoded or derived shape image, semantic
/// vector, target stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub shape: Image,
    pub semantic: Vec<f32>,
    pub target: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

fn write_bn_stats<W: Write>(w: &mut W, layers: &[ConvLayer]) -> Result<(), GanError> {
    for bn in layers.iter().filter_map(|l| l.bn.as_ref()) {
        let c = bn.running_mean.len();
        Tensor::new(&[c], bn.running_mean.clone())?.write_to(w)?;
        Tensor::new(&[c], bn.running_var.clone())?.write_to(w)?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, params: Vec<&mut Tensor>) -> Result<(), GanError> {
    for p in params {
        let t = Tensor::read_from(r)?;
        if t.shape() != p.shape() {
            return Err(TensorError::Format(format!("tensor {:?} where {:?} expected", t.shape(), p.shape())).into());
        }
        *p = t.with_requires_grad(true);
    }
    Ok(())
}

fn read_bn_stats<R: Read>(r: &mut R, bns: Vec<&mut BatchNormParams>) -> Result<(), GanError> {
    for bn in bns {
        for slot in [&mut bn.running_mean, &mut bn.running_var] {
            let t = Tensor::read_from(r)?;
            if t.shape() != [slot.len()] {
                return Err(TensorError::Format("running statistics of wrong length".into()).into());
            }
            *slot = t.into_data();
        }
    }
    Ok(())
}

impl GanModel {
    pub fn generate(&self, shapes: &[&Image], semantics: &[&[f32]]) -> Result<Vec<Image>, GanError> {
        self.generator.generate(shapes, semantics)
    }

    /// Parameter norms of both networks, for failure reports.
    pub fn diagnostics(&self) -> String {
        let norm = |ps: Vec<&Tensor>| -> Vec<String> {
            ps.iter()
                .map(|t| {
                    let n: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    format!("{n:.4e}")
                })
                .collect()
        };
        format!(
            "generator parameter norms [{}]; discriminator parameter norms [{}]",
            norm(self.generator.params()).join(", "),
            norm(self.discriminator.params()).join(", ")
        )
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), GanError> {
        w.write_all(MAGIC)?;
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for p in self.generator.params() {
            p.write_to(w)?;
        }
        let g_layers: Vec<ConvLayer> = self
            .generator
            .encoder
            .iter()
            .chain(&self.generator.decoder)
            .cloned()
            .collect();
        write_bn_stats(w, &g_layers)?;
        for p in self.discriminator.params() {
            p.write_to(w)?;
        }
        write_bn_stats(w, &self.discriminator.layers)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, GanError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("missing GAN1 header".into()).into());
        }
        let len = read_u32(r)? as usize;
        if len > 1 << 20 {
            return Err(TensorError::Format("oversized GAN1 config block".into()).into());
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let config: GanConfig = serde_json::from_slice(&json)?;
        config.validate()?;
        // the throwaway initialization only fixes tensor shapes
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(
            GeneratorSpec {
                image_size: config.image_size,
                base_channels: config.base_channels,
                semantic_dim: config.semantic_dim,
            },
            &mut rng,
        )?;
        let mut discriminator = Discriminator::new(
            DiscriminatorSpec {
                image_size: config.image_size,
                base_channels: config.disc_channels,
                layers: config.disc_layers(),
            },
            &mut rng,
        )?;
        read_params(r, generator.params_mut())?;
        read_bn_stats(r, generator.bn_params_mut())?;
        read_params(r, discriminator.params_mut())?;
        read_bn_stats(r, discriminator.bn_params_mut())?;
        Ok(Self {
            config,
            generator,
            discriminator,
        })
    }
}

/// `G(decode_shape(x), semantic_features(x))`; the semantic net is unused
/// when the generator takes no semantic input.
pub fn reconstruct(
    model: &GanModel,
    shape_decoder: &ShapeDecoder,
    semantic: Option<&SemanticNet>,
    voxels: &[f32],
) -> Result<Image, GanError> {
    Ok(reconstruct_batch(model, shape_decoder, semantic, &[voxels])?.remove(0))
}

pub fn reconstruct_batch(
    model: &GanModel,
    shape_decoder: &ShapeDecoder,
    semantic: Option<&SemanticNet>,
    records: &[&[f32]],
) -> Result<Vec<Image>, GanError> {
    let shapes = records
        .iter()
        .map(|v| shape_decoder.decode_shape(v))
        .collect::<Result<Vec<_>, _>>()?;
    let sems: Vec<Vec<f32>> = match (model.config.semantic_dim, semantic) {
        (0, _) => Vec::new(),
        (_, Some(net)) => net.features_batch(records)?.into_iter().map(|f| f.values).collect(),
        (dim, None) => {
            return Err(GanError::Config(format!(
                "generator expects {dim} semantic inputs but no semantic net was given"
            )))
        }
    };
    let shape_refs: Vec<&Image> = shapes.iter().collect();
    let sem_refs: Vec<&[f32]> = sems.iter().map(|s| s.as_slice()).collect();
    model.generate(&shape_refs, &sem_refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_pairs(n: usize, size: usize, sem_dim: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| {
                let mut shape = Image::filled(size, size, 0.0);
                let mut target = Image::filled(size, size, 0.2);
                let off = i % (size / 2);
                for y in off..off + size / 2 {
                    for x in size / 4..3 * size / 4 {
                        shape.set(x, y, 1.0);
                        target.set(x, y, 0.8);
                    }
                }
                TrainingPair {
                    shape,
                    semantic: (0..sem_dim).map(|k| ((i + k) % 3) as f32 * 0.5 - 0.5).collect(),
                    target,
                }
            })
            .collect()
    }

    fn toy_config() -> GanConfig {
        GanConfig {
            image_size: 16,
            base_channels: 4,
            disc_channels: 4,
            semantic_dim: 3,
            batch: 4,
            epochs: 3,
            decay_start: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.decay_start = c.epochs;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.image_size = 8;
        assert!(c.validate().is_err());
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn freeze_contract_is_bitwise() {
        let pairs = toy_pairs(8, 16, 3);
        let mut t = Trainer::new(&toy_config(), &pairs).unwrap();
        for _ in 0..2 {
            let batch = [0usize, 1, 2, 3];
            let pass = t.generator_forward(&batch).unwrap();
            let g_before: Vec<Tensor> = t.model.generator.params().into_iter().cloned().collect();
            let d_before: Vec<Tensor> = t.model.discriminator.params().into_iter().cloned().collect();
            t.discriminator_step(&pass, 2e-4).unwrap();
            let g_mid: Vec<Tensor> = t.model.generator.params().into_iter().cloned().collect();
            assert_eq!(g_before, g_mid);
            let d_mid: Vec<Tensor> = t.model.discriminator.params().into_iter().cloned().collect();
            assert_ne!(d_before, d_mid);
            t.generator_step(pass, 2e-4).unwrap();
            let d_after: Vec<Tensor> = t.model.discriminator.params().into_iter().cloned().collect();
            assert_eq!(d_mid, d_after);
            let g_after: Vec<Tensor> = t.model.generator.params().into_iter().cloned().collect();
            assert_ne!(g_mid, g_after);
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let pairs = toy_pairs(6, 16, 3);
        let (a, log_a) = train(&pairs, &toy_config()).unwrap();
        let (b, log_b) = train(&pairs, &toy_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 3);
        let csv = loss_log_csv(&log_a);
        assert!(csv.starts_with(LOSS_LOG_HEADER));
        assert_eq!(csv.lines().count(), 4);

        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let back = GanModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
        let shape = &pairs[0].shape;
        let out = back.generate(&[shape], &[&pairs[0].semantic]).unwrap();
        let again = a.generate(&[shape], &[&pairs[0].semantic]).unwrap();
        assert_eq!(out, again);
        assert!(out[0].pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
