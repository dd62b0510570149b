//! Category classifier on higher visual cortex voxels. Its penultimate
//! layer is the semantic feature space fed to the generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, RoiRange, Split, TrialRecord, HVC};
use crate::numeric::{adam_update, read_u32, AdamConfig, AdamState, Graph, Tensor, TensorError, Var, LOG_FLOOR};

const MAGIC: &[u8; 4] = b"SEM1";

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Numeric(#[from] TensorError),
    #[error("semantic configuration: {0}")]
    Config(String),
    #[error("record has {found} voxels, net expects {expected}")]
    Layout { expected: usize, found: usize },
    #[error("no semantic average for category {0}")]
    MissingCategory(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    pub rois: Vec<String>,
    pub hidden1: usize,
    /// Semantic feature dimension.
    pub hidden2: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            rois: HVC.iter().map(|s| s.to_string()).collect(),
            hidden1: 256,
            hidden2: 64,
            epochs: 40,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    config: SemanticConfig,
    inputs: Vec<RoiRange>,
    total_voxels: usize,
    n_classes: usize,
}

/// Penultimate-layer activation, or an average of several.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeature {
    pub values: Vec<f32>,
    pub category_average: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticNet {
    header: NetHeader,
    /// Input standardization, per selected voxel.
    mean: Tensor,
    scale: Tensor,
    /// `[w1, b1, w2, b2, w3, b3]`, weights stored `[fan_in, fan_out]`.
    params: Vec<Tensor>,
}

struct Forward {
    params: Vec<Var>,
    features: Var,
    scores: Var,
}

impl SemanticNet {
    fn new(header: NetHeader, mean: Tensor, scale: Tensor, rng: &mut ChaCha8Rng) -> Self {
        let c = &header.config;
        let in_dim = mean.numel();
        let dims = [
            (in_dim, c.hidden1),
            (c.hidden1, c.hidden2),
            (c.hidden2, header.n_classes),
        ];
        let mut params = Vec::new();
        for (fan_in, fan_out) in dims {
            let bound = 1.0 / (fan_in as f32).sqrt();
            params.push(Tensor::uniform(&[fan_in, fan_out], bound, rng).with_requires_grad(true));
            params.push(Tensor::uniform(&[fan_out], bound, rng).with_requires_grad(true));
        }
        Self {
            header,
            mean,
            scale,
            params,
        }
    }

    pub fn config(&self) -> &SemanticConfig {
        &self.header.config
    }

    pub fn feature_dim(&self) -> usize {
        self.header.config.hidden2
    }

    pub fn n_classes(&self) -> usize {
        self.header.n_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn select(&self, voxels: &[f32]) -> Result<Vec<f32>, SemanticError> {
        if voxels.len() != self.header.total_voxels {
            return Err(SemanticError::Layout {
                expected: self.header.total_voxels,
                found: voxels.len(),
            });
        }
        let (mu, sc) = (self.mean.data(), self.scale.data());
        Ok(self
            .header
            .inputs
            .iter()
            .flat_map(|r| voxels[r.start..r.end].iter())
            .zip(mu.iter().zip(sc))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect())
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, TensorError> {
        let p: Vec<Var> = self.params.iter().map(|t| g.leaf(t)).collect();
        let h1 = g.matmul(x, p[0])?;
        let h1 = g.add_row_bias(h1, p[1])?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, p[2])?;
        let h2 = g.add_row_bias(h2, p[3])?;
        let features = g.tanh(h2);
        let z = g.matmul(features, p[4])?;
        let z = g.add_row_bias(z, p[5])?;
        let scores = g.sigmoid(z);
        Ok(Forward {
            params: p,
            features,
            scores,
        })
    }

    fn run(&self, records: &[&[f32]]) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), SemanticError> {
        let in_dim = self.mean.numel();
        let mut data = Vec::with_capacity(records.len() * in_dim);
        for r in records {
            data.extend(self.select(r)?);
        }
        let mut g = Graph::new();
        let x = g.constant(&[records.len(), in_dim], data)?;
        let f = self.forward(&mut g, x)?;
        let split = |v: Var, w: usize| g.value(v).chunks(w).map(|c| c.to_vec()).collect::<Vec<_>>();
        Ok((split(f.features, self.feature_dim()), split(f.scores, self.n_classes())))
    }

    /// Penultimate activations (after tanh).
    pub fn features(&self, voxels: &[f32]) -> Result<SemanticFeature, SemanticError> {
        Ok(self.features_batch(&[voxels])?.remove(0))
    }

    pub fn features_batch(&self, records: &[&[f32]]) -> Result<Vec<SemanticFeature>, SemanticError> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .run(records)?
            .0
            .into_iter()
            .map(|values| SemanticFeature {
                values,
                category_average: false,
            })
            .collect())
    }

    /// Sigmoid class scores.
    pub fn scores(&self, voxels: &[f32]) -> Result<Vec<f32>, SemanticError> {
        Ok(self.run(&[voxels])?.1.remove(0))
    }

    pub fn classify(&self, voxels: &[f32]) -> Result<usize, SemanticError> {
        Ok(argmax(&self.scores(voxels)?))
    }

    pub fn classify_batch(&self, records: &[&[f32]]) -> Result<Vec<usize>, SemanticError> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.run(records)?.1.iter().map(|s| argmax(s)).collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), SemanticError> {
        w.write_all(MAGIC)?;
        let json = serde_json::to_vec(&self.header)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        self.mean.write_to(w)?;
        self.scale.write_to(w)?;
        for p in &self.params {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, SemanticError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("missing SEM1 header".into()).into());
        }
        let len = read_u32(r)? as usize;
        if len > 1 << 20 {
            return Err(TensorError::Format("oversized SEM1 config block".into()).into());
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: NetHeader = serde_json::from_slice(&json)?;
        let mean = Tensor::read_from(r)?;
        let scale = Tensor::read_from(r)?;
        let in_dim: usize = header.inputs.iter().map(|r| r.end - r.start).sum();
        let c = &header.config;
        let shapes: [&[usize]; 6] = [
            &[in_dim, c.hidden1],
            &[c.hidden1],
            &[c.hidden1, c.hidden2],
            &[c.hidden2],
            &[c.hidden2, header.n_classes],
            &[header.n_classes],
        ];
        if mean.shape() != [in_dim] || scale.shape() != [in_dim] {
            return Err(TensorError::Format("standardization tensors have wrong shape".into()).into());
        }
        let mut params = Vec::with_capacity(6);
        for s in shapes {
            let t = Tensor::read_from(r)?;
            if t.shape() != s {
                return Err(TensorError::Format(format!("layer shape {:?}, expected {s:?}", t.shape())).into());
            }
            params.push(t.with_requires_grad(true));
        }
        Ok(Self {
            header,
            mean,
            scale,
            params,
        })
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Trains on every training record of `dataset`.
pub fn train_semantic(dataset: &Dataset, config: &SemanticConfig) -> Result<SemanticNet, SemanticError> {
    let n_classes = dataset.category_count();
    if n_classes < 2 {
        return Err(SemanticError::Config(format!(
            "need ≥ 2 categories, dataset has {n_classes}"
        )));
    }
    if config.hidden2 < 2 || config.hidden1 == 0 || config.batch == 0 {
        return Err(SemanticError::Config("hidden sizes must be ≥ 2 and batch ≥ 1".into()));
    }
    if config.rois.is_empty() {
        return Err(SemanticError::Config("no input ROIs".into()));
    }
    let layout = dataset.layout();
    let mut inputs = Vec::new();
    for roi in &config.rois {
        let range = layout.range(roi).ok_or_else(|| DatasetError::MissingRoi(roi.clone()))?;
        inputs.push(RoiRange {
            name: roi.clone(),
            start: range.start,
            end: range.end,
        });
    }
    let records: Vec<&TrialRecord> = dataset.records_in(Split::Train).collect();
    if records.is_empty() {
        return Err(SemanticError::Config("no training records".into()));
    }
    let in_dim: usize = inputs.iter().map(|r| r.end - r.start).sum();
    let raw: Vec<Vec<f32>> = records
        .iter()
        .map(|r| {
            inputs
                .iter()
                .flat_map(|i| r.voxels[i.start..i.end].iter().copied())
                .collect()
        })
        .collect();

    let n = raw.len() as f64;
    let mut mean = vec![0f64; in_dim];
    for row in &raw {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; in_dim];
    for row in &raw {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let scale: Vec<f32> = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-8 {
                (1.0 / sd) as f32
            } else {
                1.0
            }
        })
        .collect();
    let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
    let x: Vec<Vec<f32>> = raw
        .iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((&v, &m), &s)| (v - m) * s)
                .collect()
        })
        .collect();

    let header = NetHeader {
        config: config.clone(),
        inputs,
        total_voxels: layout.total_voxels(),
        n_classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = SemanticNet::new(
        header,
        Tensor::new(&[in_dim], mean)?,
        Tensor::new(&[in_dim], scale)?,
        &mut rng,
    );
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState> = net.params.iter().map(AdamState::for_param).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let b = batch.len();
            let mut data = Vec::with_capacity(b * in_dim);
            let mut y = vec![0f32; b * n_classes];
            for (i, &idx) in batch.iter().enumerate() {
                data.extend_from_slice(&x[idx]);
                y[i * n_classes + records[idx].category_id] = 1.0;
            }
            let mut g = Graph::new();
            let xv = g.constant(&[b, in_dim], data)?;
            let f = net.forward(&mut g, xv)?;
            let loss = bce(&mut g, f.scores, y, b, n_classes)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(TensorError::NonFinite(format!("semantic loss {value}")).into());
            }
            g.backward(loss)?;
            for ((p, st), &v) in net.params.iter_mut().zip(&mut states).zip(&f.params) {
                let grad = g.grad(v).expect("param grad").to_vec();
                adam_update(p, &grad, st, &adam)?;
            }
        }
    }
    Ok(net)
}

/// Mean over classes and samples of the per-class binary cross-entropy.
pub fn bce(g: &mut Graph, scores: Var, targets: Vec<f32>, b: usize, c: usize) -> Result<Var, TensorError> {
    let inv: Vec<f32> = targets.iter().map(|t| 1.0 - t).collect();
    let y = g.constant(&[b, c], targets)?;
    let y_inv = g.constant(&[b, c], inv)?;
    let log_p = g.log_clamped(scores, LOG_FLOOR);
    let q = g.affine(scores, -1.0, 1.0);
    let log_q = g.log_clamped(q, LOG_FLOOR);
    let a = g.mul(y, log_p)?;
    let bq = g.mul(y_inv, log_q)?;
    let s = g.add(a, bq)?;
    let m = g.mean(s);
    Ok(g.affine(m, -1.0, 0.0))
}

/// Mean semantic feature per category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAverages {
    map: BTreeMap<usize, SemanticFeature>,
}

impl CategoryAverages {
    pub fn get(&self, category: usize) -> Result<&SemanticFeature, SemanticError> {
        self.map.get(&category).ok_or(SemanticError::MissingCategory(category))
    }

    pub fn categories(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn category_average(features: &[SemanticFeature], labels: &[usize]) -> Result<CategoryAverages, SemanticError> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(SemanticError::Config(format!(
            "{} features with {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].values.len();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        if f.values.len() != dim {
            return Err(SemanticError::Config("features differ in length".into()));
        }
        let e = acc.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, &v) in e.0.iter_mut().zip(&f.values) {
            *a += v as f64;
        }
        e.1 += 1;
    }
    Ok(CategoryAverages {
        map: acc
            .into_iter()
            .map(|(l, (s, n))| {
                let values = s.into_iter().map(|v| (v / n as f64) as f32).collect();
                (
                    l,
                    SemanticFeature {
                        values,
                        category_average: true,
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{simulate, SyntheticConfig};

    fn small_sim(seed: u64) -> Dataset {
        let mut cfg = SyntheticConfig {
            image_size: 16,
            categories: 4,
            train_stimuli: 200,
            test_stimuli: 40,
            seed,
            ..Default::default()
        };
        for v in cfg.voxels.values_mut() {
            *v = 40;
        }
        simulate(&cfg).unwrap().dataset
    }

    fn small_config() -> SemanticConfig {
        SemanticConfig {
            hidden1: 32,
            hidden2: 8,
            epochs: 30,
            ..Default::default()
        }
    }

    fn accuracy(net: &SemanticNet, d: &Dataset, split: Split) -> f64 {
        let recs: Vec<&TrialRecord> = d.records_in(split).collect();
        let v: Vec<&[f32]> = recs.iter().map(|r| r.voxels.as_slice()).collect();
        let pred = net.classify_batch(&v).unwrap();
        pred.iter().zip(&recs).filter(|(p, r)| **p == r.category_id).count() as f64 / recs.len() as f64
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 1.0, 0.0]), 1);
        assert_eq!(argmax(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn bce_of_half_scores_is_ln2() {
        let mut g = Graph::new();
        let s = g.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let l = bce(&mut g, s, vec![1.0, 0.0], 1, 2).unwrap();
        assert!((g.scalar(l) - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn learns_separable_categories_deterministically() {
        let d = small_sim(1);
        let a = train_semantic(&d, &small_config()).unwrap();
        let b = train_semantic(&d, &small_config()).unwrap();
        assert_eq!(a, b);
        assert!(accuracy(&a, &d, Split::Test) >= 0.95);
        let f = a.features(&d.records()[0].voxels).unwrap();
        assert_eq!(f.values.len(), 8);
        assert!(f.values.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        let d = small_sim(2);
        let mut recs = d.records().to_vec();
        let mut labels: Vec<usize> = recs
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.category_id)
            .collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let mut it = labels.into_iter();
        for r in recs.iter_mut().filter(|r| r.split == Split::Train) {
            r.category_id = it.next().unwrap();
        }
        let net = train_semantic(&d.with_records(recs).unwrap(), &small_config()).unwrap();
        let acc = accuracy(&net, &d, Split::Test);
        assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn single_category_is_rejected() {
        let mut cfg = SyntheticConfig {
            image_size: 16,
            categories: 1,
            train_stimuli: 4,
            test_stimuli: 1,
            ..Default::default()
        };
        for v in cfg.voxels.values_mut() {
            *v = 4;
        }
        let d = simulate(&cfg).unwrap().dataset;
        assert!(matches!(
            train_semantic(&d, &small_config()),
            Err(SemanticError::Config(_))
        ));
    }

    #[test]
    fn averages() {
        let f = |v: Vec<f32>| SemanticFeature {
            values: v,
            category_average: false,
        };
        let avg = category_average(
            &[f(vec![0.5, -0.25]), f(vec![-0.5, 0.25]), f(vec![0.1, 0.2])],
            &[3, 3, 1],
        )
        .unwrap();
        assert_eq!(avg.get(3).unwrap().values, vec![0.0, 0.0]);
        assert_eq!(avg.get(1).unwrap().values, vec![0.1, 0.2]);
        assert!(avg.get(1).unwrap().category_average);
        assert!(matches!(avg.get(0), Err(SemanticError::MissingCategory(0))));
    }

    #[test]
    fn persistence_round_trip() {
        let d = small_sim(3);
        let cfg = SemanticConfig {
            epochs: 1,
            ..small_config()
        };
        let net = train_semantic(&d, &cfg).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(SemanticNet::read_from(&mut buf.as_slice()).unwrap(), net);
        assert!(matches!(net.features(&[0.0; 3]), Err(SemanticError::Layout { .. })));
    }
}
