//! Shape decoding from lower visual cortex: per-ROI linear decoders onto the
//! patch grid, a per-pixel combiner across ROIs, and block upsampling.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Split, TrialRecord};
use crate::image::Image;
use crate::numeric::{read_u32, ridge_solve, Matrix, Tensor, TensorError};
use crate::patch::{extract_patch_features, PatchError, PatchGrid};

const MAGIC: &[u8; 4] = b"SHD1";

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Numeric(#[from] TensorError),
    #[error("shape decoder configuration: {0}")]
    Config(String),
    #[error("record has {found} voxels, decoder expects {expected}")]
    Layout { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ridge penalty for the base decoders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Lambda {
    Absolute(f64),
    /// Multiple of the mean diagonal of the centred voxel Gram matrix.
    TraceScaled(f64),
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda::TraceScaled(1e-2)
    }
}

impl Lambda {
    fn resolve(self, centred: &Matrix) -> f64 {
        match self {
            Lambda::Absolute(l) => l,
            Lambda::TraceScaled(a) => {
                let trace: f64 = centred.data().iter().map(|v| v * v).sum();
                a * trace / centred.cols() as f64
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerMode {
    /// Unconstrained per-pixel least squares, minimum-norm when singular.
    #[default]
    LeastSquares,
    /// Weights on the probability simplex.
    Convex,
}

/// Which base predictions the combiner is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "folds", rename_all = "snake_case")]
pub enum CombinerFit {
    /// Predictions of the final decoders on their own training records.
    InSample,
    /// Out-of-fold predictions from decoders refitted on `k − 1` folds.
    CrossFitted(usize),
}

impl Default for CombinerFit {
    fn default() -> Self {
        CombinerFit::CrossFitted(5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub patch_size: usize,
    pub lambda: Lambda,
    pub combiner: CombinerMode,
    pub combiner_fit: CombinerFit,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            lambda: Lambda::default(),
            combiner: CombinerMode::default(),
            combiner_fit: CombinerFit::default(),
        }
    }
}

/// Affine map from one ROI's voxels to the flattened patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseShapeDecoder {
    pub roi: String,
    start: usize,
    end: usize,
    side: usize,
    /// `d_k × g²`.
    weights: Tensor,
    bias: Tensor,
    lambda: f64,
}

impl BaseShapeDecoder {
    pub fn voxel_count(&self) -> usize {
        self.end - self.start
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Unclipped affine output.
    pub fn predict_raw(&self, voxels: &[f32]) -> Vec<f64> {
        let x = &voxels[self.start..self.end];
        let g2 = self.side * self.side;
        let w = self.weights.data();
        let mut out: Vec<f64> = self.bias.data().iter().map(|&b| b as f64).collect();
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            for (o, &wij) in out.iter_mut().zip(&w[i * g2..(i + 1) * g2]) {
                *o += xi * wij as f64;
            }
        }
        out
    }

    pub fn predict(&self, voxels: &[f32]) -> PatchGrid {
        let v = self.predict_raw(voxels).into_iter().map(|v| v as f32).collect();
        PatchGrid::new(self.side, v).expect("side matches weights")
    }
}

/// Centred ridge fit `p ≈ Wᵀx + b`; returns `(W, b, λ)`.
pub fn fit_affine(x: &Matrix, p: &Matrix, lambda: Lambda) -> Result<(Matrix, Vec<f64>, f64), ShapeError> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(ShapeError::Config(format!("need ≥ 2 training records, got {n}")));
    }
    let col_mean = |m: &Matrix| -> Vec<f64> {
        let mut mu = vec![0f64; m.cols()];
        for r in 0..m.rows() {
            for (a, v) in mu.iter_mut().zip(m.row(r)) {
                *a += v;
            }
        }
        mu.iter().map(|s| s / m.rows() as f64).collect()
    };
    let (mx, mp) = (col_mean(x), col_mean(p));
    let xc = Matrix::from_fn(n, d, |i, j| x.get(i, j) - mx[j]);
    let pc = Matrix::from_fn(n, p.cols(), |i, j| p.get(i, j) - mp[j]);
    let lam = lambda.resolve(&xc);
    let w = ridge_solve(&xc, &pc, lam)?;
    let bias = (0..p.cols())
        .map(|j| mp[j] - (0..d).map(|i| mx[i] * w.get(i, j)).sum::<f64>())
        .collect();
    Ok((w, bias, lam))
}

fn patch_targets(dataset: &Dataset, records: &[&TrialRecord], m: usize) -> Result<Matrix, ShapeError> {
    let mut rows = Vec::new();
    let mut g2 = 0;
    for r in records {
        let grid = extract_patch_features(&dataset.shape_mask(&r.stimulus_id)?, m)?;
        g2 = grid.values().len();
        rows.extend(grid.values().iter().map(|&v| v as f64));
    }
    Ok(Matrix::from_vec(records.len(), g2, rows)?)
}

fn voxel_matrix(records: &[&TrialRecord], start: usize, end: usize) -> Matrix {
    Matrix::from_fn(records.len(), end - start, |i, j| records[i].voxels[start + j] as f64)
}

fn fit_one(
    records: &[&TrialRecord],
    targets: &Matrix,
    roi: &str,
    range: std::ops::Range<usize>,
    side: usize,
    lambda: Lambda,
) -> Result<BaseShapeDecoder, ShapeError> {
    let x = voxel_matrix(records, range.start, range.end);
    let (w, b, lam) = fit_affine(&x, targets, lambda)?;
    Ok(BaseShapeDecoder {
        roi: roi.to_string(),
        start: range.start,
        end: range.end,
        side,
        weights: Tensor::new(&[w.rows(), w.cols()], w.data().iter().map(|&v| v as f32).collect())?,
        bias: Tensor::new(&[b.len()], b.iter().map(|&v| v as f32).collect())?,
        lambda: lam,
    })
}

/// One decoder per ROI, fitted on every training record.
pub fn fit_base_decoders(
    dataset: &Dataset,
    rois: &[&str],
    patch_size: usize,
    lambda: Lambda,
) -> Result<Vec<BaseShapeDecoder>, ShapeError> {
    let records: Vec<&TrialRecord> = dataset.records_in(Split::Train).collect();
    let targets = patch_targets(dataset, &records, patch_size)?;
    let side = (targets.cols() as f64).sqrt().round() as usize;
    rois.iter()
        .map(|roi| {
            let range = dataset
                .layout()
                .range(roi)
                .ok_or_else(|| DatasetError::MissingRoi(roi.to_string()))?;
            fit_one(&records, &targets, roi, range, side, lambda)
        })
        .collect()
}

/// Per-pixel weights `w[pixel][k]`, no intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCombiner {
    side: usize,
    k: usize,
    weights: Vec<f32>,
}

impl ShapeCombiner {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rois(&self) -> usize {
        self.k
    }

    pub fn weight(&self, pixel: usize, k: usize) -> f32 {
        self.weights[pixel * self.k + k]
    }

    /// `Σ_k w_k p*_k` per pixel, clipped.
    pub fn combine(&self, predictions: &[PatchGrid]) -> PatchGrid {
        let g2 = self.side * self.side;
        let values = (0..g2)
            .map(|px| {
                predictions
                    .iter()
                    .enumerate()
                    .map(|(k, p)| self.weight(px, k) as f64 * p.values()[px] as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        PatchGrid::new(self.side, values).expect("side matches")
    }
}

/// Fits the combiner on `predictions[k][n]` (ROI k, sample n) against
/// `targets[n]`. A pixel whose predictions are all zero gets weights 1/K.
pub fn fit_combiner(
    predictions: &[Vec<PatchGrid>],
    targets: &[PatchGrid],
    mode: CombinerMode,
) -> Result<ShapeCombiner, ShapeError> {
    let k = predictions.len();
    if k == 0 {
        return Err(ShapeError::Config("combiner needs at least one ROI".into()));
    }
    let n = targets.len();
    let side = targets.first().map(|t| t.side()).unwrap_or(0);
    if n == 0
        || predictions
            .iter()
            .any(|p| p.len() != n || p.iter().any(|g| g.side() != side))
    {
        return Err(ShapeError::Config("combiner inputs differ in size".into()));
    }
    let g2 = side * side;
    let mut weights = Vec::with_capacity(g2 * k);
    for px in 0..g2 {
        let z = Matrix::from_fn(n, k, |i, j| predictions[j][i].values()[px] as f64);
        let t = Matrix::from_fn(n, 1, |i, _| targets[i].values()[px] as f64);
        let w = if z.data().iter().all(|&v| v == 0.0) {
            vec![1.0 / k as f64; k]
        } else {
            match mode {
                CombinerMode::LeastSquares => ridge_solve(&z, &t, 0.0)?.data().to_vec(),
                CombinerMode::Convex => convex_least_squares(&z, &t)?,
            }
        };
        weights.extend(w.into_iter().map(|v| v as f32));
    }
    Ok(ShapeCombiner { side, k, weights })
}

fn residual(z: &Matrix, t: &Matrix, w: &[f64]) -> f64 {
    (0..z.rows())
        .map(|i| {
            let r: f64 = z.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - t.get(i, 0);
            r * r
        })
        .sum()
}

/// Least squares over the simplex by enumerating supports: on each support
/// the sum-to-one problem is solved by eliminating the last weight, and the
/// best nonnegative candidate wins.
fn convex_least_squares(z: &Matrix, t: &Matrix) -> Result<Vec<f64>, ShapeError> {
    let (n, k) = (z.rows(), z.cols());
    if k > 16 {
        return Err(ShapeError::Config(format!(
            "convex combiner supports ≤ 16 ROIs, got {k}"
        )));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|j| support & (1 << j) != 0).collect();
        let last = *idx.last().unwrap();
        let mut w = vec![0f64; k];
        if idx.len() == 1 {
            w[last] = 1.0;
        } else {
            let free = &idx[..idx.len() - 1];
            let a = Matrix::from_fn(n, free.len(), |i, j| z.get(i, free[j]) - z.get(i, last));
            let b = Matrix::from_fn(n, 1, |i, _| t.get(i, 0) - z.get(i, last));
            let v = ridge_solve(&a, &b, 0.0)?;
            let mut rest = 1.0;
            for (j, &f) in free.iter().enumerate() {
                w[f] = v.get(j, 0);
                rest -= w[f];
            }
            w[last] = rest;
            if w.iter().any(|&x| x < -1e-12) {
                continue;
            }
            for x in &mut w {
                *x = x.max(0.0);
            }
        }
        let r = residual(z, t, &w);
        if best.as_ref().is_none_or(|(br, _)| r < *br) {
            best = Some((r, w));
        }
    }
    Ok(best.expect("singletons are always feasible").1)
}

/// Base decoders plus combiner for a fixed ROI list.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDecoder {
    patch_size: usize,
    total_voxels: usize,
    decoders: Vec<BaseShapeDecoder>,
    combiner: ShapeCombiner,
}

impl ShapeDecoder {
    pub fn fit(dataset: &Dataset, rois: &[&str], config: &ShapeConfig) -> Result<Self, ShapeError> {
        if rois.is_empty() {
            return Err(ShapeError::Config("no ROIs given".into()));
        }
        let m = config.patch_size;
        let records: Vec<&TrialRecord> = dataset.records_in(Split::Train).collect();
        let targets = patch_targets(dataset, &records, m)?;
        let side = (targets.cols() as f64).sqrt().round() as usize;
        let ranges = rois
            .iter()
            .map(|roi| {
                dataset
                    .layout()
                    .range(roi)
                    .ok_or_else(|| DatasetError::MissingRoi(roi.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let decoders = rois
            .iter()
            .zip(&ranges)
            .map(|(roi, range)| fit_one(&records, &targets, roi, range.clone(), side, config.lambda))
            .collect::<Result<Vec<_>, _>>()?;

        let n = records.len();
        let mut preds: Vec<Vec<Option<PatchGrid>>> = vec![vec![None; n]; rois.len()];
        match config.combiner_fit {
            CombinerFit::InSample => {
                for (k, dec) in decoders.iter().enumerate() {
                    for (i, r) in records.iter().enumerate() {
                        preds[k][i] = Some(dec.predict(&r.voxels));
                    }
                }
            }
            CombinerFit::CrossFitted(folds) => {
                let folds = folds.clamp(2, n);
                if n / folds < 1 || n - n.div_ceil(folds) < 2 {
                    return Err(ShapeError::Config(format!(
                        "{n} records cannot be split into {folds} folds"
                    )));
                }
                for f in 0..folds {
                    let (train_i, held): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % folds != f);
                    let sub: Vec<&TrialRecord> = train_i.iter().map(|&i| records[i]).collect();
                    let sub_t = Matrix::from_fn(sub.len(), targets.cols(), |i, j| targets.get(train_i[i], j));
                    for (k, (roi, range)) in rois.iter().zip(&ranges).enumerate() {
                        let dec = fit_one(&sub, &sub_t, roi, range.clone(), side, config.lambda)?;
                        for &i in &held {
                            preds[k][i] = Some(dec.predict(&records[i].voxels));
                        }
                    }
                }
            }
        }
        let preds: Vec<Vec<PatchGrid>> = preds
            .into_iter()
            .map(|v| v.into_iter().map(|p| p.expect("every record predicted")).collect())
            .collect();
        let target_grids = (0..n)
            .map(|i| PatchGrid::new(side, targets.row(i).iter().map(|&v| v as f32).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let combiner = fit_combiner(&preds, &target_grids, config.combiner)?;
        Ok(Self {
            patch_size: m,
            total_voxels: dataset.layout().total_voxels(),
            decoders,
            combiner,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn image_size(&self) -> usize {
        self.combiner.side * self.patch_size
    }

    pub fn decoders(&self) -> &[BaseShapeDecoder] {
        &self.decoders
    }

    pub fn combiner(&self) -> &ShapeCombiner {
        &self.combiner
    }

    fn check(&self, voxels: &[f32]) -> Result<(), ShapeError> {
        if voxels.len() != self.total_voxels {
            return Err(ShapeError::Layout {
                expected: self.total_voxels,
                found: voxels.len(),
            });
        }
        Ok(())
    }

    /// Combined, clipped patch grid.
    pub fn decode_grid(&self, voxels: &[f32]) -> Result<PatchGrid, ShapeError> {
        self.check(voxels)?;
        let preds: Vec<PatchGrid> = self.decoders.iter().map(|d| d.predict(voxels)).collect();
        Ok(self.combiner.combine(&preds))
    }

    /// Full-resolution shape image.
    pub fn decode_shape(&self, voxels: &[f32]) -> Result<Image, ShapeError> {
        Ok(self.decode_grid(voxels)?.upsample(self.patch_size))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ShapeError> {
        w.write_all(MAGIC)?;
        for v in [
            self.patch_size,
            self.combiner.side,
            self.total_voxels,
            self.decoders.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for d in &self.decoders {
            w.write_all(&(d.roi.len() as u32).to_le_bytes())?;
            w.write_all(d.roi.as_bytes())?;
            w.write_all(&(d.start as u32).to_le_bytes())?;
            w.write_all(&(d.end as u32).to_le_bytes())?;
            w.write_all(&d.lambda.to_le_bytes())?;
        }
        for d in &self.decoders {
            d.weights.write_to(w)?;
            d.bias.write_to(w)?;
        }
        let g2 = self.combiner.side * self.combiner.side;
        Tensor::new(&[g2, self.combiner.k], self.combiner.weights.clone())?.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ShapeError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("missing SHD1 header".into()).into());
        }
        let patch_size = read_u32(r)? as usize;
        let side = read_u32(r)? as usize;
        let total_voxels = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        if k == 0 || k > 64 || patch_size == 0 {
            return Err(TensorError::Format(format!("implausible SHD1 header (k = {k})")).into());
        }
        let mut table = Vec::with_capacity(k);
        for _ in 0..k {
            let len = read_u32(r)? as usize;
            if len > 64 {
                return Err(TensorError::Format("ROI name too long".into()).into());
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
            let start = read_u32(r)? as usize;
            let end = read_u32(r)? as usize;
            let mut lam = [0u8; 8];
            r.read_exact(&mut lam)?;
            if start >= end || end > total_voxels {
                return Err(TensorError::Format(format!("bad range for {name}")).into());
            }
            table.push((name, start, end, f64::from_le_bytes(lam)));
        }
        let g2 = side * side;
        let mut decoders = Vec::with_capacity(k);
        for (roi, start, end, lambda) in table {
            let weights = Tensor::read_from(r)?;
            let bias = Tensor::read_from(r)?;
            if weights.shape() != [end - start, g2] || bias.shape() != [g2] {
                return Err(TensorError::Format(format!("decoder {roi} has wrong tensor shapes")).into());
            }
            decoders.push(BaseShapeDecoder {
                roi,
                start,
                end,
                side,
                weights,
                bias,
                lambda,
            });
        }
        let cw = Tensor::read_from(r)?;
        if cw.shape() != [g2, k] {
            return Err(TensorError::Format("combiner has wrong shape".into()).into());
        }
        Ok(Self {
            patch_size,
            total_voxels,
            decoders,
            combiner: ShapeCombiner {
                side,
                k,
                weights: cw.into_data(),
            },
        })
    }
}
