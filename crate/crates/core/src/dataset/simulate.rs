//! Synthetic visual cortex: parametric shape stimuli and linear voxel
//! encoders. Lower areas see the patch grid, higher areas mostly the
//! category.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, RoiLayout, Split, TrialRecord, HVC, LVC, REQUIRED_ROIS};
use crate::image::Image;
use crate::numeric::Matrix;
use crate::patch::{extract_patch_features, PatchGrid};

pub const MAX_TEMPLATES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStyle {
    /// Category-specific grey levels with oriented stripes on the figure.
    Textured,
    /// Flat figure on flat ground; both levels rise with the category index.
    IntensityCoded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub categories: usize,
    pub train_stimuli: usize,
    pub test_stimuli: usize,
    pub train_trials: usize,
    pub test_trials: usize,
    pub external_images: usize,
    pub voxels: BTreeMap<String, usize>,
    pub noise_sigma: BTreeMap<String, f32>,
    pub style: ImageStyle,
    /// Every category draws the same template, so only intensity or texture
    /// tells categories apart.
    pub shared_template: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let voxels = REQUIRED_ROIS
            .iter()
            .map(|&r| (r.to_string(), if LVC.contains(&r) { 500 } else { 400 }))
            .collect();
        let noise_sigma = [
            ("V1", 0.6),
            ("V2", 0.8),
            ("V3", 1.0),
            ("LOC", 0.8),
            ("FFA", 0.8),
            ("PPA", 0.8),
        ]
        .iter()
        .map(|&(r, s)| (r.to_string(), s))
        .collect();
        Self {
            image_size: 32,
            patch_size: 8,
            categories: 10,
            train_stimuli: 500,
            test_stimuli: 50,
            train_trials: 1,
            test_trials: 5,
            external_images: 0,
            voxels,
            noise_sigma,
            style: ImageStyle::Textured,
            shared_template: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn with_noise(mut self, sigma: f32) -> Self {
        for v in self.noise_sigma.values_mut() {
            *v = sigma;
        }
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: String| Err(DatasetError::Config(m));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return err(format!("image size {} must be a power of two ≥ 16", self.image_size));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "patch size {} must divide {}",
                self.patch_size, self.image_size
            ));
        }
        if self.categories == 0 {
            return err("at least one category is required".into());
        }
        if !self.shared_template && self.categories > MAX_TEMPLATES {
            return err(format!(
                "{} categories exceed the {MAX_TEMPLATES} available templates",
                self.categories
            ));
        }
        if self.train_trials == 0 || self.test_trials == 0 {
            return err("trial counts must be positive".into());
        }
        for roi in REQUIRED_ROIS {
            match self.voxels.get(roi) {
                Some(&n) if n > 0 => {}
                _ => return err(format!("voxel count for {roi} missing or zero")),
            }
            match self.noise_sigma.get(roi) {
                Some(&s) if s >= 0.0 && s.is_finite() => {}
                _ => return err(format!("noise sigma for {roi} missing or negative")),
            }
        }
        for k in self.voxels.keys().chain(self.noise_sigma.keys()) {
            if !REQUIRED_ROIS.contains(&k.as_str()) {
                return err(format!("unknown ROI {k:?} in simulator config"));
            }
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn layout(&self) -> Result<RoiLayout, DatasetError> {
        let sizes: Vec<(&str, usize)> = REQUIRED_ROIS
            .iter()
            .map(|&r| (r, self.voxels.get(r).copied().unwrap_or(0)))
            .collect();
        RoiLayout::from_sizes(&sizes)
    }
}

/// Hidden generative parameters, exposed for oracle checks.
#[derive(Clone, Debug)]
pub struct SimulationTruth {
    /// `A_k` for LVC ROIs, `d_k × g²`.
    pub shape_encoders: BTreeMap<String, Matrix>,
    /// `E_k` for HVC ROIs, `d_k × C`.
    pub category_encoders: BTreeMap<String, Matrix>,
    /// `F_k` for HVC ROIs, `d_k × g²`.
    pub leak_encoders: BTreeMap<String, Matrix>,
    pub patches: BTreeMap<String, PatchGrid>,
}

/// Labelled image without voxel data, used for augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalImage {
    pub image: Image,
    pub category_id: usize,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: SimulationTruth,
    pub external: Vec<ExternalImage>,
}

pub const HVC_SHAPE_LEAK: f64 = 0.1;

pub fn simulate(config: &SyntheticConfig) -> Result<Simulation, DatasetError> {
    config.validate()?;
    let layout = config.layout()?;
    let g2 = config.grid_side().pow(2);
    let c = config.categories;
    let rng_for = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(stream);
        r
    };

    let mut enc = rng_for(0);
    let mut random_matrix = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut enc);
            z * scale
        })
    };
    let col_scale = 1.0 / (g2 as f64).sqrt();
    let mut shape_encoders = BTreeMap::new();
    let mut category_encoders = BTreeMap::new();
    let mut leak_encoders = BTreeMap::new();
    for roi in REQUIRED_ROIS {
        let d = config.voxels[roi];
        if LVC.contains(&roi) {
            shape_encoders.insert(roi.to_string(), random_matrix(d, g2, col_scale));
        } else {
            category_encoders.insert(roi.to_string(), random_matrix(d, c, 1.0));
            leak_encoders.insert(roi.to_string(), random_matrix(d, g2, col_scale));
        }
    }
    let truth_encoders = (shape_encoders, category_encoders, leak_encoders);

    let mut stim_rng = rng_for(1);
    let mut noise_rng = rng_for(2);
    let mut stimuli = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut patches = BTreeMap::new();
    let mut records = Vec::new();
    let categories: Vec<String> = (0..c).map(|i| format!("category_{i:02}")).collect();

    for (split, count, trials, prefix) in [
        (Split::Train, config.train_stimuli, config.train_trials, "train"),
        (Split::Test, config.test_stimuli, config.test_trials, "test"),
    ] {
        for i in 0..count {
            let id = format!("{prefix}_{i:04}");
            let category = i % c;
            let (image, mask) = draw_stimulus(config, category, &mut stim_rng);
            let p =
                extract_patch_features(&mask, config.patch_size).map_err(|e| DatasetError::Config(e.to_string()))?;
            let clean = encode(&truth_encoders, &p, category, c);
            for t in 0..trials {
                let voxels = add_noise(&clean, config, &mut noise_rng);
                records.push(TrialRecord {
                    stimulus_id: id.clone(),
                    category_id: category,
                    split,
                    trial_index: t,
                    voxels,
                });
            }
            stimuli.insert(id.clone(), image);
            masks.insert(id.clone(), mask);
            patches.insert(id, p);
        }
    }

    let mut ext_rng = rng_for(3);
    let external = (0..config.external_images)
        .map(|i| {
            let category = i % c;
            let (image, _) = draw_stimulus(config, category, &mut ext_rng);
            ExternalImage {
                image,
                category_id: category,
            }
        })
        .collect();

    let dataset = Dataset::new(layout, categories, records, stimuli, masks)?;
    let (shape_encoders, category_encoders, leak_encoders) = truth_encoders;
    Ok(Simulation {
        dataset,
        truth: SimulationTruth {
            shape_encoders,
            category_encoders,
            leak_encoders,
            patches,
        },
        external,
    })
}

type Encoders = (
    BTreeMap<String, Matrix>,
    BTreeMap<String, Matrix>,
    BTreeMap<String, Matrix>,
);

/// Noise-free voxel pattern in layout order, accumulated in f64.
fn encode(enc: &Encoders, p: &PatchGrid, category: usize, n_categories: usize) -> Vec<f64> {
    let (shape, cat, leak) = enc;
    let pv: Vec<f64> = p.values().iter().map(|&v| v as f64).collect();
    let mut out = Vec::new();
    for roi in REQUIRED_ROIS {
        if LVC.contains(&roi) {
            out.extend(matvec(&shape[roi], &pv));
        } else {
            debug_assert!(HVC.contains(&roi));
            let e = &cat[roi];
            let f = matvec(&leak[roi], &pv);
            debug_assert_eq!(e.cols(), n_categories);
            out.extend((0..e.rows()).map(|r| e.get(r, category) + HVC_SHAPE_LEAK * f[r]));
        }
    }
    out
}

/// `A·p` with left-to-right f64 accumulation per row.
pub fn matvec(a: &Matrix, p: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(p).map(|(x, y)| x * y).sum())
        .collect()
}

fn add_noise(clean: &[f64], config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(clean.len());
    let mut offset = 0;
    for roi in REQUIRED_ROIS {
        let d = config.voxels[roi];
        let sigma = config.noise_sigma[roi] as f64;
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("sigma validated");
        for &x in &clean[offset..offset + d] {
            let e = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            out.push((x + e) as f32);
        }
        offset += d;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    Disk,
    WideEllipse,
    TallEllipse,
    Square,
    WideRect,
    TallRect,
    TriangleUp,
    TriangleDown,
    Diamond,
    Cross,
    Ring,
    HalfDisk,
}

const TEMPLATES: [Template; MAX_TEMPLATES] = [
    Template::Disk,
    Template::Square,
    Template::TriangleUp,
    Template::Cross,
    Template::WideRect,
    Template::Ring,
    Template::TallEllipse,
    Template::Diamond,
    Template::TriangleDown,
    Template::HalfDisk,
    Template::WideEllipse,
    Template::TallRect,
];

impl Template {
    /// Membership in unit coordinates (`v` grows downwards).
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Template::Disk => r2 <= 1.0,
            Template::WideEllipse => (u / 1.3).powi(2) + (v / 0.7).powi(2) <= 1.0,
            Template::TallEllipse => (u / 0.7).powi(2) + (v / 1.3).powi(2) <= 1.0,
            Template::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Template::WideRect => u.abs() <= 1.2 && v.abs() <= 0.55,
            Template::TallRect => u.abs() <= 0.55 && v.abs() <= 1.2,
            Template::TriangleUp => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8 * 1.1,
            Template::TriangleDown => (-0.8..=1.0).contains(&v) && u.abs() <= (1.0 - v) / 1.8 * 1.1,
            Template::Diamond => u.abs() + v.abs() <= 1.1,
            Template::Cross => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
            Template::Ring => (0.36..=1.0).contains(&r2),
            Template::HalfDisk => r2 <= 1.0 && v <= 0.2,
        }
    }
}

fn draw_stimulus(config: &SyntheticConfig, category: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let s = config.image_size;
    let sf = s as f64;
    let template = if config.shared_template {
        TEMPLATES[0]
    } else {
        TEMPLATES[category]
    };
    let cx = sf / 2.0 + rng.random_range(-0.1..=0.1) * sf;
    let cy = sf / 2.0 + rng.random_range(-0.1..=0.1) * sf;
    let radius = 0.28 * sf * rng.random_range(0.8..=1.2);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);

    let c = config.categories;
    let frac = if c > 1 { category as f64 / (c - 1) as f64 } else { 0.0 };
    let (bg, fg, stripe) = match config.style {
        ImageStyle::IntensityCoded => {
            let bg = 0.1 + 0.5 * frac;
            (bg, bg + 0.3, 0.0)
        }
        ImageStyle::Textured => {
            let bg = 0.1 + 0.25 * ((category as f64 * 0.618_034) % 1.0);
            (bg, bg + 0.45, 0.08)
        }
    };
    let theta = PI * category as f64 / c as f64;
    let period = sf / 4.0;

    let mut mask = Image::filled(s, s, 0.0);
    let mut image = Image::filled(s, s, bg as f32);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if template.contains((px - cx) / radius, (py - cy) / radius) {
                mask.set(x, y, 1.0);
                let w = 2.0 * PI * (px * theta.cos() + py * theta.sin()) / period + phase;
                image.set(x, y, (fg + stripe * w.sin()) as f32);
            }
        }
    }
    (image.clamp_unit().quantized(), mask)
}
