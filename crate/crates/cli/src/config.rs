//! `key = value` settings shared by config files and command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ssgan::dataset::{expand_roi_set, ImageStyle, SyntheticConfig, Threshold};
use ssgan::eval::RoiAblationConfig;
use ssgan::pipeline::PipelineConfig;
use ssgan::shape::{CombinerFit, CombinerMode, Lambda};

use crate::CliError;

/// Every accepted key with a one-line description, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; fans out to simulation, training and evaluation"),
    ("dataset", "input dataset directory"),
    ("out", "output directory"),
    ("external", "directory of external images (aug_NNNN.pgm + labels.json)"),
    ("threads", "worker threads (default 1)"),
    (
        "tolerance",
        "accept parallel reductions with up to 1e-6 drift (true/false)",
    ),
    ("no_semantics", "drop the semantic input of the generator (true/false)"),
    ("no_augmentation", "drop external-image training pairs (true/false)"),
    ("sim.image_size", "simulated image side S"),
    ("sim.patch_size", "simulated patch side m"),
    ("sim.categories", "number of categories"),
    ("sim.train_stimuli", "training stimuli"),
    ("sim.test_stimuli", "test stimuli"),
    ("sim.train_trials", "trials per training stimulus"),
    ("sim.test_trials", "trials per test stimulus"),
    ("sim.external_images", "external images to generate"),
    ("sim.noise", "noise sigma applied to every ROI"),
    ("sim.style", "textured | intensity"),
    (
        "sim.shared_template",
        "all categories share one shape template (true/false)",
    ),
    (
        "shape.rois",
        "comma-separated ROIs or sets (V1,V2,V3,LOC,FFA,PPA,LVC,HVC,VC)",
    ),
    ("shape.patch_size", "patch side m"),
    ("shape.lambda", "trace:<a> (a·mean Gram diagonal) or abs:<value>"),
    ("shape.combiner", "least_squares | convex"),
    ("shape.combiner_fit", "in_sample | cross:<folds>"),
    (
        "shape.train_fit",
        "decoding of generator training shapes: in_sample | cross:<folds>",
    ),
    ("semantic.rois", "comma-separated ROIs or sets"),
    ("semantic.hidden1", "first hidden width"),
    ("semantic.hidden2", "semantic feature width"),
    ("semantic.epochs", "training epochs"),
    ("semantic.lr", "Adam learning rate"),
    ("semantic.batch", "batch size"),
    ("gan.epochs", "training epochs"),
    ("gan.decay_start", "last epoch at the full learning rate"),
    ("gan.batch", "batch size"),
    ("gan.lr", "Adam learning rate"),
    ("gan.beta1", "Adam beta1"),
    ("gan.beta2", "Adam beta2"),
    ("gan.lambda_img", "weight of the L1 image term"),
    ("gan.base_channels", "generator base width"),
    ("gan.disc_channels", "discriminator base width"),
    ("gan.disc_depth", "patch discriminator depth"),
    (
        "gan.global_discriminator",
        "score the whole image instead of patches (true/false)",
    ),
    (
        "gan.recalibrate_bn",
        "recompute normalization statistics after training (true/false)",
    ),
    ("eval.runs", "pairwise-comparison runs"),
    ("eval.validation", "training stimuli reserved by the ROI ablation"),
    ("preprocess.threshold", "mask threshold: auto | <value in [0,1]>"),
    ("report.montage_rows", "rows in montage images"),
];

#[derive(Clone, Debug)]
pub struct Settings {
    /// Key-value pairs in the order they were applied.
    pub applied: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub external: Option<PathBuf>,
    pub threads: usize,
    pub tolerance: bool,
    pub sim: SyntheticConfig,
    pub pipeline: PipelineConfig,
    pub roi: RoiAblationConfig,
    pub threshold: Threshold,
    pub montage_rows: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            applied: Vec::new(),
            seed: None,
            dataset: None,
            out: None,
            external: None,
            threads: 1,
            tolerance: false,
            sim: SyntheticConfig::default(),
            pipeline: PipelineConfig::default(),
            roi: RoiAblationConfig::default(),
            threshold: Threshold::Auto,
            montage_rows: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for key {key:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!(
            "invalid value {value:?} for key {key:?} (expected true or false)"
        )),
    }
}

fn parse_rois(key: &str, value: &str) -> Result<Vec<String>, String> {
    let mut out: Vec<String> = Vec::new();
    for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        for roi in expand_roi_set(name).map_err(|e| format!("{key}: {e}"))? {
            if !out.iter().any(|r| r == roi) {
                out.push(roi.to_string());
            }
        }
    }
    if out.is_empty() {
        return Err(format!("{key}: no ROIs given"));
    }
    Ok(out)
}

fn parse_fit(key: &str, value: &str) -> Result<CombinerFit, String> {
    match value.split_once(':') {
        None if value == "in_sample" => Ok(CombinerFit::InSample),
        Some(("cross", k)) => Ok(CombinerFit::CrossFitted(parse(key, k)?)),
        _ => Err(format!(
            "invalid value {value:?} for key {key:?} (expected in_sample or cross:<folds>)"
        )),
    }
}

impl Settings {
    /// Applies one setting; the error names the problem without location.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let p = &mut self.pipeline;
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "external" => self.external = Some(PathBuf::from(value)),
            "threads" => self.threads = parse::<usize>(key, value)?.max(1),
            "tolerance" => self.tolerance = parse_bool(key, value)?,
            "no_semantics" => p.use_semantics = !parse_bool(key, value)?,
            "no_augmentation" => p.use_augmentation = !parse_bool(key, value)?,
            "sim.image_size" => self.sim.image_size = parse(key, value)?,
            "sim.patch_size" => self.sim.patch_size = parse(key, value)?,
            "sim.categories" => self.sim.categories = parse(key, value)?,
            "sim.train_stimuli" => self.sim.train_stimuli = parse(key, value)?,
            "sim.test_stimuli" => self.sim.test_stimuli = parse(key, value)?,
            "sim.train_trials" => self.sim.train_trials = parse(key, value)?,
            "sim.test_trials" => self.sim.test_trials = parse(key, value)?,
            "sim.external_images" => self.sim.external_images = parse(key, value)?,
            "sim.noise" => {
                let s: f32 = parse(key, value)?;
                self.sim = self.sim.clone().with_noise(s);
            }
            "sim.style" => {
                self.sim.style = match value {
                    "textured" => ImageStyle::Textured,
                    "intensity" => ImageStyle::IntensityCoded,
                    _ => {
                        return Err(format!(
                            "invalid value {value:?} for key {key:?} (expected textured or intensity)"
                        ))
                    }
                }
            }
            "sim.shared_template" => self.sim.shared_template = parse_bool(key, value)?,
            "shape.rois" => p.shape_rois = parse_rois(key, value)?,
            "shape.patch_size" => {
                p.shape.patch_size = parse(key, value)?;
                self.roi.shape.patch_size = p.shape.patch_size;
            }
            "shape.lambda" => {
                let lambda = match value.split_once(':') {
                    Some(("trace", a)) => Lambda::TraceScaled(parse(key, a)?),
                    Some(("abs", a)) => Lambda::Absolute(parse(key, a)?),
                    _ => {
                        return Err(format!(
                            "invalid value {value:?} for key {key:?} (expected trace:<a> or abs:<v>)"
                        ))
                    }
                };
                p.shape.lambda = lambda;
                self.roi.shape.lambda = lambda;
            }
            "shape.combiner" => {
                let mode = match value {
                    "least_squares" => CombinerMode::LeastSquares,
                    "convex" => CombinerMode::Convex,
                    _ => {
                        return Err(format!(
                            "invalid value {value:?} for key {key:?} (expected least_squares or convex)"
                        ))
                    }
                };
                p.shape.combiner = mode;
                self.roi.shape.combiner = mode;
            }
            "shape.combiner_fit" => {
                p.shape.combiner_fit = parse_fit(key, value)?;
                self.roi.shape.combiner_fit = p.shape.combiner_fit;
            }
            "shape.train_fit" => p.train_shapes = parse_fit(key, value)?,
            "semantic.rois" => p.semantic.rois = parse_rois(key, value)?,
            "semantic.hidden1" => p.semantic.hidden1 = parse(key, value)?,
            "semantic.hidden2" => p.semantic.hidden2 = parse(key, value)?,
            "semantic.epochs" => p.semantic.epochs = parse(key, value)?,
            "semantic.lr" => p.semantic.lr = parse(key, value)?,
            "semantic.batch" => p.semantic.batch = parse(key, value)?,
            "gan.epochs" => p.gan.epochs = parse(key, value)?,
            "gan.decay_start" => p.gan.decay_start = parse(key, value)?,
            "gan.batch" => p.gan.batch = parse(key, value)?,
            "gan.lr" => p.gan.adam.lr = parse(key, value)?,
            "gan.beta1" => p.gan.adam.beta1 = parse(key, value)?,
            "gan.beta2" => p.gan.adam.beta2 = parse(key, value)?,
            "gan.lambda_img" => p.gan.lambda_img = parse(key, value)?,
            "gan.base_channels" => p.gan.base_channels = parse(key, value)?,
            "gan.disc_channels" => p.gan.disc_channels = parse(key, value)?,
            "gan.disc_depth" => p.gan.disc_depth = parse(key, value)?,
            "gan.global_discriminator" => p.gan.global_discriminator = parse_bool(key, value)?,
            "gan.recalibrate_bn" => p.gan.recalibrate_bn = parse_bool(key, value)?,
            "eval.runs" => {
                p.eval_runs = parse(key, value)?;
                self.roi.runs = p.eval_runs;
            }
            "eval.validation" => self.roi.validation = parse(key, value)?,
            "preprocess.threshold" => {
                self.threshold = match value {
                    "auto" => Threshold::Auto,
                    v => {
                        let t: f32 = parse(key, v)?;
                        if !(0.0..=1.0).contains(&t) {
                            return Err(format!("threshold {t} outside [0, 1]"));
                        }
                        Threshold::Fixed(t)
                    }
                }
            }
            "report.montage_rows" => self.montage_rows = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        self.applied.push((key.to_string(), value.to_string()));
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let located =
                |msg: String| CliError::Usage(format!("{}:{}: {msg}: `{}`", path.display(), no + 1, raw.trim()));
            let Some((key, value)) = line.split_once('=') else {
                return Err(located("expected `key = value`".into()));
            };
            self.set(key.trim(), value.trim()).map_err(located)?;
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        self.set(key, value)
            .map_err(|msg| CliError::Usage(format!("flag `{key}={value}`: {msg}")))
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed = ...`)".into()))
    }

    /// Propagates the master seed into every stage.
    pub fn seeded(mut self) -> Self {
        if let Some(s) = self.seed {
            self.sim.seed = s;
            self.pipeline.semantic.seed = s;
            self.pipeline.gan.seed = s;
            self.pipeline.eval_seed = s;
            self.roi.seed = s;
            self.roi.semantic = self.pipeline.semantic.clone();
        } else {
            self.roi.semantic = self.pipeline.semantic.clone();
        }
        self
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out or `out = ...`)".into()))
    }

    pub fn dataset_dir(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("a dataset directory is required (--dataset or `dataset = ...`)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_is_accepted() {
        let samples = [
            ("seed", "3"),
            ("sim.style", "intensity"),
            ("shape.lambda", "abs:0.5"),
            ("shape.combiner_fit", "cross:4"),
            ("shape.train_fit", "in_sample"),
            ("shape.combiner", "convex"),
            ("preprocess.threshold", "0.4"),
            ("shape.rois", "LVC"),
            ("semantic.rois", "HVC,V1"),
            ("tolerance", "true"),
            ("gan.global_discriminator", "false"),
        ];
        for (key, _) in KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("1", |(_, v)| *v);
            let value = if matches!(
                *key,
                "no_semantics" | "no_augmentation" | "sim.shared_template" | "gan.recalibrate_bn"
            ) {
                "true"
            } else {
                value
            };
            let mut s = Settings::default();
            assert!(s.set(key, value).is_ok(), "{key} = {value}");
        }
    }

    #[test]
    fn roi_sets_expand_without_duplicates() {
        let mut s = Settings::default();
        s.set("semantic.rois", "HVC, LOC, V1").unwrap();
        assert_eq!(s.pipeline.semantic.rois, vec!["LOC", "FFA", "PPA", "V1"]);
        assert!(s.set("shape.rois", "V9").is_err());
    }

    #[test]
    fn file_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 4  # trailing\n\ngan.epochs = 3\nbogus = 1\n").unwrap();
        let mut s = Settings::default();
        let err = s.apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":5:") && err.contains("bogus = 1"), "{err}");
        assert_eq!(s.seed, Some(4));
        assert_eq!(s.pipeline.gan.epochs, 3);
    }

    #[test]
    fn seed_fans_out() {
        let mut s = Settings::default();
        s.set("seed", "11").unwrap();
        let s = s.seeded();
        assert_eq!(
            (s.sim.seed, s.pipeline.gan.seed, s.pipeline.semantic.seed, s.roi.seed),
            (11, 11, 11, 11)
        );
    }
}
