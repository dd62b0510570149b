use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use ssgan::dataset::{
    average_test_trials, binarize_mask, load_dataset, load_external_images, save_dataset, save_external_images,
    simulate as run_simulation, Dataset, DatasetError, ExternalImage, Split, Threshold, TrialRecord,
};
use ssgan::eval::{
    ablation_run, comparison_montage, metrics_csv, pairwise_win_rate, roi_ablation, AblationMode, EvalError, MetricRow,
    METRICS_HEADER,
};
use ssgan::gan::{loss_log_csv, train, GanError, GanModel};
use ssgan::image::{Image, ImageError};
use ssgan::numeric::TensorError;
use ssgan::pipeline::{build_training_set, reconstruct_test_set, PipelineConfig};
use ssgan::semantic::{self, SemanticError, SemanticNet};
use ssgan::shape::{ShapeDecoder, ShapeError};

use crate::config::Settings;
use crate::manifest::{io_error, Manifest};
use crate::{AblateKind, CliError, Metric};

pub const SHAPE_FILE: &str = "shape.shd";
pub const SEMANTIC_FILE: &str = "semantic.sem";
pub const GAN_FILE: &str = "gan.gan";

fn tensor_numeric(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite(_))
}

fn shape_numeric(e: &ShapeError) -> bool {
    matches!(e, ShapeError::Numeric(t) if tensor_numeric(t))
}

fn semantic_numeric(e: &SemanticError) -> bool {
    matches!(e, SemanticError::Numeric(t) if tensor_numeric(t))
}

fn gan_numeric(e: &GanError) -> bool {
    match e {
        GanError::NonFinite(_) => true,
        GanError::Numeric(t) => tensor_numeric(t),
        GanError::ShapeDecoder(s) => shape_numeric(s),
        GanError::Semantic(s) => semantic_numeric(s),
        _ => false,
    }
}

fn classify(numeric: bool, e: impl std::fmt::Display) -> CliError {
    if numeric {
        CliError::Numeric(e.to_string())
    } else {
        CliError::Usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        classify(false, e)
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        classify(false, e)
    }
}

impl From<ShapeError> for CliError {
    fn from(e: ShapeError) -> Self {
        classify(shape_numeric(&e), e)
    }
}

impl From<SemanticError> for CliError {
    fn from(e: SemanticError) -> Self {
        classify(semantic_numeric(&e), e)
    }
}

impl From<GanError> for CliError {
    fn from(e: GanError) -> Self {
        classify(gan_numeric(&e), e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let numeric = match &e {
            EvalError::Gan(g) => gan_numeric(g),
            EvalError::ShapeDecoder(s) => shape_numeric(s),
            EvalError::Semantic(s) => semantic_numeric(s),
            _ => false,
        };
        classify(numeric, e)
    }
}

const PATH_KEYS: [&str; 3] = ["dataset", "out", "external"];

pub struct Context {
    settings: Settings,
    manifest: Manifest,
    /// Pipeline configuration as actually used, when it differs from the settings.
    effective: Option<PipelineConfig>,
}

impl Context {
    pub fn new(settings: Settings, config_file: Option<&Path>) -> Result<Self, CliError> {
        let mut manifest = Manifest::default();
        if let Some(path) = config_file {
            let root = path.parent().unwrap_or(Path::new(""));
            let name = path.file_name().map(PathBuf::from).unwrap_or_default();
            manifest.input_file("config", root, &name)?;
        }
        Ok(Self {
            settings,
            manifest,
            effective: None,
        })
    }

    fn out(&self) -> Result<PathBuf, CliError> {
        let out = self.settings.out_dir()?.to_path_buf();
        fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
        Ok(out)
    }

    /// The pipeline configuration with the generator sized for `data`.
    fn pipeline(&mut self, data: &Dataset) -> PipelineConfig {
        let mut p = self.settings.pipeline.clone();
        p.gan.image_size = data.image_size();
        self.effective = Some(p.clone());
        p
    }

    fn load_dataset(&mut self) -> Result<Dataset, CliError> {
        let dir = self.settings.dataset_dir()?.to_path_buf();
        let data = load_dataset(&dir)?;
        self.manifest.input_dir("dataset", &dir)?;
        Ok(data)
    }

    /// `--external`, else an `external/` directory beside the dataset.
    fn external_dir(&self) -> Option<PathBuf> {
        if let Some(p) = &self.settings.external {
            return Some(p.clone());
        }
        let beside = self.settings.dataset.as_ref()?.parent()?.join("external");
        beside.join("labels.json").is_file().then_some(beside)
    }

    fn load_external(&mut self, required: bool) -> Result<Vec<ExternalImage>, CliError> {
        match self.external_dir() {
            Some(dir) => {
                let images = load_external_images(&dir)?;
                self.manifest.input_dir("external", &dir)?;
                Ok(images)
            }
            None if required => Err(CliError::Usage(
                "external images are required (--external or `external = ...`)".into(),
            )),
            None => Ok(Vec::new()),
        }
    }

    /// Opens an artifact an earlier command left in the output directory.
    fn upstream(&mut self, name: &str, producer: &str) -> Result<BufReader<File>, CliError> {
        let out = self.out()?;
        let path = out.join(name);
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "missing {name} in {}; run `ssgan {producer}` first",
                out.display()
            )));
        }
        self.manifest.input_file("out", &out, Path::new(name))?;
        let file = File::open(&path).map_err(|e| io_error(&path, e))?;
        Ok(BufReader::new(file))
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let out = self.out()?;
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
        Ok(())
    }

    fn write_with(
        &mut self,
        rel: &str,
        save: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.out()?.join(rel);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut w = BufWriter::new(file);
        save(&mut w)?;
        w.flush().map_err(|e| io_error(&path, e))?;
        Ok(())
    }

    fn config_json(&self) -> Value {
        let s = &self.settings;
        let threshold = match s.threshold {
            Threshold::Auto => json!("auto"),
            Threshold::Fixed(t) => json!(t),
        };
        json!({
            "threads": s.threads,
            "tolerance": s.tolerance,
            "sim": s.sim,
            "pipeline": self.effective.as_ref().unwrap_or(&s.pipeline),
            "roi_ablation": s.roi,
            "preprocess_threshold": threshold,
            "montage_rows": s.montage_rows,
        })
    }

    /// Records `outputs` and writes `run-<command>.json`.
    fn finish(mut self, command: &str, outputs: &[&str], summary: Value) -> Result<(), CliError> {
        let out = self.out()?;
        for rel in outputs {
            self.manifest.output(&out, rel)?;
        }
        let settings: Vec<Value> = self
            .settings
            .applied
            .iter()
            .filter(|(k, _)| !PATH_KEYS.contains(&k.as_str()))
            .map(|(k, v)| json!({ "key": k, "value": v }))
            .collect();
        let doc = self.manifest.to_json(
            command,
            self.settings.seed,
            Value::Array(settings),
            self.config_json(),
            summary,
        );
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        let path = out.join(format!("run-{command}.json"));
        fs::write(&path, text).map_err(|e| io_error(&path, e))
    }
}

fn test_records(data: &Dataset) -> Vec<&TrialRecord> {
    data.records_in(Split::Test).collect()
}

fn load_image_dir(dir: &Path, ids: &[String], producer: &str) -> Result<Vec<Image>, CliError> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.pgm"));
            if !path.is_file() {
                return Err(CliError::Usage(format!(
                    "missing {}; run `ssgan {producer}` first",
                    path.display()
                )));
            }
            Ok(Image::load_pgm(&path)?)
        })
        .collect()
}

fn condition(p: &PipelineConfig) -> &'static str {
    match (p.use_semantics, p.use_augmentation) {
        (true, true) => AblationMode::Full.as_str(),
        (false, _) => AblationMode::NoSemantics.as_str(),
        (true, false) => AblationMode::NoAugmentation.as_str(),
    }
}

pub fn simulate(ctx: Context) -> Result<(), CliError> {
    ctx.settings.require_seed()?;
    let out = ctx.out()?;
    let sim = run_simulation(&ctx.settings.sim)?;
    save_dataset(&sim.dataset, &out.join("dataset"))?;
    save_external_images(&sim.external, &out.join("external"))?;
    let summary = json!({
        "records": sim.dataset.records().len(),
        "external_images": sim.external.len(),
    });
    ctx.finish("simulate", &["dataset", "external"], summary)
}

pub fn preprocess(mut ctx: Context) -> Result<(), CliError> {
    let data = average_test_trials(&ctx.load_dataset()?);
    let threshold = ctx.settings.threshold;
    let mut masks = data.masks().clone();
    let mut thresholds = serde_json::Map::new();
    let mut constant = Vec::new();
    for (id, image) in data.stimuli() {
        let b = binarize_mask(image, threshold);
        if b.constant_input {
            constant.push(id.clone());
        }
        let t = if b.threshold.is_finite() {
            json!(b.threshold)
        } else {
            Value::Null
        };
        thresholds.insert(id.clone(), t);
        masks.insert(id.clone(), b.mask);
    }
    let processed = Dataset::new(
        data.layout().clone(),
        data.categories().to_vec(),
        data.records().to_vec(),
        data.stimuli().clone(),
        masks,
    )?;
    save_dataset(&processed, &ctx.out()?.join("preprocessed"))?;
    let summary = json!({
        "records": processed.records().len(),
        "constant_images": constant,
        "thresholds": thresholds,
    });
    ctx.finish("preprocess", &["preprocessed"], summary)
}

pub fn train_shape(mut ctx: Context) -> Result<(), CliError> {
    ctx.settings.require_seed()?;
    let data = average_test_trials(&ctx.load_dataset()?);
    let p = ctx.pipeline(&data);
    let decoder = ShapeDecoder::fit(&data, &p.rois(), &p.shape)?;
    ctx.write_with(SHAPE_FILE, |w| Ok(decoder.write_to(w)?))?;
    let summary = json!({ "rois": p.shape_rois, "image_size": decoder.image_size() });
    ctx.finish("train-shape", &[SHAPE_FILE], summary)
}

pub fn train_semantic(mut ctx: Context) -> Result<(), CliError> {
    ctx.settings.require_seed()?;
    let data = average_test_trials(&ctx.load_dataset()?);
    let p = ctx.pipeline(&data);
    let net = semantic::train_semantic(&data, &p.semantic)?;
    ctx.write_with(SEMANTIC_FILE, |w| Ok(net.write_to(w)?))?;
    let test = test_records(&data);
    let voxels: Vec<&[f32]> = test.iter().map(|r| r.voxels.as_slice()).collect();
    let predicted = net.classify_batch(&voxels)?;
    let correct = test.iter().zip(&predicted).filter(|(r, &c)| r.category_id == c).count();
    let summary = json!({
        "feature_dim": net.feature_dim(),
        "test_accuracy": correct as f64 / test.len().max(1) as f64,
    });
    ctx.finish("train-semantic", &[SEMANTIC_FILE], summary)
}

fn load_semantic(ctx: &mut Context) -> Result<SemanticNet, CliError> {
    let mut r = ctx.upstream(SEMANTIC_FILE, "train-semantic")?;
    Ok(SemanticNet::read_from(&mut r)?)
}

pub fn train_gan(mut ctx: Context) -> Result<(), CliError> {
    ctx.settings.require_seed()?;
    let decoder = ShapeDecoder::read_from(&mut ctx.upstream(SHAPE_FILE, "train-shape")?)?;
    let mut p = ctx.settings.pipeline.clone();
    let semantic = if p.use_semantics {
        let net = load_semantic(&mut ctx)?;
        p.semantic.hidden2 = net.feature_dim();
        Some(net)
    } else {
        None
    };
    let data = average_test_trials(&ctx.load_dataset()?);
    p.gan.image_size = data.image_size();
    let external = if p.use_augmentation {
        ctx.load_external(false)?
    } else {
        Vec::new()
    };
    let set = build_training_set(&data, &external, &p, &decoder, semantic.as_ref())?;
    p.gan = p.effective_gan();
    ctx.effective = Some(p.clone());
    let (model, log) = train(&set.pairs, &p.gan)?;
    ctx.write_with(GAN_FILE, |w| Ok(model.write_to(w)?))?;
    ctx.write("loss_log.csv", loss_log_csv(&log).as_bytes())?;
    let summary = json!({
        "training_pairs": set.from_records,
        "augmented_pairs": set.augmented,
        "rejected_external": set.rejected,
        "semantic_dim": model.config.semantic_dim,
    });
    ctx.finish("train-gan", &[GAN_FILE, "loss_log.csv"], summary)
}

pub fn reconstruct(mut ctx: Context) -> Result<(), CliError> {
    let decoder = ShapeDecoder::read_from(&mut ctx.upstream(SHAPE_FILE, "train-shape")?)?;
    let model = GanModel::read_from(&mut ctx.upstream(GAN_FILE, "train-gan")?)?;
    let semantic = if model.config.semantic_dim > 0 {
        Some(load_semantic(&mut ctx)?)
    } else {
        None
    };
    let data = ctx.load_dataset()?;
    let test = reconstruct_test_set(&data, &model, &decoder, semantic.as_ref())?;
    for (id, (recon, shape)) in test
        .test_ids
        .iter()
        .zip(test.reconstructions.iter().zip(&test.decoded_shapes))
    {
        ctx.write(&format!("reconstructions/{id}.pgm"), &recon.encode_pgm())?;
        ctx.write(&format!("shapes/{id}.pgm"), &shape.encode_pgm())?;
    }
    let summary = json!({ "test_images": test.test_ids.len() });
    ctx.finish("reconstruct", &["reconstructions", "shapes"], summary)
}

pub fn evaluate(mut ctx: Context, metric: Metric) -> Result<(), CliError> {
    let rows = ctx.settings.montage_rows;
    let runs = ctx.settings.pipeline.eval_runs;
    let seed = ctx.settings.pipeline.eval_seed;
    match metric {
        Metric::Recon => {
            let data = average_test_trials(&ctx.load_dataset()?);
            let ids: Vec<String> = test_records(&data).iter().map(|r| r.stimulus_id.clone()).collect();
            let out = ctx.out()?;
            let recons = load_image_dir(&out.join("reconstructions"), &ids, "reconstruct")?;
            let shapes = load_image_dir(&out.join("shapes"), &ids, "reconstruct")?;
            let truths: Vec<Image> = ids
                .iter()
                .map(|id| data.image(id).cloned().unwrap_or_else(|| Image::filled(1, 1, 0.0)))
                .collect();
            let report = pairwise_win_rate(&recons, &truths, runs, seed)?;
            let cond = condition(&ctx.settings.pipeline);
            ctx.write(
                "metrics.csv",
                metrics_csv(&MetricRow::from_report("", cond, &report)).as_bytes(),
            )?;
            let montage = comparison_montage(&truths, &shapes, &recons, rows)?;
            ctx.write("montage.pgm", &montage.encode_pgm())?;
            let summary = json!({ "win_rate": report.mean_win_rate, "ssim": report.mean_ssim() });
            ctx.finish("evaluate-recon", &["metrics.csv", "montage.pgm"], summary)
        }
        Metric::Shape => {
            let decoder = ShapeDecoder::read_from(&mut ctx.upstream(SHAPE_FILE, "train-shape")?)?;
            let data = average_test_trials(&ctx.load_dataset()?);
            let test = test_records(&data);
            let mut stimuli = Vec::with_capacity(test.len());
            let mut masks = Vec::with_capacity(test.len());
            let mut decoded = Vec::with_capacity(test.len());
            for r in &test {
                stimuli.push(
                    data.image(&r.stimulus_id)
                        .cloned()
                        .unwrap_or_else(|| Image::filled(1, 1, 0.0)),
                );
                masks.push(data.shape_mask(&r.stimulus_id)?);
                decoded.push(decoder.decode_shape(&r.voxels)?);
            }
            let report = pairwise_win_rate(&decoded, &masks, runs, seed)?;
            let cond = decoder
                .decoders()
                .iter()
                .map(|d| d.roi.as_str())
                .collect::<Vec<_>>()
                .join("+");
            let csv = metrics_csv(&MetricRow::from_report("shape_", &cond, &report));
            ctx.write("metrics-shape.csv", csv.as_bytes())?;
            let montage = comparison_montage(&stimuli, &masks, &decoded, rows)?;
            ctx.write("montage-shape.pgm", &montage.encode_pgm())?;
            let summary = json!({ "shape_win_rate": report.mean_win_rate, "shape_ssim": report.mean_ssim() });
            ctx.finish("evaluate-shape", &["metrics-shape.csv", "montage-shape.pgm"], summary)
        }
    }
}

pub fn ablate(mut ctx: Context, kind: AblateKind) -> Result<(), CliError> {
    ctx.settings.require_seed()?;
    let data = ctx.load_dataset()?;
    let (name, rows) = match kind {
        AblateKind::Roi => {
            let rows = roi_ablation(&data, &ctx.settings.roi)?;
            ("roi", MetricRow::from_roi_rows(&rows))
        }
        AblateKind::Semantics | AblateKind::Augmentation => {
            let (name, other) = if kind == AblateKind::Semantics {
                ("semantics", AblationMode::NoSemantics)
            } else {
                ("augmentation", AblationMode::NoAugmentation)
            };
            let external = ctx.load_external(kind == AblateKind::Augmentation)?;
            let mut base = ctx.pipeline(&data);
            base.use_semantics = true;
            base.use_augmentation = true;
            ctx.effective = Some(base.clone());
            let mut rows = Vec::new();
            for mode in [AblationMode::Full, other] {
                let run = ablation_run(mode, &data, &external, &base)?;
                rows.extend(MetricRow::from_report("", mode.as_str(), &run.report));
            }
            (name, rows)
        }
    };
    let file = format!("ablate-{name}.csv");
    ctx.write(&file, metrics_csv(&rows).as_bytes())?;
    ctx.finish(
        &format!("ablate-{name}"),
        &[file.as_str()],
        json!({ "rows": rows.len() }),
    )
}

/// Metric CSVs in `out` that feed the report, sorted by name.
fn report_sources(out: &Path) -> Result<Vec<String>, CliError> {
    let mut names: Vec<String> = fs::read_dir(out)
        .map_err(|e| io_error(out, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") && (n.starts_with("metrics") || n.starts_with("ablate-")))
        .collect();
    names.sort();
    Ok(names)
}

pub fn report(mut ctx: Context) -> Result<(), CliError> {
    let out = ctx.out()?;
    let sources = report_sources(&out)?;
    if sources.is_empty() {
        return Err(CliError::Usage(format!(
            "no metrics*.csv or ablate-*.csv in {}; run `ssgan evaluate` or `ssgan ablate` first",
            out.display()
        )));
    }
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for name in &sources {
        ctx.manifest.input_file("out", &out, Path::new(name))?;
        let path = out.join(name);
        let body = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let mut lines = body.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(CliError::Usage(format!("{}: unexpected header", path.display())));
        }
        for line in lines.filter(|l| !l.is_empty()) {
            text.push_str(line);
            text.push('\n');
        }
    }
    let reference = metrics_csv(&MetricRow::reference_rows());
    text.extend(reference.lines().skip(1).map(|l| format!("{l}\n")));
    ctx.write("report.csv", text.as_bytes())?;
    ctx.finish("report", &["report.csv"], json!({ "sources": sources }))
}
