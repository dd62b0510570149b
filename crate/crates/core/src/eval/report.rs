use std::fmt::Write;

use super::{EvalError, EvalReport, RoiAblationRow};
use crate::image::{montage, Image};

pub const METRICS_HEADER: &str = "metric,condition,run,value";

/// Published win rates for comparison. Carried into reports as reference
/// rows only; nothing checks against them.
pub const PUBLISHED_REFERENCE: [(&str, f64); 5] = [
    ("full", 0.653),
    ("prior_method_a", 0.643),
    ("prior_method_b", 0.629),
    ("no_semantics", 0.625),
    ("no_augmentation", 0.636),
];

/// One CSV row; `run` of `None` marks an aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub condition: String,
    pub run: Option<usize>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, condition: &str, run: Option<usize>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            condition: condition.into(),
            run,
            value,
        }
    }

    /// Per-run win rates (1-based), their mean and the mean SSIM.
    pub fn from_report(prefix: &str, condition: &str, report: &EvalReport) -> Vec<Self> {
        let win = format!("{prefix}win_rate");
        let mut rows: Vec<Self> = report
            .run_win_rates
            .iter()
            .enumerate()
            .map(|(i, &v)| Self::new(&win, condition, Some(i + 1), v))
            .collect();
        rows.push(Self::new(&win, condition, None, report.mean_win_rate));
        rows.push(Self::new(&format!("{prefix}ssim"), condition, None, report.mean_ssim()));
        rows
    }

    pub fn from_roi_rows(rows: &[RoiAblationRow]) -> Vec<Self> {
        rows.iter()
            .flat_map(|r| {
                let mut out = Self::from_report("shape_", &r.roi_set, &r.shape);
                out.push(Self::new("semantic_accuracy", &r.roi_set, None, r.semantic_accuracy));
                out
            })
            .collect()
    }

    pub fn reference_rows() -> Vec<Self> {
        PUBLISHED_REFERENCE
            .iter()
            .map(|(c, v)| Self::new("reference_win_rate", c, None, *v))
            .collect()
    }
}

/// Fixed-precision CSV so identical runs give identical bytes.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let run = r.run.map_or_else(|| "mean".to_string(), |i| i.to_string());
        let _ = writeln!(out, "{},{},{},{:.6}", r.metric, r.condition, run, r.value);
    }
    out
}

/// One row per image: ground truth, decoded shape, reconstruction.
pub fn comparison_montage(
    truths: &[Image],
    shapes: &[Image],
    recons: &[Image],
    max_rows: usize,
) -> Result<Image, EvalError> {
    if truths.len() != shapes.len() || truths.len() != recons.len() {
        return Err(EvalError::Config("montage inputs differ in length".into()));
    }
    let tiles: Vec<&Image> = (0..truths.len().min(max_rows))
        .flat_map(|i| [&truths[i], &shapes[i], &recons[i]])
        .collect();
    Ok(montage(&tiles, 3, 1, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            per_image_ssim: vec![0.5, 0.7],
            per_image_win: vec![1.0, 0.5],
            run_win_rates: vec![1.0, 0.5],
            mean_win_rate: 0.75,
            seed: 0,
        };
        let csv = metrics_csv(&MetricRow::from_report("", "full", &report));
        assert_eq!(
            csv,
            "metric,condition,run,value\n\
             win_rate,full,1,1.000000\n\
             win_rate,full,2,0.500000\n\
             win_rate,full,mean,0.750000\n\
             ssim,full,mean,0.600000\n"
        );
    }

    #[test]
    fn montage_is_three_tiles_wide() {
        let t = vec![Image::filled(16, 16, 0.0); 4];
        let m = comparison_montage(&t, &t, &t, 2).unwrap();
        assert_eq!((m.width(), m.height()), (3 * 16 + 4, 2 * 16 + 3));
        assert!(comparison_montage(&t, &t[..1], &t, 2).is_err());
    }
}
