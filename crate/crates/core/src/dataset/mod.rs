//! Trial records, ROI layouts, on-disk dataset format, preprocessing and the
//! synthetic visual-cortex simulator.

mod io;
mod mask;
mod simulate;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};

pub use io::{load_dataset, load_external_images, save_dataset, save_external_images};
pub use mask::{binarize_mask, otsu_threshold, BinarizedMask, Threshold};
pub use simulate::{
    matvec, simulate, ExternalImage, ImageStyle, Simulation, SimulationTruth, SyntheticConfig, HVC_SHAPE_LEAK,
    MAX_TEMPLATES,
};

pub const LVC: [&str; 3] = ["V1", "V2", "V3"];
pub const HVC: [&str; 3] = ["LOC", "FFA", "PPA"];
pub const REQUIRED_ROIS: [&str; 6] = ["V1", "V2", "V3", "LOC", "FFA", "PPA"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("required ROI {0} missing from layout")]
    MissingRoi(String),
    #[error("record {index} has {found} voxels, layout expects {expected}")]
    VoxelLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record ({stimulus_id}, {split}, trial {trial_index})")]
    DuplicateRecord {
        stimulus_id: String,
        split: Split,
        trial_index: usize,
    },
    #[error("record {index} is invalid: {reason}")]
    Record { index: usize, reason: String },
    #[error("no image for stimulus {0}")]
    MissingImage(String),
    #[error("unreadable image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageError,
    },
    #[error("stimulus {0} appears in both train and test splits")]
    SplitOverlap(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Ordered, disjoint voxel ranges per ROI covering `[0, total)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RoiRange>", into = "Vec<RoiRange>")]
pub struct RoiLayout {
    rois: Vec<RoiRange>,
}

impl TryFrom<Vec<RoiRange>> for RoiLayout {
    type Error = DatasetError;

    fn try_from(rois: Vec<RoiRange>) -> Result<Self, Self::Error> {
        RoiLayout::new(rois)
    }
}

impl From<RoiLayout> for Vec<RoiRange> {
    fn from(layout: RoiLayout) -> Self {
        layout.rois
    }
}

impl RoiLayout {
    pub fn new(mut rois: Vec<RoiRange>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for r in &rois {
            if !REQUIRED_ROIS.contains(&r.name.as_str()) {
                return Err(DatasetError::Layout(format!("unknown ROI {:?}", r.name)));
            }
            if !seen.insert(r.name.clone()) {
                return Err(DatasetError::Layout(format!("ROI {} listed twice", r.name)));
            }
            if r.start >= r.end {
                return Err(DatasetError::Layout(format!(
                    "ROI {} has empty range {}..{}",
                    r.name, r.start, r.end
                )));
            }
        }
        for name in REQUIRED_ROIS {
            if !seen.contains(name) {
                return Err(DatasetError::MissingRoi(name.to_string()));
            }
        }
        rois.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in &rois {
            if r.start != next {
                return Err(DatasetError::Layout(format!(
                    "ROI {} starts at {} but previous coverage ends at {next}",
                    r.name, r.start
                )));
            }
            next = r.end;
        }
        Ok(Self { rois })
    }

    /// Contiguous layout in the given order with the given sizes.
    pub fn from_sizes(sizes: &[(&str, usize)]) -> Result<Self, DatasetError> {
        let mut start = 0;
        let rois = sizes
            .iter()
            .map(|&(name, n)| {
                let r = RoiRange {
                    name: name.to_string(),
                    start,
                    end: start + n,
                };
                start += n;
                r
            })
            .collect();
        Self::new(rois)
    }

    pub fn rois(&self) -> &[RoiRange] {
        &self.rois
    }

    pub fn total_voxels(&self) -> usize {
        self.rois.last().map_or(0, |r| r.end)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.rois.iter().find(|r| r.name == name).map(|r| r.start..r.end)
    }

    pub fn voxel_count(&self, name: &str) -> Option<usize> {
        self.range(name).map(|r| r.len())
    }

    /// Voxel indices of a union of ROIs, in layout order.
    pub fn indices(&self, names: &[&str]) -> Result<Vec<usize>, DatasetError> {
        for n in names {
            if self.range(n).is_none() {
                return Err(DatasetError::MissingRoi(n.to_string()));
            }
        }
        Ok(self
            .rois
            .iter()
            .filter(|r| names.contains(&r.name.as_str()))
            .flat_map(|r| r.start..r.end)
            .collect())
    }

    pub fn select(&self, voxels: &[f32], names: &[&str]) -> Result<Vec<f32>, DatasetError> {
        Ok(self.indices(names)?.into_iter().map(|i| voxels[i]).collect())
    }
}

/// Expands `LVC`, `HVC` and `VC` into member ROIs; single ROI names pass
/// through.
pub fn expand_roi_set(name: &str) -> Result<Vec<&'static str>, DatasetError> {
    match name {
        "LVC" => Ok(LVC.to_vec()),
        "HVC" => Ok(HVC.to_vec()),
        "VC" => Ok(REQUIRED_ROIS.to_vec()),
        other => REQUIRED_ROIS
            .iter()
            .find(|r| **r == other)
            .map(|r| vec![*r])
            .ok_or_else(|| DatasetError::Layout(format!("unknown ROI set {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stimulus_id: String,
    pub category_id: usize,
    pub split: Split,
    pub trial_index: usize,
    #[serde(skip)]
    pub voxels: Vec<f32>,
}

/// A validated collection of trials with their stimuli.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    layout: RoiLayout,
    categories: Vec<String>,
    records: Vec<TrialRecord>,
    stimuli: BTreeMap<String, Image>,
    masks: BTreeMap<String, Image>,
}

impl Dataset {
    pub fn new(
        layout: RoiLayout,
        categories: Vec<String>,
        records: Vec<TrialRecord>,
        stimuli: BTreeMap<String, Image>,
        masks: BTreeMap<String, Image>,
    ) -> Result<Self, DatasetError> {
        let d = Self {
            layout,
            categories,
            records,
            stimuli,
            masks,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let total = self.layout.total_voxels();
        let mut keys = HashSet::new();
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        let mut size = None;
        for im in self.stimuli.values().chain(self.masks.values()) {
            if !im.is_square() || *size.get_or_insert(im.width()) != im.width() {
                return Err(DatasetError::Format(
                    "stimuli and masks must be square and share one size".into(),
                ));
            }
        }
        for (id, m) in &self.masks {
            if !m.is_binary() {
                return Err(DatasetError::Format(format!("mask {id} is not binary")));
            }
        }
        for (index, r) in self.records.iter().enumerate() {
            if r.voxels.len() != total {
                return Err(DatasetError::VoxelLength {
                    index,
                    expected: total,
                    found: r.voxels.len(),
                });
            }
            if r.voxels.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Record {
                    index,
                    reason: "non-finite voxel value".into(),
                });
            }
            if r.category_id >= self.categories.len() {
                return Err(DatasetError::Record {
                    index,
                    reason: format!(
                        "category {} outside {} categories",
                        r.category_id,
                        self.categories.len()
                    ),
                });
            }
            if !keys.insert((r.stimulus_id.as_str(), r.split, r.trial_index)) {
                return Err(DatasetError::DuplicateRecord {
                    stimulus_id: r.stimulus_id.clone(),
                    split: r.split,
                    trial_index: r.trial_index,
                });
            }
            if !self.stimuli.contains_key(&r.stimulus_id) {
                return Err(DatasetError::MissingImage(r.stimulus_id.clone()));
            }
            if *splits.entry(&r.stimulus_id).or_insert(r.split) != r.split {
                return Err(DatasetError::SplitOverlap(r.stimulus_id.clone()));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &RoiLayout {
        &self.layout
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn stimuli(&self) -> &BTreeMap<String, Image> {
        &self.stimuli
    }

    pub fn masks(&self) -> &BTreeMap<String, Image> {
        &self.masks
    }

    pub fn image(&self, stimulus_id: &str) -> Option<&Image> {
        self.stimuli.get(stimulus_id)
    }

    /// Side length of the stimulus images (0 for an empty dataset).
    pub fn image_size(&self) -> usize {
        self.stimuli.values().next().map_or(0, |im| im.width())
    }

    /// The stored binary mask, or the stimulus binarized with Otsu's
    /// threshold when no mask was supplied.
    pub fn shape_mask(&self, stimulus_id: &str) -> Result<Image, DatasetError> {
        if let Some(m) = self.masks.get(stimulus_id) {
            return Ok(m.clone());
        }
        let image = self
            .stimuli
            .get(stimulus_id)
            .ok_or_else(|| DatasetError::MissingImage(stimulus_id.to_string()))?;
        Ok(binarize_mask(image, Threshold::Auto).mask)
    }

    /// Distinct stimulus ids of a split, in first-appearance order.
    pub fn stimulus_ids(&self, split: Split) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records_in(split)
            .filter(|r| seen.insert(r.stimulus_id.clone()))
            .map(|r| r.stimulus_id.clone())
            .collect()
    }

    /// Keeps the records matching `keep` and the images they reference.
    pub fn filter_records(&self, keep: impl Fn(&TrialRecord) -> bool) -> Dataset {
        let records: Vec<TrialRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids: BTreeSet<&str> = records.iter().map(|r| r.stimulus_id.as_str()).collect();
        let pick = |m: &BTreeMap<String, Image>| {
            m.iter()
                .filter(|(k, _)| ids.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        Dataset {
            layout: self.layout.clone(),
            categories: self.categories.clone(),
            stimuli: pick(&self.stimuli),
            masks: pick(&self.masks),
            records,
        }
    }

    /// Same data with records replaced (used to permute labels, relabel
    /// splits and similar controlled experiments). Revalidates.
    pub fn with_records(&self, records: Vec<TrialRecord>) -> Result<Dataset, DatasetError> {
        Dataset::new(
            self.layout.clone(),
            self.categories.clone(),
            records,
            self.stimuli.clone(),
            self.masks.clone(),
        )
    }
}

/// Replaces each test stimulus's trials by a single record holding their
/// mean. Train records are kept in order; averaged test records follow in
/// first-appearance order and keep the first trial's index.
pub fn average_test_trials(dataset: &Dataset) -> Dataset {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for r in dataset.records_in(Split::Test) {
        groups
            .entry(r.stimulus_id.as_str())
            .or_insert_with(|| {
                order.push(r.stimulus_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    let mut records: Vec<TrialRecord> = dataset.records_in(Split::Train).cloned().collect();
    for id in order {
        let trials = &groups[id];
        let len = trials[0].voxels.len();
        let mut acc = vec![0f64; len];
        for t in trials {
            for (a, &v) in acc.iter_mut().zip(&t.voxels) {
                *a += v as f64;
            }
        }
        let n = trials.len() as f64;
        records.push(TrialRecord {
            stimulus_id: id.to_string(),
            category_id: trials[0].category_id,
            split: Split::Test,
            trial_index: trials[0].trial_index,
            voxels: acc.into_iter().map(|s| (s / n) as f32).collect(),
        });
    }
    Dataset {
        records,
        ..dataset.clone()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_layout() -> RoiLayout {
        RoiLayout::from_sizes(&[("V1", 2), ("V2", 2), ("V3", 1), ("LOC", 1), ("FFA", 1), ("PPA", 1)]).unwrap()
    }

    pub(crate) fn tiny_dataset() -> Dataset {
        let layout = small_layout();
        let mut stimuli = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for (i, id) in ["a", "b"].iter().enumerate() {
            let px: Vec<f32> = (0..16).map(|p| ((p * (i + 3)) % 256) as f32 / 255.0).collect();
            stimuli.insert(id.to_string(), Image::square(4, px).unwrap());
            let mk: Vec<f32> = (0..16).map(|p| ((p + i) % 2) as f32).collect();
            masks.insert(id.to_string(), Image::square(4, mk).unwrap());
        }
        let records = vec![
            TrialRecord {
                stimulus_id: "a".into(),
                category_id: 0,
                split: Split::Train,
                trial_index: 0,
                voxels: (0..8).map(|v| v as f32 * 0.25 - 1.0).collect(),
            },
            TrialRecord {
                stimulus_id: "b".into(),
                category_id: 1,
                split: Split::Test,
                trial_index: 0,
                voxels: (0..8).map(|v| (v as f32).sin()).collect(),
            },
        ];
        Dataset::new(layout, vec!["c0".into(), "c1".into()], records, stimuli, masks).unwrap()
    }

    fn roi(name: &str, start: usize, end: usize) -> RoiRange {
        RoiRange {
            name: name.into(),
            start,
            end,
        }
    }

    #[test]
    fn layout_requires_all_rois() {
        let rois = vec![roi("V1", 0, 2), roi("V2", 2, 4)];
        assert!(matches!(RoiLayout::new(rois), Err(DatasetError::MissingRoi(_))));
    }

    #[test]
    fn layout_rejects_unknown_roi() {
        let mut rois: Vec<RoiRange> = small_layout().rois().to_vec();
        rois.push(roi("V9", 8, 9));
        assert!(matches!(RoiLayout::new(rois), Err(DatasetError::Layout(_))));
    }

    #[test]
    fn layout_rejects_gaps_and_overlaps() {
        let mut rois: Vec<RoiRange> = small_layout().rois().to_vec();
        rois[1].start = 3;
        assert!(matches!(RoiLayout::new(rois), Err(DatasetError::Layout(_))));
    }

    #[test]
    fn unions_follow_layout_order() {
        let l = small_layout();
        assert_eq!(l.indices(&LVC).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(l.indices(&HVC).unwrap(), vec![5, 6, 7]);
        assert_eq!(expand_roi_set("VC").unwrap().len(), 6);
        assert!(expand_roi_set("V9").is_err());
    }

    #[test]
    fn validation_catches_bad_records() {
        let d = tiny_dataset();
        let mut recs = d.records().to_vec();
        recs[0].voxels.pop();
        assert!(matches!(d.with_records(recs), Err(DatasetError::VoxelLength { .. })));

        let mut recs = d.records().to_vec();
        recs.push(recs[0].clone());
        assert!(matches!(
            d.with_records(recs),
            Err(DatasetError::DuplicateRecord { .. })
        ));

        let mut recs = d.records().to_vec();
        recs[0].stimulus_id = "zzz".into();
        assert!(matches!(d.with_records(recs), Err(DatasetError::MissingImage(_))));

        let mut recs = d.records().to_vec();
        let mut moved = recs[1].clone();
        moved.split = Split::Train;
        recs.push(moved);
        assert!(matches!(d.with_records(recs), Err(DatasetError::SplitOverlap(_))));
    }

    fn with_test_trials(trials: Vec<Vec<f32>>) -> Dataset {
        let d = tiny_dataset();
        let mut recs = vec![d.records()[0].clone()];
        for (i, v) in trials.into_iter().enumerate() {
            recs.push(TrialRecord {
                stimulus_id: "b".into(),
                category_id: 1,
                split: Split::Test,
                trial_index: i,
                voxels: v,
            });
        }
        d.with_records(recs).unwrap()
    }

    #[test]
    fn averaging_single_trial_is_identity() {
        let d = tiny_dataset();
        assert_eq!(average_test_trials(&d), d);
    }

    #[test]
    fn averaging_opposite_trials_cancels() {
        let v: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let avg = average_test_trials(&with_test_trials(vec![v, neg]));
        let test: Vec<_> = avg.records_in(Split::Test).collect();
        assert_eq!(test.len(), 1);
        assert!(test[0].voxels.iter().all(|&x| x == 0.0));
        assert_eq!(avg.records_in(Split::Train).count(), 1);
    }

    #[test]
    fn averaging_is_idempotent() {
        let trials = (0..5)
            .map(|t| (0..8).map(|i| ((t * 7 + i) as f32).cos()).collect())
            .collect();
        let once = average_test_trials(&with_test_trials(trials));
        assert_eq!(average_test_trials(&once), once);
    }
}
