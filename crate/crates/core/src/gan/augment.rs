use std::collections::BTreeSet;

use super::{GanError, TrainingPair};
use crate::dataset::{binarize_mask, ExternalImage, Threshold};
use crate::patch::extract_patch_features;
use crate::semantic::CategoryAverages;

/// Pairs built from external images, plus how many were rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub pairs: Vec<TrainingPair>,
    pub rejected: usize,
}

/// Shape input: block-replicated patch features of the image's binarized
/// mask; semantic input: its category's average feature, or empty for a
/// shape-only generator. Images whose label is not among `train_categories`
/// are dropped.
pub fn make_augmented_pairs(
    external: &[ExternalImage],
    averages: Option<&CategoryAverages>,
    train_categories: &BTreeSet<usize>,
    patch_size: usize,
) -> Result<Augmentation, GanError> {
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for ext in external {
        if !train_categories.contains(&ext.category_id) {
            rejected += 1;
            continue;
        }
        let mask = binarize_mask(&ext.image, Threshold::Auto).mask;
        let shape = extract_patch_features(&mask, patch_size)
            .map_err(|e| GanError::Config(e.to_string()))?
            .upsample(patch_size);
        let semantic = match averages {
            Some(a) => a.get(ext.category_id)?.values.clone(),
            None => Vec::new(),
        };
        pairs.push(TrainingPair {
            shape,
            semantic,
            target: ext.image.clone(),
        });
    }
    Ok(Augmentation { pairs, rejected })
}
