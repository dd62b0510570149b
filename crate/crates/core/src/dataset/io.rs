use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, ExternalImage, RoiLayout, Split, TrialRecord};
use crate::image::Image;

const VOXEL_MAGIC: &[u8; 4] = b"VOX1";
const FORMAT: &str = "ssgan-dataset";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    image_size: usize,
    layout: RoiLayout,
    categories: Vec<String>,
    stimuli: Vec<String>,
    masks: Vec<String>,
    records: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    stimulus_id: String,
    category_id: usize,
    split: Split,
    trial_index: usize,
}

fn check_id(id: &str) -> Result<(), DatasetError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(DatasetError::Format(format!(
            "stimulus id {id:?} is not a safe file name"
        )))
    }
}

fn load_image(path: &Path) -> Result<Image, DatasetError> {
    Image::load_pgm(path).map_err(|source| DatasetError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn save_image(image: &Image, path: &Path) -> Result<(), DatasetError> {
    image.save_pgm(path).map_err(|source| DatasetError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `manifest.json`, `voxels.bin`, `stimuli/` and `masks/` under
/// `root`, creating directories as needed.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), DatasetError> {
    for id in dataset.stimuli().keys() {
        check_id(id)?;
    }
    fs::create_dir_all(root.join("stimuli"))?;
    fs::create_dir_all(root.join("masks"))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        image_size: dataset.image_size(),
        layout: dataset.layout().clone(),
        categories: dataset.categories().to_vec(),
        stimuli: dataset.stimuli().keys().cloned().collect(),
        masks: dataset.masks().keys().cloned().collect(),
        records: dataset
            .records()
            .iter()
            .map(|r| ManifestRecord {
                stimulus_id: r.stimulus_id.clone(),
                category_id: r.category_id,
                split: r.split,
                trial_index: r.trial_index,
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(root.join("manifest.json"), json)?;

    let n = dataset.records().len();
    let d = dataset.layout().total_voxels();
    let mut buf = Vec::with_capacity(12 + 4 * n * d);
    buf.extend_from_slice(VOXEL_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for r in dataset.records() {
        for v in &r.voxels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(root.join("voxels.bin"))?.write_all(&buf)?;

    for (id, im) in dataset.stimuli() {
        save_image(im, &root.join("stimuli").join(format!("{id}.pgm")))?;
    }
    for (id, im) in dataset.masks() {
        save_image(im, &root.join("masks").join(format!("{id}.pgm")))?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(DatasetError::Format(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }

    let mut bytes = Vec::new();
    fs::File::open(root.join("voxels.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != VOXEL_MAGIC {
        return Err(DatasetError::Format("voxels.bin lacks VOX1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, d) = (word(4), word(8));
    if n != manifest.records.len() {
        return Err(DatasetError::Format(format!(
            "voxels.bin holds {n} records, manifest lists {}",
            manifest.records.len()
        )));
    }
    let expected = manifest.layout.total_voxels();
    if d != expected {
        return Err(DatasetError::VoxelLength {
            index: 0,
            expected,
            found: d,
        });
    }
    if bytes.len() != 12 + 4 * n * d {
        return Err(DatasetError::Format(format!(
            "voxels.bin has {} bytes, expected {}",
            bytes.len(),
            12 + 4 * n * d
        )));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let records = manifest
        .records
        .into_iter()
        .zip(values.chunks_exact(d))
        .map(|(r, v)| TrialRecord {
            stimulus_id: r.stimulus_id,
            category_id: r.category_id,
            split: r.split,
            trial_index: r.trial_index,
            voxels: v.to_vec(),
        })
        .collect();

    let mut stimuli = BTreeMap::new();
    for id in manifest.stimuli {
        check_id(&id)?;
        let im = load_image(&root.join("stimuli").join(format!("{id}.pgm")))?;
        stimuli.insert(id, im);
    }
    let mut masks = BTreeMap::new();
    for id in manifest.masks {
        check_id(&id)?;
        let im = load_image(&root.join("masks").join(format!("{id}.pgm")))?;
        masks.insert(id, im);
    }
    let dataset = Dataset::new(manifest.layout, manifest.categories, records, stimuli, masks)?;
    if dataset.image_size() != manifest.image_size && !dataset.stimuli().is_empty() {
        return Err(DatasetError::Format(format!(
            "manifest image_size {} but images are {}",
            manifest.image_size,
            dataset.image_size()
        )));
    }
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
struct ExternalLabel {
    file: String,
    category_id: usize,
}

/// Writes `aug_0000.pgm`, `aug_0001.pgm`, ... and `labels.json` under `dir`.
pub fn save_external_images(images: &[ExternalImage], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut labels = Vec::with_capacity(images.len());
    for (i, ext) in images.iter().enumerate() {
        let file = format!("aug_{i:04}.pgm");
        save_image(&ext.image, &dir.join(&file))?;
        labels.push(ExternalLabel {
            file,
            category_id: ext.category_id,
        });
    }
    let mut json = serde_json::to_vec_pretty(&labels)?;
    json.push(b'\n');
    fs::write(dir.join("labels.json"), json)?;
    Ok(())
}

/// Loads the images listed in `dir/labels.json`, in listed order.
pub fn load_external_images(dir: &Path) -> Result<Vec<ExternalImage>, DatasetError> {
    let labels: Vec<ExternalLabel> = serde_json::from_slice(&fs::read(dir.join("labels.json"))?)?;
    labels
        .into_iter()
        .map(|l| {
            check_id(&l.file)?;
            Ok(ExternalImage {
                image: load_image(&dir.join(&l.file))?,
                category_id: l.category_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_dataset;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny_dataset();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn unknown_roi_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"PPA\"", "\"V9\"");
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("V9"), "{err}");
    }

    #[test]
    fn truncated_voxels_and_bad_images_have_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        let vox = dir.path().join("voxels.bin");
        let bytes = fs::read(&vox).unwrap();
        fs::write(&vox, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Format(_))));
        fs::write(&vox, &bytes).unwrap();

        fs::write(dir.path().join("stimuli/a.pgm"), b"P2 garbage").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Image { .. })));
    }

    #[test]
    fn external_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ims: Vec<ExternalImage> = (0..3)
            .map(|i| ExternalImage {
                image: Image::filled(4, 4, i as f32 / 255.0),
                category_id: i % 2,
            })
            .collect();
        save_external_images(&ims, dir.path()).unwrap();
        assert_eq!(load_external_images(dir.path()).unwrap(), ims);
    }
}
