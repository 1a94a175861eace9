//! On-disk datasets: `images/` and `masks/` paired by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mdunet::train::{Dataset, Sample};
use thiserror::Error;

use crate::pgm::{load_image, ImageError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Image(PathBuf, ImageError),
    #[error("image {0} has no mask")]
    MissingMask(String),
    #[error("{stem}: image is {image:?}, mask is {mask:?}")]
    SizeMismatch {
        stem: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("no image/mask pairs under {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Model(#[from] mdunet::Error),
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DatasetError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| DatasetError::Io(dir.into(), e))?;
    for entry in entries {
        let path = entry.map_err(|e| DatasetError::Io(dir.into(), e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads every image under `root/images` with its mask from `root/masks`.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let images = list_by_stem(&root.join("images"))?;
    let masks = list_by_stem(&root.join("masks"))?;
    let mut samples = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let mpath = masks.get(stem).ok_or_else(|| DatasetError::MissingMask(stem.clone()))?;
        let img = load_image(ipath).map_err(|e| DatasetError::Image(ipath.clone(), e))?;
        let mask = load_image(mpath).map_err(|e| DatasetError::Image(mpath.clone(), e))?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(DatasetError::SizeMismatch {
                stem: stem.clone(),
                image: (img.width, img.height),
                mask: (mask.width, mask.height),
            });
        }
        samples.push(Sample::new(img.to_tensor(), mask.to_mask())?);
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty(root.into()));
    }
    Ok(Dataset::new(samples)?)
}
