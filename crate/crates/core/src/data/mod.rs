//! Feature files, datasets and evaluation splits.

pub mod format;
pub mod splits;
pub mod synthetic;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sample_segments, skeleton_indices, ViewTokens};
use crate::rng::{derive, seeded};
use crate::tensor::{self, Tensor};

pub use format::{read_feature_file, write_feature_file};
pub use splits::{make_splits, Protocol, Split};
pub use synthetic::{generate_dataset, generate_synthetic, SyntheticSpec};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFiles {
    pub rgb: String,
    pub sk: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub label: usize,
    pub subject: usize,
    pub views: Vec<ViewFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub samples: Vec<SampleRecord>,
}

/// One labelled sample with aligned tokens for every view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub subject: usize,
    pub views: Vec<ViewTokens>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: usize,
    pub steps: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, protocol: Protocol) -> Result<Split> {
        make_splits(self.samples.iter().map(|s| (s.id, s.subject)), self.views, protocol)
    }

    /// Samples with the given ids, in the order given, with `masked_view`
    /// zeroed.
    pub fn subset(&self, ids: &[usize], masked_view: Option<usize>) -> Result<Vec<Sample>> {
        let by_id: std::collections::HashMap<usize, &Sample> = self.samples.iter().map(|s| (s.id, s)).collect();
        ids.iter()
            .map(|id| {
                let mut s = (*by_id
                    .get(id)
                    .ok_or_else(|| Error::input(format!("no sample with id {id}")))?)
                .clone();
                if let Some(v) = masked_view {
                    mask_view(&mut s, v)?;
                }
                Ok(s)
            })
            .collect()
    }
}

/// Zeroes every token of one view.
pub fn mask_view(sample: &mut Sample, view: usize) -> Result<()> {
    let v = sample
        .views
        .get_mut(view)
        .ok_or_else(|| Error::input(format!("sample {} has no view {view}", sample.id)))?;
    v.patches = Tensor::zeros(v.patches.shape());
    v.skeleton = Tensor::zeros(v.skeleton.shape());
    Ok(())
}

/// Reads a manifest and its feature files. Views with more RGB frames than
/// `spec.steps` are reduced by segment sampling seeded from the spec seed and
/// sample id; skeleton tokens are paired by frame-rate ratio.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Dataset)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::input(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let steps = manifest.spec.steps;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        if rec.views.len() != manifest.spec.views {
            return Err(Error::input(format!("sample {} has {} views", rec.id, rec.views.len())));
        }
        if rec.label >= manifest.spec.n_classes {
            return Err(Error::input(format!("sample {} has label {}", rec.id, rec.label)));
        }
        let mut rng = seeded(derive(manifest.spec.seed, rec.id as u64));
        let views = rec
            .views
            .iter()
            .map(|files| {
                let rgb = read_feature_file(&root.join(&files.rgb))?;
                let sk = read_feature_file(&root.join(&files.sk))?;
                select_frames(&rgb, &sk, steps, &mut rng)
            })
            .collect::<Result<_>>()?;
        samples.push(Sample {
            id: rec.id,
            label: rec.label,
            subject: rec.subject,
            views,
        });
    }
    let data = Dataset {
        views: manifest.spec.views,
        steps,
        n_classes: manifest.spec.n_classes,
        samples,
    };
    Ok((manifest, data))
}

fn select_frames(rgb: &Tensor, sk: &Tensor, steps: usize, rng: &mut crate::rng::Rng64) -> Result<ViewTokens> {
    let [frames, n_patches, d_rgb] = *rgb.shape() else {
        return Err(Error::input(format!(
            "RGB features must be [T, N_p, D], got {:?}",
            rgb.shape()
        )));
    };
    let (sk_frames, _) = sk.dims2()?;
    if n_patches == 0 {
        return Err(Error::input("RGB features need at least one patch"));
    }
    let sk_index = skeleton_indices(sk_frames, frames)?;
    let picked = if frames == steps {
        (0..steps).collect()
    } else {
        sample_segments(frames, steps, rng)?
    };
    let flat = rgb.clone().reshape(&[frames * n_patches, d_rgb])?;
    let rows: Vec<usize> = picked
        .iter()
        .flat_map(|&t| t * n_patches..(t + 1) * n_patches)
        .collect();
    let sk_rows: Vec<usize> = picked.iter().map(|&t| sk_index[t]).collect();
    Ok(ViewTokens {
        patches: tensor::gather_rows(&flat, &rows)?,
        skeleton: tensor::gather_rows(sk, &sk_rows)?,
        n_patches,
    })
}
