//! Feature and annotation files, modality fusion and synthetic datasets.
//!
//! A dataset directory holds
//!
//! ```text
//! annotations.txt
//! rgb/<video_id>.feat
//! flow/<video_id>.feat   (optional)
//! ```

mod annotations;
mod features;
mod synth;

use std::collections::HashMap;
use std::path::Path;

pub use annotations::{
    format_annotations, load_annotations, parse_annotations, save_annotations, BoundaryAnnotation,
};
pub use features::{
    encode_features, encode_features_text, fuse_all, fuse_modalities, load_feature_dir,
    load_features, save_features, save_features_text, FrameFeatureSequence, FEATURE_EXTENSION,
};
pub use synth::{synth_generate, SyntheticSpec, SyntheticVideo};

use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const RGB_DIR: &str = "rgb";
pub const FLOW_DIR: &str = "flow";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub features: FrameFeatureSequence,
    pub annotation: BoundaryAnnotation,
}

impl LabeledVideo {
    pub fn boundary_frames(&self) -> Vec<usize> {
        self.annotation
            .frame_indices(self.features.fps, self.features.num_frames())
    }
}

impl From<&SyntheticVideo> for LabeledVideo {
    fn from(v: &SyntheticVideo) -> Self {
        let features = match &v.flow {
            Some(flow) => fuse_modalities(&v.rgb, flow).expect("synthetic modalities align"),
            None => v.rgb.clone(),
        };
        Self {
            features,
            annotation: v.annotation.clone(),
        }
    }
}

/// Loads the features of a dataset directory, fusing the flow modality
/// when `use_flow` is set, without annotations.
pub fn load_dataset_features(dir: &Path, use_flow: bool) -> Result<Vec<FrameFeatureSequence>> {
    let rgb = load_feature_dir(&dir.join(RGB_DIR))?;
    if !use_flow {
        return Ok(rgb);
    }
    let flow_dir = dir.join(FLOW_DIR);
    let mut flow: HashMap<String, FrameFeatureSequence> = load_feature_dir(&flow_dir)?
        .into_iter()
        .map(|f| (f.video_id.clone(), f))
        .collect();
    rgb.iter()
        .map(|r| {
            let f = flow.remove(&r.video_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{}: no flow features for {}",
                    flow_dir.display(),
                    r.video_id
                ))
            })?;
            fuse_modalities(r, &f)
        })
        .collect()
}

/// Loads features and annotations and pairs them by video id.
pub fn load_dataset(dir: &Path, use_flow: bool) -> Result<Vec<LabeledVideo>> {
    let features = load_dataset_features(dir, use_flow)?;
    let mut anns: HashMap<String, BoundaryAnnotation> =
        load_annotations(&dir.join(ANNOTATION_FILE))?
            .into_iter()
            .map(|a| (a.video_id.clone(), a))
            .collect();
    features
        .into_iter()
        .map(|f| {
            let annotation = anns.remove(&f.video_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no annotation for video {}", f.video_id))
            })?;
            Ok(LabeledVideo {
                features: f,
                annotation,
            })
        })
        .collect()
}

/// Writes synthetic videos in the dataset directory layout.
pub fn save_synthetic(dir: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    for v in videos {
        let name = format!("{}.{FEATURE_EXTENSION}", v.rgb.video_id);
        save_features(&v.rgb, &dir.join(RGB_DIR).join(&name))?;
        if let Some(flow) = &v.flow {
            save_features(flow, &dir.join(FLOW_DIR).join(&name))?;
        }
    }
    let anns: Vec<BoundaryAnnotation> = videos.iter().map(|v| v.annotation.clone()).collect();
    save_annotations(&anns, &dir.join(ANNOTATION_FILE))
}
