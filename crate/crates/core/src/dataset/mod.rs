//! Feature files, manifests, clip-to-segment pooling, bag assembly and the
//! synthetic planted-anomaly generator.

mod aggregate;
mod features;
mod manifest;
mod synthetic;
mod truth;

pub use aggregate::{aggregate_clips_to_segments, l2_normalize, segment_clip_range};
pub use features::{read_features, write_features, ClipFeatureMatrix};
pub use manifest::{read_manifest, resolve, write_manifest, DatasetManifest, Split, VideoEntry, VideoLabel, DEFAULT_FPS};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SyntheticVideo};
pub use truth::{read_truth, write_truth, SegmentTruth};

use std::path::Path;

use crate::scalar::Scalar;
use crate::{Error, Result};

pub const DEFAULT_SEGMENTS: usize = 32;

/// Frames covered by one clip feature.
pub const FRAMES_PER_CLIP: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// From an abnormal video.
    Positive,
    Negative,
}

/// A video as an ordered set of segment instances sharing one label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag<T> {
    pub polarity: Polarity,
    /// Segment features in temporal order.
    pub instances: Vec<Vec<T>>,
    pub video_id: String,
}

impl<T> Bag<T> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Pools a video's clip features into `n_segments` instances. `dim`, when
/// given, is the feature dimension the scorer expects.
pub fn assemble_bag<T: Scalar>(
    entry: &VideoEntry,
    features: &ClipFeatureMatrix<T>,
    n_segments: usize,
    dim: Option<usize>,
) -> Result<Bag<T>> {
    if let Some(d) = dim {
        if features.dim() != d {
            return Err(Error::dims(format!("features of {}", entry.id), d, features.dim()));
        }
    }
    Ok(Bag {
        polarity: match entry.label {
            VideoLabel::Abnormal => Polarity::Positive,
            VideoLabel::Normal => Polarity::Negative,
        },
        instances: aggregate_clips_to_segments(features, n_segments)?,
        video_id: entry.id.clone(),
    })
}

/// Bags of one split, separated by polarity.
#[derive(Clone, Debug, Default)]
pub struct BagSet<T> {
    pub positives: Vec<Bag<T>>,
    pub negatives: Vec<Bag<T>>,
}

impl<T: Scalar> BagSet<T> {
    pub fn from_bags(bags: impl IntoIterator<Item = Bag<T>>) -> Self {
        let mut set = BagSet {
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for b in bags {
            match b.polarity {
                Polarity::Positive => set.positives.push(b),
                Polarity::Negative => set.negatives.push(b),
            }
        }
        set
    }

    pub fn dim(&self) -> Option<usize> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .next()
            .and_then(|b| b.instances.first())
            .map(Vec::len)
    }
}

/// Loads and pools every video of `split` listed in a manifest.
pub fn load_split<T: Scalar>(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Split,
    n_segments: usize,
    dim: Option<usize>,
) -> Result<Vec<(VideoEntry, Bag<T>)>> {
    let mut dim = dim;
    manifest
        .split(split)
        .map(|entry| {
            let features = read_features::<T>(resolve(base_dir, &entry.feature_path))?;
            let bag = assemble_bag(entry, &features, n_segments, dim)?;
            dim.get_or_insert(features.dim());
            Ok((entry.clone(), bag))
        })
        .collect()
}
