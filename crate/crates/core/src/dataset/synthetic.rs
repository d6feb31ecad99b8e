//! Synthetic bags with planted anomalies.
//!
//! Normal segments are `g / |g|` with `g ~ N(mu_n, I)`, anomalous segments
//! `h / |h|` with `h ~ N(mu_a, I)`. The two means sit symmetrically about
//! the origin along a seeded random direction, `separation` apart. Each
//! positive bag plants `k ~ U{k_min..=k_max}` anomalous segments; negative
//! bags are all normal. Each segment is stored as one clip row, so pooling
//! maps clips to segments one to one.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    assemble_bag, l2_normalize, write_features, write_manifest, write_truth, BagSet, ClipFeatureMatrix,
    DatasetManifest, SegmentTruth, Split, VideoEntry, VideoLabel, DEFAULT_FPS, FRAMES_PER_CLIP,
};
use crate::scalar::Scalar;
use crate::seeding;
use crate::{Error, Result};

const TAG_SYNTH: u64 = 0x5E7D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_segments: usize,
    pub train_bags_per_class: usize,
    pub test_bags_per_class: usize,
    /// Distance between the normal and anomalous means.
    pub separation: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Plant anomalies as one contiguous run rather than scattered.
    pub contiguous: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 32,
            n_segments: 32,
            train_bags_per_class: 200,
            test_bags_per_class: 50,
            separation: 2.0,
            k_min: 3,
            k_max: 8,
            contiguous: true,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        if self.n_segments == 0 {
            return Err(Error::invalid("n_segments", "must be >= 1"));
        }
        if !(1 <= self.k_min && self.k_min <= self.k_max && self.k_max <= self.n_segments) {
            return Err(Error::invalid(
                "anomaly_count_range",
                format!(
                    "need 1 <= k_min ({}) <= k_max ({}) <= n_segments ({})",
                    self.k_min, self.k_max, self.n_segments
                ),
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::invalid("separation", format!("{} must be >= 0", self.separation)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub entry: VideoEntry,
    pub features: ClipFeatureMatrix<f32>,
    /// Per-segment anomaly flags.
    pub truth: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub videos: Vec<SyntheticVideo>,
}

fn unit_sample(rng: &mut impl Rng, mean: &[f64]) -> Vec<f32> {
    let mut v: Vec<f64> = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
    l2_normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// Inclusive frame ranges covered by runs of anomalous segments.
fn annotation_ranges(truth: &[bool]) -> Vec<[u64; 2]> {
    let mut ranges = Vec::new();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] {
            let start = i;
            while i < truth.len() && truth[i] {
                i += 1;
            }
            ranges.push([start as u64 * FRAMES_PER_CLIP, i as u64 * FRAMES_PER_CLIP - 1]);
        } else {
            i += 1;
        }
    }
    ranges
}

impl SyntheticData {
    /// Generates the dataset in memory. Deterministic given the config.
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dir_rng = seeding::stream(&[TAG_SYNTH, cfg.seed, u64::MAX]);
        let mut direction: Vec<f64> = (0..cfg.dim).map(|_| dir_rng.sample(StandardNormal)).collect();
        l2_normalize(&mut direction);
        let half = cfg.separation / 2.0;
        let mu_normal: Vec<f64> = direction.iter().map(|d| -half * d).collect();
        let mu_anomalous: Vec<f64> = direction.iter().map(|d| half * d).collect();

        let n = cfg.n_segments;
        let mut videos = Vec::new();
        for (split, split_code, count) in [
            (Split::Train, 0u64, cfg.train_bags_per_class),
            (Split::Test, 1, cfg.test_bags_per_class),
        ] {
            for (label, label_code) in [(VideoLabel::Abnormal, 1u64), (VideoLabel::Normal, 0)] {
                for i in 0..count {
                    let mut rng = seeding::stream(&[TAG_SYNTH, cfg.seed, split_code, label_code, i as u64]);
                    let mut truth = vec![false; n];
                    if label == VideoLabel::Abnormal {
                        let k = rng.random_range(cfg.k_min..=cfg.k_max);
                        if cfg.contiguous {
                            let offset = rng.random_range(0..=n - k);
                            truth[offset..offset + k].iter_mut().for_each(|t| *t = true);
                        } else {
                            for p in index::sample(&mut rng, n, k) {
                                truth[p] = true;
                            }
                        }
                    }
                    let rows: Vec<Vec<f32>> = truth
                        .iter()
                        .map(|&a| unit_sample(&mut rng, if a { &mu_anomalous } else { &mu_normal }))
                        .collect();
                    let split_name = if split == Split::Train { "train" } else { "test" };
                    let label_name = if label == VideoLabel::Abnormal { "abnormal" } else { "normal" };
                    let id = format!("{split_name}_{label_name}_{i:04}");
                    let entry = VideoEntry {
                        feature_path: format!("features/{id}.milf"),
                        id,
                        label,
                        split,
                        n_frames: n as u64 * FRAMES_PER_CLIP,
                        fps: DEFAULT_FPS,
                        annotations: (label == VideoLabel::Abnormal).then(|| annotation_ranges(&truth)),
                    };
                    videos.push(SyntheticVideo {
                        entry,
                        features: ClipFeatureMatrix::from_rows(&rows)?,
                        truth,
                    });
                }
            }
        }
        Ok(SyntheticData {
            config: cfg.clone(),
            videos,
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            videos: self.videos.iter().map(|v| v.entry.clone()).collect(),
            truth_path: Some("truth.csv".into()),
        }
    }

    pub fn truth(&self) -> SegmentTruth {
        SegmentTruth {
            videos: self.videos.iter().map(|v| (v.entry.id.clone(), v.truth.clone())).collect(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticVideo> + '_ {
        self.videos.iter().filter(move |v| v.entry.split == split)
    }

    /// Bags of a split, pooled exactly as when loading the written files.
    pub fn bags<T: Scalar>(&self, split: Split) -> Result<BagSet<T>> {
        let bags = self
            .split(split)
            .map(|v| {
                let m = ClipFeatureMatrix::new(
                    v.features.num_clips(),
                    v.features.dim(),
                    v.features.as_slice().iter().map(|x| T::from_f32_exact(*x)).collect(),
                )?;
                assemble_bag(&v.entry, &m, self.config.n_segments, Some(self.config.dim))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BagSet::from_bags(bags))
    }

    /// Writes `manifest.json`, `truth.csv` and `features/*.milf` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<DatasetManifest> {
        for v in &self.videos {
            write_features(out_dir.join(&v.entry.feature_path), &v.features)?;
        }
        write_truth(out_dir.join("truth.csv"), &self.truth())?;
        let manifest = self.manifest();
        write_manifest(out_dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// Generates a dataset and writes it under `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    SyntheticData::generate(cfg)?.write(out_dir.as_ref())
}
