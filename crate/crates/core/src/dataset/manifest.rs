//! JSON dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::{Error, Result};

pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoLabel {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    pub label: VideoLabel,
    pub split: Split,
    pub n_frames: u64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Inclusive `[start_frame, end_frame]` ranges of anomalous activity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<[u64; 2]>>,
}

impl VideoEntry {
    pub fn is_abnormal(&self) -> bool {
        self.label == VideoLabel::Abnormal
    }

    /// Per-frame labels from the annotations, if any are present.
    pub fn frame_labels(&self) -> Option<Vec<bool>> {
        if !self.is_abnormal() {
            return Some(vec![false; self.n_frames as usize]);
        }
        let ranges = self.annotations.as_ref()?;
        let mut labels = vec![false; self.n_frames as usize];
        for &[s, e] in ranges {
            for l in &mut labels[s as usize..=e as usize] {
                *l = true;
            }
        }
        Some(labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    /// Segment-level truth sidecar, relative to the manifest's directory.
    /// Evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_path: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.videos {
            let field = |f: &str| format!("videos[{}].{f}", v.id);
            if !seen.insert(v.id.as_str()) {
                return Err(Error::invalid("videos.id", format!("duplicate id {:?}", v.id)));
            }
            if v.n_frames == 0 {
                return Err(Error::invalid(field("n_frames"), "must be positive"));
            }
            if !(v.fps.is_finite() && v.fps > 0.0) {
                return Err(Error::invalid(field("fps"), format!("{} must be positive", v.fps)));
            }
            if let Some(ranges) = &v.annotations {
                if !v.is_abnormal() {
                    return Err(Error::invalid(field("annotations"), "only abnormal videos carry annotations"));
                }
                for &[s, e] in ranges {
                    if s > e || e >= v.n_frames {
                        return Err(Error::invalid(
                            field("annotations"),
                            format!("range [{s}, {e}] outside [0, {})", v.n_frames),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoEntry> + '_ {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: "manifest".into(),
            source: e,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_owned(),
            source: e,
        })?;
        m.validate()?;
        Ok(m)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::invalid("manifest", e.to_string()))?;
    DatasetManifest::from_json(&text, &path.display().to_string())
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    write_file(path.as_ref(), manifest.to_json()?.as_bytes())
}

/// Resolves a manifest-relative path.
pub fn resolve(base_dir: &Path, relative: &str) -> PathBuf {
    let p = Path::new(relative);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}
