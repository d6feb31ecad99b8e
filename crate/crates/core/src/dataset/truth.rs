//! Instance-level truth sidecar: CSV with `video_id,segment_index,is_anomalous`.
//! Used only for evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    video_id: String,
    segment_index: usize,
    is_anomalous: u8,
}

/// Per-video segment labels, keyed by video id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentTruth {
    pub videos: BTreeMap<String, Vec<bool>>,
}

impl SegmentTruth {
    pub fn get(&self, video_id: &str) -> Option<&[bool]> {
        self.videos.get(video_id).map(Vec::as_slice)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let wrap = |e: csv::Error| Error::Csv {
            path: "truth".into(),
            source: e,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        for (id, labels) in &self.videos {
            for (i, &a) in labels.iter().enumerate() {
                w.serialize(TruthRow {
                    video_id: id.clone(),
                    segment_index: i,
                    is_anomalous: a as u8,
                })
                .map_err(wrap)?;
            }
        }
        w.into_inner().map_err(|e| Error::invalid("truth", e.to_string()))
    }

    /// Every video's rows must cover segment indices `0..n` exactly once.
    pub fn from_csv(bytes: &[u8], origin: &str) -> Result<Self> {
        let wrap = |e: csv::Error| Error::Csv {
            path: origin.to_owned(),
            source: e,
        };
        let mut partial: BTreeMap<String, BTreeMap<usize, bool>> = BTreeMap::new();
        for row in csv::Reader::from_reader(bytes).deserialize::<TruthRow>() {
            let row = row.map_err(wrap)?;
            let flag = match row.is_anomalous {
                0 => false,
                1 => true,
                v => return Err(Error::invalid("is_anomalous", format!("{v} is not 0 or 1"))),
            };
            if partial
                .entry(row.video_id.clone())
                .or_default()
                .insert(row.segment_index, flag)
                .is_some()
            {
                return Err(Error::invalid(
                    "truth",
                    format!("duplicate row {} / {}", row.video_id, row.segment_index),
                ));
            }
        }
        let mut videos = BTreeMap::new();
        for (id, rows) in partial {
            if rows.keys().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::invalid("truth", format!("segment indices of {id} are not contiguous from 0")));
            }
            videos.insert(id, rows.into_values().collect());
        }
        Ok(SegmentTruth { videos })
    }
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<SegmentTruth> {
    let path = path.as_ref();
    let bytes = crate::binio::read_file(path)?;
    SegmentTruth::from_csv(&bytes, &path.display().to_string())
}

pub fn write_truth(path: impl AsRef<Path>, truth: &SegmentTruth) -> Result<()> {
    crate::binio::write_file(path.as_ref(), &truth.to_csv()?)
}
