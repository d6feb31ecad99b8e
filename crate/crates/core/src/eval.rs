//! Evaluation: score timelines, frame expansion, ROC/AUC and false-alarm
//! rates, plus JSON/CSV export of the resulting report.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::dataset::{load_split, DatasetManifest, SegmentTruth, Split, VideoEntry};
use crate::scalar::Scalar;
use crate::scorer::{score_segments, ScorerParams};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    #[default]
    Segment,
    Frame,
}

/// Which videos' normal units a false-alarm rate is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FarSide {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Frame `f` takes the score of segment `floor(f * n / n_frames)`.
pub fn expand_segments_to_frames<T: Copy>(scores: &[T], n_frames: usize) -> Vec<T> {
    let n = scores.len() as u128;
    (0..n_frames)
        .map(|f| scores[(f as u128 * n / n_frames as u128) as usize])
        .collect()
}

fn check_units<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dims("scores vs labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", format!("score {i} is not finite")));
    }
    Ok(())
}

/// ROC points from (0, 0) to (1, 1), one per distinct score taken as a
/// threshold in descending order. Equal scores form a single step.
pub fn roc_curve<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Vec<RocPoint>> {
    check_units(scores, labels)?;
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass(format!(
            "{positives} positive and {negatives} negative units; ROC needs both"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC points.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

/// Percentage of label-0 units scored at or above `threshold`.
pub fn false_alarm_rate<T: Scalar>(scores: &[T], labels: &[bool], threshold: f64) -> Result<f64> {
    check_units(scores, labels)?;
    rate_pct(scores, labels, false, |s| s >= threshold)
        .ok_or_else(|| Error::invalid("false alarm rate", "no normal units"))
}

/// Percentage of label-1 units scored below `threshold`.
pub fn miss_rate<T: Scalar>(scores: &[T], labels: &[bool], threshold: f64) -> Result<f64> {
    check_units(scores, labels)?;
    rate_pct(scores, labels, true, |s| s < threshold).ok_or_else(|| Error::invalid("miss rate", "no anomalous units"))
}

fn rate_pct<T: Scalar>(scores: &[T], labels: &[bool], class: bool, hit: impl Fn(f64) -> bool) -> Option<f64> {
    let (mut n, mut k) = (0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        if *l == class {
            n += 1;
            if hit(s.to_f64_lossy()) {
                k += 1;
            }
        }
    }
    (n > 0).then(|| 100.0 * k as f64 / n as f64)
}

/// Anything that maps segment features to abnormality scores.
pub trait SegmentScorer<T>: Sync {
    fn score_segments(&self, segments: &[Vec<T>]) -> Result<Vec<T>>;
}

impl<T: Scalar> SegmentScorer<T> for ScorerParams<T> {
    fn score_segments(&self, segments: &[Vec<T>]) -> Result<Vec<T>> {
        score_segments(self, segments)
    }
}

/// A test video ready for scoring.
#[derive(Clone, Debug)]
pub struct EvalVideo<T> {
    pub entry: VideoEntry,
    pub segments: Vec<Vec<T>>,
    pub segment_truth: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTimeline {
    pub video_id: String,
    pub abnormal: bool,
    pub segment_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_truth: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub threshold: f64,
    pub n_units: usize,
    pub auc: f64,
    pub roc_points: Vec<RocPoint>,
    /// False alarms among units of normal videos, in percent.
    pub far_normal_pct: Option<f64>,
    /// False alarms among normal-labeled units inside abnormal videos.
    pub far_abnormal_pct: Option<f64>,
    /// Anomalous units scored below the threshold.
    pub miss_rate_pct: Option<f64>,
    pub timelines: Vec<ScoreTimeline>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub level: EvalLevel,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            level: EvalLevel::Segment,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Segment labels: the truth sidecar when present, else segments that
/// overlap an annotated frame.
fn segment_labels<T>(v: &EvalVideo<T>) -> Result<Vec<bool>> {
    let n = v.segments.len();
    if !v.entry.is_abnormal() {
        return Ok(vec![false; n]);
    }
    if let Some(t) = &v.segment_truth {
        if t.len() != n {
            return Err(Error::dims(format!("segment truth of {}", v.entry.id), n, t.len()));
        }
        return Ok(t.clone());
    }
    let frames = v
        .entry
        .frame_labels()
        .ok_or_else(|| Error::invalid("labels", format!("no segment truth or annotations for {}", v.entry.id)))?;
    let nf = frames.len();
    Ok((0..n)
        .map(|i| {
            let start = i * nf / n;
            let end = ((i + 1) * nf / n).max(start + 1).min(nf);
            frames[start..end].iter().any(|f| *f)
        })
        .collect())
}

fn frame_labels<T>(v: &EvalVideo<T>) -> Result<Vec<bool>> {
    if let Some(f) = v.entry.frame_labels() {
        return Ok(f);
    }
    match &v.segment_truth {
        Some(t) => Ok(expand_segments_to_frames(t, v.entry.n_frames as usize)),
        None => Err(Error::invalid(
            "labels",
            format!("no annotations or segment truth for frame-level evaluation of {}", v.entry.id),
        )),
    }
}

/// Scores every test video in eval mode and pools all units (segments or
/// frames) across videos for ROC/AUC and the false-alarm rates.
pub fn evaluate<T: Scalar, S: SegmentScorer<T>>(
    scorer: &S,
    videos: &[EvalVideo<T>],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::invalid("test split", "no videos"));
    }
    let scored = videos
        .par_iter()
        .map(|v| scorer.score_segments(&v.segments))
        .collect::<Result<Vec<_>>>()?;

    let mut unit_scores = Vec::new();
    let mut unit_labels = Vec::new();
    let mut unit_abnormal_video = Vec::new();
    let mut timelines = Vec::with_capacity(videos.len());
    for (v, scores) in videos.iter().zip(scored) {
        let scores: Vec<f64> = scores.iter().map(|s| s.to_f64_lossy()).collect();
        let seg_labels = segment_labels(v).ok();
        let (units, labels, frame_scores) = match options.level {
            EvalLevel::Segment => {
                let labels = segment_labels(v)?;
                (scores.clone(), labels, None)
            }
            EvalLevel::Frame => {
                let frames = expand_segments_to_frames(&scores, v.entry.n_frames as usize);
                (frames.clone(), frame_labels(v)?, Some(frames))
            }
        };
        unit_abnormal_video.extend(std::iter::repeat_n(v.entry.is_abnormal(), units.len()));
        unit_scores.extend(units);
        unit_labels.extend(labels);
        timelines.push(ScoreTimeline {
            video_id: v.entry.id.clone(),
            abnormal: v.entry.is_abnormal(),
            segment_scores: scores,
            segment_truth: seg_labels,
            frame_scores,
        });
    }

    let roc_points = roc_curve(&unit_scores, &unit_labels)?;
    let side = |abnormal_video: bool| -> (Vec<f64>, Vec<bool>) {
        unit_scores
            .iter()
            .zip(&unit_labels)
            .zip(&unit_abnormal_video)
            .filter(|(_, a)| **a == abnormal_video)
            .map(|((s, l), _)| (*s, *l))
            .unzip()
    };
    let (normal_scores, normal_labels) = side(false);
    let (abnormal_scores, abnormal_labels) = side(true);
    Ok(EvalReport {
        level: options.level,
        threshold: options.threshold,
        n_units: unit_scores.len(),
        auc: auc(&roc_points),
        roc_points,
        far_normal_pct: false_alarm_rate(&normal_scores, &normal_labels, options.threshold).ok(),
        far_abnormal_pct: false_alarm_rate(&abnormal_scores, &abnormal_labels, options.threshold).ok(),
        miss_rate_pct: miss_rate(&unit_scores, &unit_labels, options.threshold).ok(),
        timelines,
    })
}

/// False-alarm rate of one side computed from a finished report's timelines
/// at segment level.
pub fn far_for_side(report: &EvalReport, side: FarSide, threshold: f64) -> Result<f64> {
    let want_abnormal = side == FarSide::Abnormal;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for t in report.timelines.iter().filter(|t| t.abnormal == want_abnormal) {
        let truth = match (&t.segment_truth, t.abnormal) {
            (Some(tr), _) => tr.clone(),
            (None, false) => vec![false; t.segment_scores.len()],
            (None, true) => return Err(Error::invalid("labels", format!("no segment truth for {}", t.video_id))),
        };
        scores.extend_from_slice(&t.segment_scores);
        labels.extend(truth);
    }
    false_alarm_rate(&scores, &labels, threshold)
}

/// Loads the test split with segment truth from `truth` where available.
pub fn load_eval_videos<T: Scalar>(
    manifest: &DatasetManifest,
    base_dir: &Path,
    truth: Option<&SegmentTruth>,
    n_segments: usize,
    dim: Option<usize>,
) -> Result<Vec<EvalVideo<T>>> {
    Ok(load_split::<T>(manifest, base_dir, Split::Test, n_segments, dim)?
        .into_iter()
        .map(|(entry, bag)| EvalVideo {
            segment_truth: truth.and_then(|t| t.get(&entry.id)).map(<[bool]>::to_vec),
            entry,
            segments: bag.instances,
        })
        .collect())
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: "report".into(),
            source: e,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_owned(),
            source: e,
        })
    }

    /// `fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.roc_points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        out
    }

    /// `video_id,segment_index,score,truth` rows; truth is empty when unknown.
    pub fn timelines_csv(&self) -> String {
        let mut out = String::from("video_id,segment_index,score,truth\n");
        for t in &self.timelines {
            for (i, s) in t.segment_scores.iter().enumerate() {
                let truth = t
                    .segment_truth
                    .as_ref()
                    .map_or(String::new(), |tr| (tr[i] as u8).to_string());
                out.push_str(&format!("{},{},{},{}\n", t.video_id, i, s, truth));
            }
        }
        out
    }

    /// Writes `report.json`, `roc.csv` and `timelines.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        self.write_plot_csvs(dir)
    }

    pub fn write_plot_csvs(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("roc.csv"), self.roc_csv().as_bytes())?;
        write_file(&dir.join("timelines.csv"), self.timelines_csv().as_bytes())
    }
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::invalid("report", e.to_string()))?;
    EvalReport::from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, VideoLabel};

    fn pts(points: &[RocPoint]) -> Vec<(f64, f64)> {
        points.iter().map(|p| (p.fpr, p.tpr)).collect()
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_segments_to_frames(&[0.1, 0.9], 4), vec![0.1, 0.1, 0.9, 0.9]);
        assert_eq!(expand_segments_to_frames(&[0.3], 5), vec![0.3; 5]);
        let s: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert_eq!(expand_segments_to_frames(&s, 32), s);
    }

    #[test]
    fn roc_examples() {
        let r = roc_curve(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(pts(&r), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let r = roc_curve(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(pts(&r), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&r), 0.5);
        let a = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, false, false, true]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(roc_curve(&[0.1, 0.2], &[false, false]), Err(Error::SingleClass(_))));
        assert!(roc_curve(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn far_examples() {
        let l = [false; 4];
        assert_eq!(false_alarm_rate(&[0.6, 0.4, 0.55, 0.2], &l, 0.5).unwrap(), 50.0);
        assert_eq!(false_alarm_rate(&[0.1, 0.4, 0.45, 0.2], &l, 0.5).unwrap(), 0.0);
        assert_eq!(false_alarm_rate(&[0.5], &[false], 0.5).unwrap(), 100.0);
        assert!(false_alarm_rate(&[0.5], &[true], 0.5).is_err());
        assert_eq!(miss_rate(&[0.5, 0.49], &[true, true], 0.5).unwrap(), 50.0);
    }

    #[test]
    fn far_threshold_extremes() {
        let s = [0.01, 0.5, 0.99];
        let l = [false; 3];
        assert_eq!(false_alarm_rate(&s, &l, 0.0).unwrap(), 100.0);
        assert_eq!(false_alarm_rate(&s, &l, 1.01).unwrap(), 0.0);
    }

    struct Constant(f64);
    impl SegmentScorer<f64> for Constant {
        fn score_segments(&self, segments: &[Vec<f64>]) -> Result<Vec<f64>> {
            Ok(vec![self.0; segments.len()])
        }
    }

    fn video(id: &str, abnormal: bool, truth: Option<Vec<bool>>, n: usize) -> EvalVideo<f64> {
        EvalVideo {
            entry: VideoEntry {
                id: id.into(),
                feature_path: String::new(),
                label: if abnormal { VideoLabel::Abnormal } else { VideoLabel::Normal },
                split: Split::Test,
                n_frames: 4 * n as u64,
                fps: 30.0,
                annotations: None,
            },
            segments: vec![vec![0.0]; n],
            segment_truth: truth,
        }
    }

    #[test]
    fn constant_scorer_report() {
        let vids = vec![
            video("a", true, Some(vec![true, false, false, true]), 4),
            video("n", false, None, 4),
        ];
        let r = evaluate(&Constant(0.5), &vids, &EvalOptions::default()).unwrap();
        assert_eq!(pts(&r.roc_points), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.far_normal_pct, Some(100.0));
        assert_eq!(r.far_abnormal_pct, Some(100.0));
        assert_eq!(r.miss_rate_pct, Some(0.0));
        assert_eq!(far_for_side(&r, FarSide::Normal, 0.5).unwrap(), 100.0);
        assert_eq!(far_for_side(&r, FarSide::Abnormal, 0.6).unwrap(), 0.0);
    }

    #[test]
    fn only_normal_videos_is_single_class() {
        let vids = vec![video("n1", false, None, 4), video("n2", false, None, 4)];
        assert!(matches!(
            evaluate(&Constant(0.5), &vids, &EvalOptions::default()),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn labels_from_annotations_and_missing_labels() {
        let mut v = video("a", true, None, 4);
        v.entry.annotations = Some(vec![[4, 5]]);
        assert_eq!(segment_labels(&v).unwrap(), vec![false, true, false, false]);
        let f = frame_labels(&v).unwrap();
        assert_eq!(f.iter().filter(|x| **x).count(), 2);
        v.entry.annotations = None;
        assert!(segment_labels(&v).is_err());
        assert!(frame_labels(&v).is_err());
    }

    #[test]
    fn csv_exports() {
        let vids = vec![video("a", true, Some(vec![true, false]), 2), video("n", false, None, 2)];
        let r = evaluate(&Constant(0.25), &vids, &EvalOptions::default()).unwrap();
        assert_eq!(r.roc_csv(), "fpr,tpr\n0,0\n1,1\n");
        assert_eq!(
            r.timelines_csv(),
            "video_id,segment_index,score,truth\na,0,0.25,1\na,1,0.25,0\nn,0,0.25,0\nn,1,0.25,0\n"
        );
        let back = EvalReport::from_json(&r.to_json().unwrap(), "r").unwrap();
        assert_eq!(back, r);
    }
}
