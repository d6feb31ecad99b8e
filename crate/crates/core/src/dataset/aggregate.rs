//! Clip-to-segment pooling.

use crate::scalar::Scalar;
use crate::Result;
use crate::{dataset::ClipFeatureMatrix, Error};

/// Clip rows averaged into segment `i` of `n` for a video with `t` clips:
/// `[floor(i*t/n), floor((i+1)*t/n))`, or the single row `floor(i*t/n)`
/// when that range is empty.
pub fn segment_clip_range(i: usize, n: usize, t: usize) -> std::ops::Range<usize> {
    let start = i * t / n;
    let end = (i + 1) * t / n;
    if end > start {
        start..end
    } else {
        start..start + 1
    }
}

/// Scales `v` to unit L2 norm in place. Zero vectors are left unchanged.
pub fn l2_normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
    if norm > T::zero() {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Mean-pools clip rows into `n` segment features, then L2-normalizes each.
pub fn aggregate_clips_to_segments<T: Scalar>(matrix: &ClipFeatureMatrix<T>, n: usize) -> Result<Vec<Vec<T>>> {
    if n == 0 {
        return Err(Error::invalid("segment count", "must be >= 1"));
    }
    let t = matrix.num_clips();
    let d = matrix.dim();
    Ok((0..n)
        .map(|i| {
            let range = segment_clip_range(i, n, t);
            let count = T::lit(range.len() as f64);
            let mut seg = vec![T::zero(); d];
            for r in range {
                for (s, v) in seg.iter_mut().zip(matrix.row(r)) {
                    *s += *v;
                }
            }
            seg.iter_mut().for_each(|s| *s /= count);
            l2_normalize(&mut seg);
            seg
        })
        .collect())
}
