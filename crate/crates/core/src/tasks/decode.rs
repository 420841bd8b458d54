use alloc::format;
use alloc::vec::Vec;

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// A scored interval prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

/// A ground-truth interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

/// Temporal intersection over union of two closed intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy hard NMS within each (video, class); a detection is dropped when
/// its tIoU with an already kept one exceeds `iou`. Output is sorted by
/// descending score, ties in input order.
pub fn nms(dets: &[Detection], iou: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = dets[i];
        let clash = kept.iter().any(|k| {
            k.video == d.video && k.class == d.class && tiou((k.start, k.end), (d.start, d.end)) > iou
        });
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Turns per-node class probabilities (N×K) and left/right offsets in
/// seconds (N×2) into deduplicated detections.
pub fn decode_localization(
    probs: &Tensor,
    offsets: &Tensor,
    pe: &[f64],
    video: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    for (name, t) in [("score_threshold", score_threshold), ("nms_iou", nms_iou)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Validation(format!("{name} must lie in (0, 1), got {t}")));
        }
    }
    let n = pe.len();
    if probs.rows() != n || offsets.shape() != [n, 2] {
        return Err(Error::dim("decode_localization", probs.shape(), offsets.shape()));
    }
    let mut cands = Vec::new();
    for (i, &t) in pe.iter().enumerate() {
        let off = offsets.row(i);
        for (c, &p) in probs.row(i).iter().enumerate() {
            if p > score_threshold {
                cands.push(Detection {
                    video,
                    start: t - off[0],
                    end: t + off[1],
                    class: c,
                    score: p,
                });
            }
        }
    }
    Ok(nms(&cands, nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Key;
    use alloc::vec;

    fn det(start: f64, end: f64, class: usize, score: f64) -> Detection {
        Detection { video: 0, start, end, class, score }
    }

    #[test]
    fn single_candidate_passes_through() {
        let probs = Tensor::matrix(1, 2, vec![0.2, 0.8]).unwrap();
        let off = Tensor::matrix(1, 2, vec![0.5, 1.0]).unwrap();
        let out = decode_localization(&probs, &off, &[3.0], 0, 0.5, 0.5).unwrap();
        assert_eq!(out, vec![det(2.5, 4.0, 1, 0.8)]);
    }

    #[test]
    fn duplicates_are_suppressed() {
        let out = nms(&[det(1.0, 2.0, 0, 0.8), det(1.0, 2.0, 0, 0.9)], 0.5);
        assert_eq!(out, vec![det(1.0, 2.0, 0, 0.9)]);
        let other_class = nms(&[det(1.0, 2.0, 0, 0.8), det(1.0, 2.0, 1, 0.9)], 0.5);
        assert_eq!(other_class.len(), 2);
    }

    #[test]
    fn thresholds_are_checked() {
        let p = Tensor::zeros(&[1, 1]);
        let o = Tensor::zeros(&[1, 2]);
        assert!(decode_localization(&p, &o, &[0.0], 0, 1.0, 0.5).is_err());
        assert!(decode_localization(&p, &o, &[0.0], 0, 0.5, 0.0).is_err());
    }

    #[test]
    fn tiou_basics() {
        assert_eq!(tiou((0.0, 2.0), (1.0, 3.0)), 1.0 / 3.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(tiou((1.0, 1.0), (1.0, 1.0)), 0.0);
    }

    /// Exhaustive oracle: a set is the greedy result iff every member beats
    /// all higher-ranked suppressors and every non-member is suppressed by a
    /// higher-ranked member. Enumerating subsets finds the unique such set.
    fn brute_force(dets: &[Detection], iou: f64) -> Vec<usize> {
        let n = dets.len();
        let rank = |i: usize, j: usize| {
            dets[i].score > dets[j].score || (dets[i].score == dets[j].score && i < j)
        };
        let clash = |i: usize, j: usize| {
            dets[i].class == dets[j].class
                && tiou((dets[i].start, dets[i].end), (dets[j].start, dets[j].end)) > iou
        };
        let mut found = Vec::new();
        for mask in 0u32..(1 << n) {
            let inside = |i: usize| mask >> i & 1 == 1;
            let ok = (0..n).all(|i| {
                let suppressed = (0..n).any(|j| j != i && inside(j) && rank(j, i) && clash(i, j));
                inside(i) != suppressed
            });
            if ok {
                found.push(mask);
            }
        }
        assert_eq!(found.len(), 1);
        (0..n).filter(|&i| found[0] >> i & 1 == 1).collect()
    }

    #[test]
    fn nms_matches_exhaustive_oracle() {
        for trial in 0..50u64 {
            let mut s = Key::new(trial).stream();
            let dets: Vec<Detection> = (0..10)
                .map(|_| {
                    let a = s.range(0.0, 10.0);
                    det(a, a + s.range(0.5, 4.0), s.below(2), (s.below(5) as f64) / 5.0)
                })
                .collect();
            let mut want: Vec<Detection> = brute_force(&dets, 0.5).into_iter().map(|i| dets[i]).collect();
            let mut got = nms(&dets, 0.5);
            let key = |d: &Detection| (d.start.to_bits(), d.class);
            want.sort_by_key(key);
            got.sort_by_key(key);
            assert_eq!(got, want, "trial {trial}");
        }
    }
}
