use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::decode::{tiou, Detection, Interval};
use super::{TaskKind, TaskSpec};
use crate::{Error, Result};

pub const TIOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn same_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!(
            "{op}: {a} predictions for {b} ground-truth items"
        )));
    }
    Ok(())
}

/// Percentage of exact matches.
pub fn top1_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len("top1_accuracy", pred.len(), truth.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the longer sequence length.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let z = a.len().max(b.len());
    if z == 0 {
        0.0
    } else {
        edit_distance(a, b) as f64 / z as f64
    }
}

/// All-point interpolated average precision of one class at one tIoU
/// threshold, in `[0, 1]`. Detections are matched greedily by descending
/// score to the unmatched same-video ground truth of highest tIoU.
/// Returns `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Interval],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let gt: Vec<&Interval> = gts.iter().filter(|g| g.class == class).collect();
    if gt.is_empty() {
        return None;
    }
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::with_capacity(ds.len());
    for d in &ds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.video != d.video {
                continue;
            }
            let o = tiou((d.start, d.end), (g.start, g.end));
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, o)) if o >= threshold => {
                used[j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / gt.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    Some(ap)
}

/// mAP in percent per threshold, averaged over classes with ground truth,
/// and the mean over thresholds.
pub fn mean_average_precision(
    dets: &[Detection],
    gts: &[Interval],
    thresholds: &[f64],
) -> (f64, Vec<f64>) {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            let s: f64 = classes
                .iter()
                .map(|&c| average_precision(dets, gts, c, t).unwrap_or(0.0))
                .sum();
            100.0 * s / classes.len() as f64
        })
        .collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (mean, per)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Recognition { verbs: Vec<usize>, nouns: Vec<usize> },
    StateChange(Vec<usize>),
    Keyframe(Vec<f64>),
    Anticipation { verbs: Vec<Vec<usize>>, nouns: Vec<Vec<usize>> },
    Localization(Vec<Detection>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Recognition { verbs: Vec<usize>, nouns: Vec<usize> },
    StateChange(Vec<usize>),
    Keyframe(Vec<f64>),
    Anticipation { verbs: Vec<Vec<usize>>, nouns: Vec<Vec<usize>> },
    Localization(Vec<Interval>),
}

/// Named scalar results of one evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRecord(pub BTreeMap<String, f64>);

impl MetricRecord {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn insert(&mut self, key: &str, v: f64) {
        self.0.insert(key.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Mean of the headline metrics, negated where lower is better, so that
    /// larger is always better.
    pub fn score(&self, kind: TaskKind) -> Option<f64> {
        let h = Self::headline(kind);
        let mut total = 0.0;
        for &(k, up) in h {
            let v = self.get(k)?;
            total += if up { v } else { -v };
        }
        Some(total / h.len() as f64)
    }

    /// Headline metric keys of a task with their direction (true when
    /// higher is better).
    pub fn headline(kind: TaskKind) -> &'static [(&'static str, bool)] {
        match kind {
            TaskKind::Recognition => &[("verb_top1", true), ("noun_top1", true)],
            TaskKind::StateChange => &[("accuracy", true)],
            TaskKind::Keyframe => &[("keyframe_error_s", false)],
            TaskKind::Anticipation => &[("verb_ed", false), ("noun_ed", false)],
            TaskKind::Localization => &[("map", true)],
        }
    }
}

fn mean_ed(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    same_len("edit_distance", pred.len(), truth.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| normalized_edit_distance(p, t))
        .sum::<f64>()
        / truth.len() as f64)
}

pub fn metric(spec: &TaskSpec, pred: &Predictions, truth: &GroundTruth) -> Result<MetricRecord> {
    let mut rec = MetricRecord::default();
    match (spec.kind, pred, truth) {
        (
            TaskKind::Recognition,
            Predictions::Recognition { verbs, nouns },
            GroundTruth::Recognition { verbs: tv, nouns: tn },
        ) => {
            rec.insert("verb_top1", top1_accuracy(verbs, tv)?);
            rec.insert("noun_top1", top1_accuracy(nouns, tn)?);
        }
        (TaskKind::StateChange, Predictions::StateChange(p), GroundTruth::StateChange(t)) => {
            rec.insert("accuracy", top1_accuracy(p, t)?);
        }
        (TaskKind::Keyframe, Predictions::Keyframe(p), GroundTruth::Keyframe(t)) => {
            same_len("keyframe", p.len(), t.len())?;
            let err = if t.is_empty() {
                0.0
            } else {
                p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64
            };
            rec.insert("keyframe_error_s", err);
        }
        (
            TaskKind::Anticipation,
            Predictions::Anticipation { verbs, nouns },
            GroundTruth::Anticipation { verbs: tv, nouns: tn },
        ) => {
            rec.insert("verb_ed", mean_ed(verbs, tv)?);
            rec.insert("noun_ed", mean_ed(nouns, tn)?);
        }
        (TaskKind::Localization, Predictions::Localization(d), GroundTruth::Localization(g)) => {
            let (mean, per) = mean_average_precision(d, g, &TIOU_THRESHOLDS);
            rec.insert("map", mean);
            for (t, v) in TIOU_THRESHOLDS.iter().zip(per) {
                rec.insert(&format!("map@{t:.1}"), v);
            }
        }
        _ => {
            return Err(Error::Usage(format!(
                "predictions and ground truth do not match task {}",
                spec.kind
            )))
        }
    }
    Ok(rec)
}
