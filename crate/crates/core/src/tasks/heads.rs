use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{TaskKind, TaskSpec};
use crate::diffcore::{ParameterStore, Session, Tape, Tensor, Var};
use crate::rng::{init_uniform, Key};
use crate::{Error, Result};

/// Features handed to a head.
#[derive(Debug, Clone)]
pub enum HeadInput {
    /// One aligned row per annotated span.
    Aligned(Var),
    /// Per-node features, one entry per consumed stage with its stage index.
    Nodes(Vec<(Var, usize)>),
}

#[derive(Debug, Clone)]
pub struct LocalizationStage {
    pub classes: Var,
    /// Non-negative (left, right) offsets in units of `scale` seconds.
    pub offsets: Var,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub enum HeadOutput {
    Recognition { verb: Var, noun: Var },
    StateChange { logits: Var },
    Keyframe { scores: Var },
    Anticipation { verbs: Vec<Var>, nouns: Vec<Var> },
    Localization { stages: Vec<LocalizationStage> },
}

fn layer_shapes(spec: &TaskSpec, dim: usize) -> Vec<(String, usize)> {
    match spec.kind {
        TaskKind::Recognition => vec![("verb".into(), spec.verbs), ("noun".into(), spec.nouns)],
        TaskKind::StateChange => vec![("out".into(), 2)],
        TaskKind::Keyframe => vec![("out".into(), 1)],
        TaskKind::Anticipation => (0..spec.horizon)
            .flat_map(|z| {
                [
                    (format!("z{z}.verb"), spec.verbs),
                    (format!("z{z}.noun"), spec.nouns),
                ]
            })
            .collect(),
        TaskKind::Localization => vec![("out".into(), spec.classes + 2)],
    }
    .into_iter()
    .map(|(n, w)| {
        let _ = dim;
        (n, w)
    })
    .collect()
}

pub fn init_head(
    store: &mut ParameterStore,
    key: Key,
    prefix: &str,
    spec: &TaskSpec,
    dim: usize,
) -> Result<()> {
    spec.validate()?;
    let b = 1.0 / libm::sqrt(dim as f64);
    for (name, width) in layer_shapes(spec, dim) {
        let w = format!("{prefix}.{name}.w");
        let bias = format!("{prefix}.{name}.b");
        store.insert(&w, init_uniform(key, &w, &[dim, width], b))?;
        store.insert(&bias, init_uniform(key, &bias, &[width], b))?;
    }
    Ok(())
}

fn affine(sess: &mut Session, prefix: &str, name: &str, x: Var) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.{name}.w"))?;
    let b = sess.param(&format!("{prefix}.{name}.b"))?;
    let y = sess.tape.matmul(x, w)?;
    sess.tape.add_row(y, b)
}

pub fn head_forward(
    sess: &mut Session,
    prefix: &str,
    spec: &TaskSpec,
    input: &HeadInput,
) -> Result<HeadOutput> {
    let mismatch = || {
        Err(Error::Usage(format!(
            "task {} cannot consume {}",
            spec.kind,
            match input {
                HeadInput::Aligned(_) => String::from("aligned features"),
                HeadInput::Nodes(s) => format!("per-node features from {} stage(s)", s.len()),
            }
        )))
    };
    match (spec.kind, input) {
        (TaskKind::Recognition, HeadInput::Aligned(x)) => Ok(HeadOutput::Recognition {
            verb: affine(sess, prefix, "verb", *x)?,
            noun: affine(sess, prefix, "noun", *x)?,
        }),
        (TaskKind::StateChange, HeadInput::Aligned(x)) => Ok(HeadOutput::StateChange {
            logits: affine(sess, prefix, "out", *x)?,
        }),
        (TaskKind::Anticipation, HeadInput::Aligned(x)) => {
            let mut verbs = Vec::with_capacity(spec.horizon);
            let mut nouns = Vec::with_capacity(spec.horizon);
            for z in 0..spec.horizon {
                verbs.push(affine(sess, prefix, &format!("z{z}.verb"), *x)?);
                nouns.push(affine(sess, prefix, &format!("z{z}.noun"), *x)?);
            }
            Ok(HeadOutput::Anticipation { verbs, nouns })
        }
        (TaskKind::Keyframe, HeadInput::Nodes(stages)) if stages.len() == 1 => {
            Ok(HeadOutput::Keyframe {
                scores: affine(sess, prefix, "out", stages[0].0)?,
            })
        }
        (TaskKind::Localization, HeadInput::Nodes(stages)) if !stages.is_empty() => {
            let mut out = Vec::with_capacity(stages.len());
            for &(x, stage) in stages {
                let y = affine(sess, prefix, "out", x)?;
                let classes = sess.tape.slice_cols(y, 0, spec.classes)?;
                let raw = sess.tape.slice_cols(y, spec.classes, 2)?;
                let offsets = sess.tape.softplus(raw);
                out.push(LocalizationStage {
                    classes,
                    offsets,
                    scale: libm::ldexp(1.0, stage as i32),
                });
            }
            Ok(HeadOutput::Localization { stages: out })
        }
        _ => mismatch(),
    }
}

impl HeadOutput {
    fn vars(&self) -> Vec<Var> {
        match self {
            HeadOutput::Recognition { verb, noun } => vec![*verb, *noun],
            HeadOutput::StateChange { logits } => vec![*logits],
            HeadOutput::Keyframe { scores } => vec![*scores],
            HeadOutput::Anticipation { verbs, nouns } => {
                verbs.iter().chain(nouns).copied().collect()
            }
            HeadOutput::Localization { stages } => stages
                .iter()
                .flat_map(|s| [s.classes, s.offsets])
                .collect(),
        }
    }

    fn with_vars(&self, mut vars: impl Iterator<Item = Var>) -> HeadOutput {
        let mut next = || vars.next().expect("same layout");
        match self {
            HeadOutput::Recognition { .. } => HeadOutput::Recognition {
                verb: next(),
                noun: next(),
            },
            HeadOutput::StateChange { .. } => HeadOutput::StateChange { logits: next() },
            HeadOutput::Keyframe { .. } => HeadOutput::Keyframe { scores: next() },
            HeadOutput::Anticipation { verbs, .. } => {
                let z = verbs.len();
                let all: Vec<Var> = (0..2 * z).map(|_| next()).collect();
                HeadOutput::Anticipation {
                    verbs: all[..z].to_vec(),
                    nouns: all[z..].to_vec(),
                }
            }
            HeadOutput::Localization { stages } => HeadOutput::Localization {
                stages: stages
                    .iter()
                    .map(|s| LocalizationStage {
                        classes: next(),
                        offsets: next(),
                        scale: s.scale,
                    })
                    .collect(),
            },
        }
    }

    /// Elementwise sum of two outputs of the same layout.
    pub fn add(&self, tape: &mut Tape, other: &HeadOutput) -> Result<HeadOutput> {
        let (a, b) = (self.vars(), other.vars());
        if a.len() != b.len() || core::mem::discriminant(self) != core::mem::discriminant(other) {
            return Err(Error::dim("head_output_add", &[a.len()], &[b.len()]));
        }
        let mut sums = Vec::with_capacity(a.len());
        for (x, y) in a.into_iter().zip(b) {
            sums.push(tape.add(x, y)?);
        }
        Ok(self.with_vars(sums.into_iter()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationTargets {
    /// Positive node indices at this stage.
    pub nodes: Vec<usize>,
    pub classes: Vec<usize>,
    /// Distances in seconds from the node to the interval start and end.
    pub offsets: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Recognition { verbs: Vec<usize>, nouns: Vec<usize> },
    StateChange { flags: Vec<usize> },
    /// Node windows per span and the index of the target node within each.
    Keyframe { windows: Vec<Vec<usize>>, targets: Vec<usize> },
    Anticipation { verbs: Vec<Vec<usize>>, nouns: Vec<Vec<usize>> },
    Localization(Vec<LocalizationTargets>),
}

fn transpose(rows: &[Vec<usize>], z: usize) -> Result<Vec<Vec<usize>>> {
    if rows.iter().any(|r| r.len() != z) {
        return Err(Error::Validation(format!("anticipation targets must have length {z}")));
    }
    Ok((0..z).map(|k| rows.iter().map(|r| r[k]).collect()).collect())
}

/// Scalar training loss of a head output.
///
/// Recognition and anticipation add verb and noun cross-entropies (the
/// latter averaged over the horizon); localization adds class cross-entropy
/// and an L1 offset term over positive nodes of every stage.
pub fn task_loss(tape: &mut Tape, output: &HeadOutput, targets: &Targets) -> Result<Var> {
    match (output, targets) {
        (HeadOutput::Recognition { verb, noun }, Targets::Recognition { verbs, nouns }) => {
            let a = tape.cross_entropy(*verb, verbs)?;
            let b = tape.cross_entropy(*noun, nouns)?;
            tape.add(a, b)
        }
        (HeadOutput::StateChange { logits }, Targets::StateChange { flags }) => {
            tape.cross_entropy(*logits, flags)
        }
        (HeadOutput::Keyframe { scores }, Targets::Keyframe { windows, targets }) => {
            if windows.len() != targets.len() || windows.is_empty() {
                return Err(Error::Validation("keyframe windows and targets differ".into()));
            }
            let mut total = None;
            for (w, &t) in windows.iter().zip(targets) {
                let s = tape.gather_rows(*scores, w)?;
                let s = tape.reshape(s, &[1, w.len()])?;
                let l = tape.cross_entropy(s, &[t])?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            Ok(tape.scale(total.expect("non-empty"), 1.0 / windows.len() as f64))
        }
        (HeadOutput::Anticipation { verbs, nouns }, Targets::Anticipation { verbs: tv, nouns: tn }) => {
            let z = verbs.len();
            let (tv, tn) = (transpose(tv, z)?, transpose(tn, z)?);
            let mut total = None;
            for k in 0..z {
                let a = tape.cross_entropy(verbs[k], &tv[k])?;
                let b = tape.cross_entropy(nouns[k], &tn[k])?;
                let ab = tape.add(a, b)?;
                total = Some(match total {
                    None => ab,
                    Some(acc) => tape.add(acc, ab)?,
                });
            }
            Ok(tape.scale(total.expect("horizon > 0"), 1.0 / z as f64))
        }
        (HeadOutput::Localization { stages }, Targets::Localization(per_stage)) => {
            if stages.len() != per_stage.len() {
                return Err(Error::dim("localization_loss", &[stages.len()], &[per_stage.len()]));
            }
            let mut cls_rows = Vec::new();
            let mut off_rows = Vec::new();
            let mut labels = Vec::new();
            let mut off_targets = Vec::new();
            for (st, tg) in stages.iter().zip(per_stage) {
                if tg.nodes.is_empty() {
                    continue;
                }
                cls_rows.push(tape.gather_rows(st.classes, &tg.nodes)?);
                off_rows.push(tape.gather_rows(st.offsets, &tg.nodes)?);
                labels.extend_from_slice(&tg.classes);
                off_targets.extend(tg.offsets.iter().flat_map(|o| [o[0] / st.scale, o[1] / st.scale]));
            }
            if cls_rows.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let cls = tape.concat_rows(&cls_rows)?;
            let ce = tape.cross_entropy(cls, &labels)?;
            let off = tape.concat_rows(&off_rows)?;
            let n = off_targets.len() / 2;
            let target = tape.constant(Tensor::matrix(n, 2, off_targets)?);
            let d = tape.sub(off, target)?;
            let d = tape.abs(d);
            let l1 = tape.mean(d);
            tape.add(ce, l1)
        }
        _ => Err(Error::Usage("targets do not match the head output kind".into())),
    }
}

/// Row-wise softmax of a score matrix.
pub fn softmax_rows(scores: &Tensor) -> Tensor {
    let mut out = scores.clone();
    let w = out.row_width();
    for row in out.data_mut().chunks_mut(w) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}
