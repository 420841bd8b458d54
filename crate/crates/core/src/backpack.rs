//! Frozen per-task prototypes, k-NN retrieval and interaction refinement.
//!
//! A support task's prototypes are the mean neck-projected features of every
//! verb-noun action. During novel-task learning the novel features, seen
//! through a support neck, retrieve their `k` closest prototypes and are
//! refined by `M` layers of
//!
//! ```text
//! X <- X W_r + mean(activated prototypes) W
//! ```
//!
//! Prototypes enter the tape as constants and never change.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{ParameterStore, Session, Tape, Tensor, Var};
use crate::tasks::{Action, TaskKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    task: TaskKind,
    matrix: Tensor,
    labels: Vec<Action>,
    frozen: bool,
}

impl PrototypeSet {
    /// Wraps an existing matrix; `labels` must be strictly increasing and
    /// match the row count.
    pub fn new(task: TaskKind, matrix: Tensor, labels: Vec<Action>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != labels.len() {
            return Err(Error::dim("prototype_set", matrix.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Validation(format!("{task}: prototype set is empty")));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("{task}: prototype labels must be unique and sorted")));
        }
        Ok(PrototypeSet { task, matrix, labels, frozen: false })
    }

    /// Group-by-mean over labelled feature rows. The result is frozen.
    pub fn from_samples(task: TaskKind, features: &Tensor, labels: &[Action]) -> Result<Self> {
        if features.rows() != labels.len() || features.shape().len() != 2 {
            return Err(Error::dim("build_prototypes", features.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Validation(format!("{task}: no samples to build prototypes from")));
        }
        let d = features.row_width();
        let mut groups: BTreeMap<Action, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, a) in labels.iter().enumerate() {
            let (sum, n) = groups.entry(*a).or_insert_with(|| (vec![0.0; d], 0));
            for (s, v) in sum.iter_mut().zip(features.row(i)) {
                *s += v;
            }
            *n += 1;
        }
        let mut data = Vec::with_capacity(groups.len() * d);
        let mut keys = Vec::with_capacity(groups.len());
        for (a, (sum, n)) in groups {
            keys.push(a);
            data.extend(sum.into_iter().map(|s| s / n as f64));
        }
        let mut set = Self::new(task, Tensor::matrix(keys.len(), d, data)?, keys)?;
        set.frozen = true;
        Ok(set)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn labels(&self) -> &[Action] {
        &self.labels
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.row_width()
    }

    /// Little-endian bytes of the matrix and labels, for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.matrix.numel() * 8 + self.labels.len() * 8);
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for a in &self.labels {
            out.extend_from_slice(&a.verb.to_le_bytes());
            out.extend_from_slice(&a.noun.to_le_bytes());
        }
        out
    }
}

/// One retrieved prototype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest prototype rows of every query row, by Euclidean
/// distance with ties to the lower row, sorted by `(distance, row)`.
pub fn knn_query(queries: &Tensor, protos: &PrototypeSet, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    let p = protos.len();
    if k == 0 || k > p {
        return Err(Error::Validation(format!(
            "k = {k} must lie in 1..={p} for {} prototypes",
            protos.task
        )));
    }
    if queries.row_width() != protos.dim() {
        return Err(Error::dim("knn_query", queries.shape(), protos.matrix.shape()));
    }
    let mut out = Vec::with_capacity(queries.rows());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(p);
    for q in 0..queries.rows() {
        let qr = queries.row(q);
        scored.clear();
        scored.extend((0..p).map(|r| (sq_dist(qr, protos.matrix.row(r)), r)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < p {
            scored.select_nth_unstable_by(k - 1, cmp);
        }
        let top = &mut scored[..k];
        top.sort_by(cmp);
        out.push(
            top.iter()
                .map(|&(d2, row)| Neighbor { row, distance: libm::sqrt(d2) })
                .collect(),
        );
    }
    Ok(out)
}

/// How novel features interact with a support task's prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    /// Root transform plus trainable prototype term.
    #[default]
    Full,
    /// Prototype weights frozen at zero.
    Zero,
    /// No retrieval at all; only the root transforms run.
    Off,
}

impl Coupling {
    pub fn id(self) -> &'static str {
        match self {
            Coupling::Full => "full",
            Coupling::Zero => "zero",
            Coupling::Off => "off",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Coupling::Full),
            "zero" => Ok(Coupling::Zero),
            "off" => Ok(Coupling::Off),
            _ => Err(Error::Validation(format!("unknown coupling {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionConfig {
    pub k: usize,
    pub layers: usize,
    pub requery: bool,
    pub coupling: Coupling,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig { k: 16, layers: 2, requery: false, coupling: Coupling::Full }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Validation("interaction needs at least one layer".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be positive".into()));
        }
        Ok(())
    }
}

pub fn interaction_prefix(task: TaskKind, layer: usize) -> alloc::string::String {
    format!("backpack.{task}.m{layer}")
}

/// Adds `W_r = I` for every layer of one support task. Under full coupling
/// `W = I / layers`, so with fixed neighbors the stack starts as
/// `X + mean(protos)`; otherwise `W = 0`.
pub fn init_interaction(
    store: &mut ParameterStore,
    task: TaskKind,
    dim: usize,
    layers: usize,
    coupling: Coupling,
) -> Result<()> {
    let w = match coupling {
        Coupling::Full => {
            let mut w = Tensor::eye(dim);
            w.data_mut().iter_mut().for_each(|v| *v /= layers as f64);
            w
        }
        Coupling::Zero | Coupling::Off => Tensor::zeros(&[dim, dim]),
    };
    for m in 0..layers {
        let p = interaction_prefix(task, m);
        store.insert(&format!("{p}.w_r"), Tensor::eye(dim))?;
        store.insert(&format!("{p}.w"), w.clone())?;
    }
    Ok(())
}

/// Whether a parameter is a prototype-coupling weight `W`.
pub fn is_coupling_weight(name: &str) -> bool {
    name.starts_with("backpack.") && name.ends_with(".w")
}

fn neighbor_mean(protos: &PrototypeSet, nbrs: &[Vec<Neighbor>]) -> Tensor {
    let d = protos.dim();
    let mut out = Tensor::zeros(&[nbrs.len(), d]);
    for (i, list) in nbrs.iter().enumerate() {
        let row = out.row_mut(i);
        for nb in list {
            for (o, v) in row.iter_mut().zip(protos.matrix.row(nb.row)) {
                *o += v;
            }
        }
        let inv = 1.0 / list.len() as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Refines `x` (N×D, one support task's view of the novel features) against
/// that task's prototypes. Returns the refined features and the neighbor
/// sets retrieved from the unrefined query (empty under `Coupling::Off`).
pub fn interact(
    sess: &mut Session,
    x: Var,
    protos: &PrototypeSet,
    cfg: &InteractionConfig,
) -> Result<(Var, Vec<Vec<Neighbor>>)> {
    if sess.tape.shape(x).len() != 2 || sess.tape.shape(x)[1] != protos.dim() {
        return Err(Error::dim("interact", sess.tape.shape(x), protos.matrix.shape()));
    }
    let mut nbrs = Vec::new();
    let mut agg = None;
    if cfg.coupling != Coupling::Off {
        nbrs = knn_query(sess.tape.value(x), protos, cfg.k)?;
        agg = Some(sess.tape.constant(neighbor_mean(protos, &nbrs)));
    }
    let mut h = x;
    for m in 0..cfg.layers {
        let p = interaction_prefix(protos.task, m);
        let wr = sess.param(&format!("{p}.w_r"))?;
        let root = sess.tape.matmul(h, wr)?;
        h = match agg {
            None => root,
            Some(a) => {
                let a = if cfg.requery && m > 0 {
                    let q = knn_query(sess.tape.value(h), protos, cfg.k)?;
                    sess.tape.constant(neighbor_mean(protos, &q))
                } else {
                    a
                };
                let w = sess.param(&format!("{p}.w"))?;
                let msg = sess.tape.matmul(a, w)?;
                sess.tape.add(root, msg)?
            }
        };
    }
    Ok((h, nbrs))
}

/// Arithmetic mean of the novel features and the refined perspectives.
pub fn fuse_features(tape: &mut Tape, novel: Var, refined: &[Var]) -> Result<Var> {
    let mut acc = novel;
    for &r in refined {
        if tape.shape(r) != tape.shape(novel) {
            return Err(Error::dim("fuse_features", tape.shape(novel), tape.shape(r)));
        }
        acc = tape.add(acc, r)?;
    }
    Ok(tape.scale(acc, 1.0 / (refined.len() + 1) as f64))
}

/// Elementwise sum of per-perspective scores.
pub fn fuse_logits(tape: &mut Tape, votes: &[Var]) -> Result<Var> {
    let (&first, rest) = votes
        .split_first()
        .ok_or_else(|| Error::Validation("fuse_logits needs at least one perspective".into()))?;
    let mut acc = first;
    for &v in rest {
        if tape.shape(v) != tape.shape(first) {
            return Err(Error::dim("fuse_logits", tape.shape(first), tape.shape(v)));
        }
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Prototypes retrieved by every support task for one novel-task sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample: usize,
    pub per_task: BTreeMap<TaskKind, Vec<(Neighbor, Action)>>,
}

/// Mean over samples of `|labels_a ∩ labels_b| / k · 100`.
pub fn consensus(records: &[ActivationRecord], a: TaskKind, b: TaskKind) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Validation("no activation records".into()));
    }
    let mut total = 0.0;
    for r in records {
        let get = |t: TaskKind| {
            r.per_task
                .get(&t)
                .ok_or_else(|| Error::Validation(format!("task {t} missing from sample {}", r.sample)))
        };
        let (la, lb) = (get(a)?, get(b)?);
        if la.len() != lb.len() || la.is_empty() {
            return Err(Error::Validation(format!(
                "tasks {a} and {b} retrieved {} and {} prototypes",
                la.len(),
                lb.len()
            )));
        }
        let sa: BTreeSet<Action> = la.iter().map(|x| x.1).collect();
        let sb: BTreeSet<Action> = lb.iter().map(|x| x.1).collect();
        total += 100.0 * sa.intersection(&sb).count() as f64 / la.len() as f64;
    }
    Ok(total / records.len() as f64)
}
