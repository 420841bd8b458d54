//! The shared hierarchical temporal backbone.
//!
//! Each stage applies a stack of temporal distance gated convolutions (TDGC)
//! and, except after the last stage, pools the graph by a factor of two.
//!
//! A TDGC layer updates node `i` as
//!
//! ```text
//! x_i' = W_r x_i + mean_{j ∈ N(i)} sign(pe_i - pe_j) · gate(|pe_i - pe_j| / 2^stage) ⊙ φ(W_n x_j + b_n) + b_r
//! ```
//!
//! where `gate` is a `1 → H → D` MLP. The sign term makes messages from the
//! past and the future enter with opposite signs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{ParameterStore, Session, Tensor, Var};
use crate::rng::{init_uniform, Key};
use crate::tgraph::{PoolMode, PoolingMap, TemporalGraph, Topology};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn id(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Validation(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stages: usize,
    pub layers_per_stage: Vec<usize>,
    pub dim: usize,
    pub tau: f64,
    pub pool: PoolMode,
    pub gate_hidden: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: 3,
            layers_per_stage: vec![2, 2, 2],
            dim: 128,
            tau: 2.0,
            pool: PoolMode::Mean,
            gate_hidden: 16,
            activation: Activation::Relu,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Validation("backbone needs at least one stage".into()));
        }
        if self.layers_per_stage.len() != self.stages {
            return Err(Error::Validation(format!(
                "layers_per_stage has {} entries for {} stages",
                self.layers_per_stage.len(),
                self.stages
            )));
        }
        if self.layers_per_stage.contains(&0) {
            return Err(Error::Validation("every stage needs at least one layer".into()));
        }
        if self.dim == 0 || self.gate_hidden == 0 {
            return Err(Error::Validation("dim and gate_hidden must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn layer_prefix(stage: usize, layer: usize) -> String {
        format!("backbone.s{stage}.l{layer}")
    }

    /// Adds freshly initialized backbone parameters to `store`.
    pub fn init_params(&self, key: Key, store: &mut ParameterStore) -> Result<()> {
        self.validate()?;
        for (s, &layers) in self.layers_per_stage.iter().enumerate() {
            for l in 0..layers {
                let p = Self::layer_prefix(s, l);
                init_tdgc(store, key, &p, self.dim, self.gate_hidden)?;
            }
        }
        Ok(())
    }
}

/// Initializes one TDGC layer: uniform in `±1/sqrt(fan_in)`, gate hidden
/// biases in `[0, 1)`.
pub fn init_tdgc(
    store: &mut ParameterStore,
    key: Key,
    prefix: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    let b = 1.0 / libm::sqrt(dim as f64);
    let bh = 1.0 / libm::sqrt(hidden as f64);
    for (name, shape, bound) in [
        ("w_n", vec![dim, dim], b),
        ("b_n", vec![dim], b),
        ("w_r", vec![dim, dim], b),
        ("b_r", vec![dim], b),
        ("gate.w1", vec![1, hidden], 1.0),
        ("gate.b1", vec![hidden], 1.0),
        ("gate.w2", vec![hidden, dim], bh),
        ("gate.b2", vec![dim], bh),
    ] {
        let full = format!("{prefix}.{name}");
        let mut t = init_uniform(key, &full, &shape, bound);
        if name == "gate.b1" {
            // Non-negative hidden biases keep every gate unit active near zero distance.
            t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        }
        store.insert(&full, t)?;
    }
    Ok(())
}

/// One TDGC layer over `topo`, reading parameters under `prefix`.
pub fn tdgc_forward(
    sess: &mut Session,
    prefix: &str,
    x: Var,
    topo: &Topology,
    activation: Activation,
) -> Result<Var> {
    let w_n = sess.param(&format!("{prefix}.w_n"))?;
    let b_n = sess.param(&format!("{prefix}.b_n"))?;
    let w_r = sess.param(&format!("{prefix}.w_r"))?;
    let b_r = sess.param(&format!("{prefix}.b_r"))?;
    let t = &sess.tape;
    let d = t.shape(w_r)[0];
    if t.shape(x).len() != 2 || t.shape(x)[1] != d || t.shape(x)[0] != topo.len() {
        return Err(Error::dim("tdgc_forward", t.shape(x), &[topo.len(), d]));
    }
    let xr = sess.tape.matmul(x, w_r)?;
    let root = sess.tape.add_row(xr, b_r)?;
    if topo.edges().is_empty() {
        return Ok(root);
    }

    let g_w1 = sess.param(&format!("{prefix}.gate.w1"))?;
    let g_b1 = sess.param(&format!("{prefix}.gate.b1"))?;
    let g_w2 = sess.param(&format!("{prefix}.gate.w2"))?;
    let g_b2 = sess.param(&format!("{prefix}.gate.b2"))?;
    let tape = &mut sess.tape;

    let hn = tape.matmul(x, w_n)?;
    let hn = tape.add_row(hn, b_n)?;
    let xp = match activation {
        Activation::Relu => tape.relu(hn),
        Activation::Identity => hn,
    };

    let src: Vec<usize> = topo.edges().iter().map(|e| e.0).collect();
    let dst: Vec<usize> = topo.edges().iter().map(|e| e.1).collect();
    let pe = tape.constant(Tensor::new(&[topo.len(), 1], topo.pe().to_vec())?);
    let pe_i = tape.gather_rows(pe, &dst)?;
    let pe_j = tape.gather_rows(pe, &src)?;
    let diff = tape.sub(pe_i, pe_j)?;
    let s = tape.sign(diff);
    let dist = tape.abs(diff);
    let dist = tape.scale(dist, libm::ldexp(1.0, -(topo.stage() as i32)));

    // The gate only depends on the distance, and distances repeat heavily on
    // regularly sampled videos, so it runs once per distinct value.
    let dvals = tape.value(dist).data();
    let mut uniq: Vec<f64> = dvals.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let which: Vec<usize> = dvals
        .iter()
        .map(|v| uniq.binary_search_by(|u| u.total_cmp(v)).expect("present"))
        .collect();
    let u = tape.constant(Tensor::new(&[uniq.len(), 1], uniq)?);
    let h = tape.matmul(u, g_w1)?;
    let h = tape.add_row(h, g_b1)?;
    let h = tape.relu(h);
    let gate = tape.matmul(h, g_w2)?;
    let gate = tape.add_row(gate, g_b2)?;
    let w = tape.gather_rows(gate, &which)?;

    let xj = tape.gather_rows(xp, &src)?;
    let msg = tape.mul(w, xj)?;
    let msg = tape.mul_col(msg, s)?;
    let (agg, _) = tape.segment_mean(msg, &dst, topo.len())?;
    tape.add(root, agg)
}

/// One stage's output graph on the tape.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub x: Var,
    pub topo: Topology,
    /// Map from the previous stage's nodes, absent for the first stage.
    pub pooled_from: Option<PoolingMap>,
}

/// Runs every stage; entry `l` holds the graph after stage `l`'s layers.
pub fn backbone_forward(
    sess: &mut Session,
    cfg: &BackboneConfig,
    x0: Var,
    topo0: &Topology,
) -> Result<Vec<StageOutput>> {
    cfg.validate()?;
    if topo0.stage() != 0 {
        return Err(Error::Usage(format!(
            "backbone input must be a stage-0 graph, got stage {}",
            topo0.stage()
        )));
    }
    let mut out = Vec::with_capacity(cfg.stages);
    let mut x = x0;
    let mut topo = topo0.clone();
    let mut map = None;
    for (s, &layers) in cfg.layers_per_stage.iter().enumerate() {
        for l in 0..layers {
            x = tdgc_forward(sess, &BackboneConfig::layer_prefix(s, l), x, &topo, cfg.activation)?;
        }
        out.push(StageOutput {
            x,
            topo: topo.clone(),
            pooled_from: map.take(),
        });
        if s + 1 < cfg.stages {
            let (next, m) = topo.pooled(cfg.pool);
            x = m.apply(&mut sess.tape, x)?;
            topo = next;
            map = Some(m);
        }
    }
    Ok(out)
}

/// Value-level hierarchy: one graph per stage plus the pooling maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphHierarchy {
    pub graphs: Vec<TemporalGraph>,
    pub maps: Vec<PoolingMap>,
}

impl GraphHierarchy {
    pub fn node_counts(&self) -> Vec<usize> {
        self.graphs.iter().map(TemporalGraph::len).collect()
    }
}

/// Inference-only convenience over [`backbone_forward`].
pub fn run_backbone(
    store: &ParameterStore,
    cfg: &BackboneConfig,
    g0: &TemporalGraph,
) -> Result<GraphHierarchy> {
    let mut sess = Session::inference(store);
    let x0 = sess.tape.constant(g0.x.clone());
    let stages = backbone_forward(&mut sess, cfg, x0, &g0.topo)?;
    let mut graphs = Vec::new();
    let mut maps = Vec::new();
    for s in stages {
        graphs.push(TemporalGraph {
            x: sess.tape.value(s.x).clone(),
            topo: s.topo,
        });
        maps.extend(s.pooled_from);
    }
    Ok(GraphHierarchy { graphs, maps })
}
