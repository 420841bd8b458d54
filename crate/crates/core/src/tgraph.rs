//! Temporal video graphs.
//!
//! Nodes are video segments with timestamps in seconds. Two nodes of the same
//! video are connected when their timestamps differ by at most the stage
//! threshold `tau · 2^stage`. A batch of videos is a disjoint union: edges
//! never cross video boundaries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

impl PoolMode {
    pub fn id(self) -> &'static str {
        match self {
            PoolMode::Mean => "mean",
            PoolMode::Max => "max",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "max" => Ok(PoolMode::Max),
            _ => Err(Error::Validation(format!("unknown pooling mode {s:?}"))),
        }
    }
}

/// Edge threshold in original seconds for a given stage.
pub fn stage_edge_threshold(tau: f64, stage: usize) -> f64 {
    tau * libm::ldexp(1.0, stage as i32)
}

/// Node timestamps and connectivity, without features.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pe: Vec<f64>,
    edges: Vec<(usize, usize)>,
    stage: usize,
    tau: f64,
    videos: Vec<Range<usize>>,
}

impl Topology {
    /// Single-video topology at stage 0.
    pub fn new(pe: Vec<f64>, tau: f64) -> Result<Self> {
        let n = pe.len();
        Self::with_videos(pe, tau, 0, vec![0..n])
    }

    /// Disjoint union of several videos' timestamps at stage 0.
    pub fn union(videos: &[&[f64]], tau: f64) -> Result<Self> {
        let mut pe = Vec::new();
        let mut ranges = Vec::with_capacity(videos.len());
        for v in videos {
            let start = pe.len();
            pe.extend_from_slice(v);
            ranges.push(start..pe.len());
        }
        Self::with_videos(pe, tau, 0, ranges)
    }

    pub fn with_videos(
        pe: Vec<f64>,
        tau: f64,
        stage: usize,
        videos: Vec<Range<usize>>,
    ) -> Result<Self> {
        if pe.is_empty() {
            return Err(Error::Validation("a temporal graph needs at least one node".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Validation(format!("tau must be positive, got {tau}")));
        }
        let mut expect = 0;
        for r in &videos {
            if r.start != expect || r.is_empty() {
                return Err(Error::Validation(format!("video ranges must tile the nodes: {r:?}")));
            }
            expect = r.end;
            for k in r.start + 1..r.end {
                if !(pe[k] > pe[k - 1]) {
                    return Err(Error::Validation(format!(
                        "timestamps must be strictly increasing: pe[{}]={} then pe[{k}]={}",
                        k - 1,
                        pe[k - 1],
                        pe[k]
                    )));
                }
            }
        }
        if expect != pe.len() {
            return Err(Error::Validation("video ranges must tile the nodes".into()));
        }
        let threshold = stage_edge_threshold(tau, stage);
        let mut edges = Vec::new();
        for r in &videos {
            // pe is sorted within a video, so neighbors form a contiguous band.
            let mut lo = r.start;
            for i in r.clone() {
                while pe[i] - pe[lo] > threshold {
                    lo += 1;
                }
                let mut j = lo;
                while j < r.end && pe[j] - pe[i] <= threshold {
                    if j != i {
                        edges.push((j, i));
                    }
                    j += 1;
                }
            }
        }
        Ok(Topology {
            pe,
            edges,
            stage,
            tau,
            videos,
        })
    }

    /// Assembles a topology without validation or edge construction. Meant
    /// for fixtures that need configurations the builder rejects, such as
    /// repeated timestamps.
    pub fn from_raw_parts(pe: Vec<f64>, edges: Vec<(usize, usize)>, stage: usize, tau: f64) -> Self {
        let n = pe.len();
        Topology {
            pe,
            edges,
            stage,
            tau,
            videos: vec![0..n],
        }
    }

    pub fn len(&self) -> usize {
        self.pe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pe.is_empty()
    }

    pub fn pe(&self) -> &[f64] {
        &self.pe
    }

    /// Directed `(src, dst)` pairs, both directions present, sorted by `dst`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn videos(&self) -> &[Range<usize>] {
        &self.videos
    }

    pub fn threshold(&self) -> f64 {
        stage_edge_threshold(self.tau, self.stage)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.len()];
        for &(_, dst) in &self.edges {
            d[dst] += 1;
        }
        d
    }

    /// Coarsens by pooling consecutive windows of [`STRIDE`] nodes per video.
    /// A single-node graph is returned unchanged with an identity map.
    pub fn pooled(&self, mode: PoolMode) -> (Topology, PoolingMap) {
        if self.len() == 1 {
            return (
                self.clone(),
                PoolingMap {
                    windows: vec![0..1],
                    mode,
                },
            );
        }
        let mut windows = Vec::new();
        let mut videos = Vec::with_capacity(self.videos.len());
        for r in &self.videos {
            let start = windows.len();
            let mut s = r.start;
            while s < r.end {
                let e = (s + STRIDE).min(r.end);
                windows.push(s..e);
                s = e;
            }
            videos.push(start..windows.len());
        }
        let pe: Vec<f64> = windows
            .iter()
            .map(|w| w.clone().map(|i| self.pe[i]).sum::<f64>() / w.len() as f64)
            .collect();
        let topo = Topology::with_videos(pe, self.tau, self.stage + 1, videos)
            .expect("pooling preserves ordering");
        (topo, PoolingMap { windows, mode })
    }
}

/// Child node → contiguous window of parent nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingMap {
    windows: Vec<Range<usize>>,
    mode: PoolMode,
}

impl PoolingMap {
    pub fn windows(&self) -> &[Range<usize>] {
        &self.windows
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn child_sizes(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.len()).collect()
    }

    /// Child index of every parent node.
    pub fn parent_to_child(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for (c, w) in self.windows.iter().enumerate() {
            ids.extend(core::iter::repeat(c).take(w.len()));
        }
        ids
    }

    /// Pools node features recorded on a tape.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.mode {
            PoolMode::Mean => {
                let ids = self.parent_to_child();
                Ok(tape.segment_mean(x, &ids, self.windows.len())?.0)
            }
            PoolMode::Max => tape.window_max(x, &self.windows),
        }
    }
}

/// Features plus topology: `G = (X, E, pe)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    pub x: Tensor,
    pub topo: Topology,
}

impl TemporalGraph {
    /// Builds a stage-0 graph from segment features and midpoint timestamps.
    pub fn build(features: Tensor, timestamps: Vec<f64>, tau: f64) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != timestamps.len() {
            return Err(Error::dim("build_graph", features.shape(), &[timestamps.len()]));
        }
        let topo = Topology::new(timestamps, tau)?;
        Ok(TemporalGraph { x: features, topo })
    }

    pub fn len(&self) -> usize {
        self.topo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topo.is_empty()
    }

    pub fn pool(&self, mode: PoolMode) -> Result<(TemporalGraph, PoolingMap)> {
        let (topo, map) = self.topo.pooled(mode);
        if topo.stage() == self.topo.stage() {
            return Ok((self.clone(), map));
        }
        let mut tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let y = map.apply(&mut tape, x)?;
        Ok((
            TemporalGraph {
                x: tape.value(y).clone(),
                topo,
            },
            map,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Key;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn undirected(t: &Topology) -> BTreeSet<(usize, usize)> {
        t.edges()
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect()
    }

    #[test]
    fn threshold_example() {
        let t = Topology::new(vec![0.5, 1.5, 2.5, 4.0], 1.2).unwrap();
        let expect: BTreeSet<_> = [(0, 1), (1, 2)].into_iter().collect();
        assert_eq!(undirected(&t), expect);
        assert_eq!(t.edges().len(), 4);
    }

    #[test]
    fn singleton_and_validation() {
        let t = Topology::new(vec![3.0], 1.0).unwrap();
        assert!(t.edges().is_empty());
        assert!(Topology::new(vec![], 1.0).is_err());
        assert!(Topology::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(Topology::new(vec![2.0, 1.0], 1.0).is_err());
        assert!(Topology::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn edges_match_all_pairs_oracle() {
        for seed in 0..30u64 {
            let key = Key::new(seed);
            let n = 1 + (key.u64_at(0) % 40) as usize;
            let mut pe = Vec::new();
            let mut t = 0.0;
            for i in 0..n {
                t += 0.05 + 2.0 * key.uniform_at(1 + i as u64);
                pe.push(t);
            }
            let tau = 0.1 + 3.0 * key.uniform_at(999);
            let topo = Topology::new(pe.clone(), tau).unwrap();
            let mut oracle = BTreeSet::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && (pe[i] - pe[j]).abs() <= tau {
                        oracle.insert((i, j));
                    }
                }
            }
            let got: BTreeSet<_> = topo.edges().iter().copied().collect();
            assert_eq!(got, oracle, "seed {seed}");
        }
    }

    #[test]
    fn union_never_crosses_videos() {
        let a = [0.5, 1.5, 2.5];
        let b = [0.5, 1.5];
        let t = Topology::union(&[&a, &b], 5.0).unwrap();
        for &(s, d) in t.edges() {
            assert_eq!(s < 3, d < 3);
        }
        assert_eq!(t.edges().len(), 6 + 2);
    }

    #[test]
    fn stage_thresholds() {
        assert_eq!(stage_edge_threshold(1.0, 0), 1.0);
        assert_eq!(stage_edge_threshold(1.0, 3), 8.0);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::from_rows(&[[1.0], [3.0], [5.0], [7.0]]).unwrap();
        let g = TemporalGraph::build(x, vec![0.5, 1.5, 2.5, 3.5], 1.0).unwrap();
        let (m, _) = g.pool(PoolMode::Mean).unwrap();
        assert_eq!(m.x.data(), &[2.0, 6.0]);
        assert_eq!(m.topo.pe(), &[1.0, 3.0]);
        assert_eq!(m.topo.stage(), 1);
        let (mx, _) = g.pool(PoolMode::Max).unwrap();
        assert_eq!(mx.x.data(), &[3.0, 7.0]);

        let x = Tensor::zeros(&[5, 1]);
        let g = TemporalGraph::build(x, vec![0.5, 1.5, 2.5, 3.5, 4.5], 1.0).unwrap();
        let (_, map) = g.pool(PoolMode::Mean).unwrap();
        assert_eq!(map.child_sizes(), vec![2, 2, 1]);
    }

    #[test]
    fn single_node_pool_is_identity() {
        let g = TemporalGraph::build(Tensor::scalar(4.0).reshaped(&[1, 1]).unwrap(), vec![0.5], 1.0)
            .unwrap();
        let (p, map) = g.pool(PoolMode::Max).unwrap();
        assert_eq!(p, g);
        assert_eq!(map.windows(), &[0..1]);
    }

    #[test]
    fn node_counts_halve_exactly() {
        let pe: Vec<f64> = (0..64).map(|i| i as f64 + 0.5).collect();
        let mut t = Topology::new(pe, 1.0).unwrap();
        let mut counts = vec![t.len()];
        for _ in 0..3 {
            t = t.pooled(PoolMode::Mean).0;
            counts.push(t.len());
        }
        assert_eq!(counts, vec![64, 32, 16, 8]);
    }

    #[test]
    fn degree_is_stable_across_stages_on_uniform_spacing() {
        let pe: Vec<f64> = (0..64).map(|i| i as f64 + 0.5).collect();
        for tau in [1.0, 2.0, 3.5] {
            let mut t = Topology::new(pe.clone(), tau).unwrap();
            let base = mean_degree(&t);
            let base_max = *t.degrees().iter().max().unwrap();
            // stages 1 and 2 of a three-stage hierarchy
            for _ in 0..2 {
                t = t.pooled(PoolMode::Mean).0;
                assert!((mean_degree(&t) - base).abs() <= 1.0, "tau {tau}");
                let max = *t.degrees().iter().max().unwrap();
                assert!(max.abs_diff(base_max) <= 1, "tau {tau}");
            }
        }
    }

    fn mean_degree(t: &Topology) -> f64 {
        let d = t.degrees();
        d.iter().sum::<usize>() as f64 / d.len() as f64
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]]).unwrap(),
            true,
        );
        let topo = Topology::new(vec![0.5, 1.5, 2.5], 1.0).unwrap();
        let (_, map) = topo.pooled(PoolMode::Max);
        let y = map.apply(&mut tape, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    proptest! {
        #[test]
        fn invariants_hold_through_pooling(
            gaps in proptest::collection::vec(0.1f64..2.0, 1..40),
            tau in 0.2f64..4.0,
        ) {
            let mut pe = Vec::new();
            let mut t = 0.0;
            for g in &gaps {
                t += g;
                pe.push(t);
            }
            let n = pe.len();
            let mut topo = Topology::new(pe, tau).unwrap();
            for _ in 0..3 {
                let set: BTreeSet<_> = topo.edges().iter().copied().collect();
                for &(a, b) in topo.edges() {
                    prop_assert!(a != b);
                    prop_assert!(set.contains(&(b, a)));
                    prop_assert!((topo.pe()[a] - topo.pe()[b]).abs() <= topo.threshold());
                }
                prop_assert!(topo.pe().windows(2).all(|w| w[0] < w[1]));
                let rebuilt = Topology::with_videos(
                    topo.pe().to_vec(), tau, topo.stage(), topo.videos().to_vec()).unwrap();
                prop_assert_eq!(&rebuilt, &topo);
                let before = topo.len();
                topo = topo.pooled(PoolMode::Mean).0;
                if before > 1 {
                    prop_assert_eq!(topo.len(), before.div_ceil(2));
                }
            }
            prop_assert!(n >= 1);
        }

        #[test]
        fn mean_pool_commutes_with_linear_maps(
            vals in proptest::collection::vec(-3.0f64..3.0, 14),
            w in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let x = Tensor::matrix(7, 2, vals).unwrap();
            let w = Tensor::matrix(2, 2, w).unwrap();
            let pe: Vec<f64> = (0..7).map(|i| i as f64 + 0.5).collect();
            let (_, map) = Topology::new(pe, 1.0).unwrap().pooled(PoolMode::Mean);
            let mut t = Tape::new();
            let (vx, vw) = (t.constant(x), t.constant(w));
            let p = map.apply(&mut t, vx).unwrap();
            let pw = t.matmul(p, vw).unwrap();
            let xw = t.matmul(vx, vw).unwrap();
            let wp = map.apply(&mut t, xw).unwrap();
            prop_assert!(t.value(pw).max_abs_diff(t.value(wp)) < 1e-12);
        }
    }
}
