//! Synthetic multi-task videos driven by a shared latent action script.
//!
//! Every video is a sequence of 1 s segments. A first-order Markov chain
//! over verb-noun pairs picks the actions; each segment's feature is the
//! action's fixed unit embedding plus isotropic Gaussian noise. All five
//! task annotations are read off the same script, so the tasks are
//! correlated by construction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::diffcore::Tensor;
use crate::rng::Key;
use crate::tasks::{Action, Label, SegmentAnnotation, TaskKind, TaskSpec};
use crate::{Error, Result};

pub const SEGMENT_SECONDS: f64 = 1.0;
pub const KEYFRAME_FRACTION: f64 = 0.6;

/// Label spaces shared by every video of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    pub verbs: usize,
    pub nouns: usize,
    /// Localization classes.
    pub classes: usize,
    pub horizon: usize,
}

impl LabelSpace {
    pub fn spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            verbs: self.verbs,
            nouns: self.nouns,
            classes: self.classes,
            horizon: self.horizon,
        }
    }
}

/// Features, timestamps and per-task annotations of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Tensor,
    pub timestamps: Vec<f64>,
    pub annotations: BTreeMap<TaskKind, Vec<SegmentAnnotation>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * SEGMENT_SECONDS
    }

    pub fn annotations(&self, kind: TaskKind) -> &[SegmentAnnotation] {
        self.annotations.get(&kind).map_or(&[], Vec::as_slice)
    }
}

/// Midpoint timestamps of `n` consecutive segments.
pub fn midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|t| (t as f64 + 0.5) * SEGMENT_SECONDS).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub videos: usize,
    pub verbs: usize,
    pub nouns: usize,
    /// Distinct verb-noun pairs in the action vocabulary.
    pub actions: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Markov-chain temperature; lower values make transitions more
    /// predictable.
    pub temperature: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub horizon: usize,
    pub val_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            videos: 200,
            verbs: 12,
            nouns: 16,
            actions: 32,
            dim: 128,
            sigma: 0.3,
            temperature: 0.5,
            min_segments: 60,
            max_segments: 100,
            min_duration: 2,
            max_duration: 4,
            horizon: 4,
            val_fraction: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.verbs < 2 || self.nouns < 2 {
            return fail(format!("need at least 2 verbs and nouns, got {} and {}", self.verbs, self.nouns));
        }
        if self.actions < self.verbs.max(2) || self.actions > self.verbs * self.nouns {
            return fail(format!(
                "action count {} must lie in {}..={}",
                self.actions,
                self.verbs.max(2),
                self.verbs * self.nouns
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.videos == 0 || self.dim == 0 || self.horizon == 0 {
            return fail("videos, dim and horizon must be positive".into());
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail("segment range must be non-empty and positive".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail("duration range must be non-empty and positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace {
            verbs: self.verbs,
            nouns: self.nouns,
            classes: self.verbs,
            horizon: self.horizon,
        }
    }

    /// Number of leading videos that form the training split.
    pub fn train_count(&self) -> usize {
        let val = libm::round(self.videos as f64 * self.val_fraction) as usize;
        (self.videos - val).max(1)
    }
}

/// A video with the latent script that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedVideo {
    /// Action indices into the vocabulary with their durations in segments.
    pub script: Vec<(usize, usize)>,
    /// The actions that follow the observed script.
    pub future: Vec<usize>,
    pub video: Video,
}

/// The generator's fixed world: vocabulary, embeddings, chain and tables.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub actions: Vec<Action>,
    pub embeddings: Tensor,
    /// Row-stochastic transition matrix with a zero diagonal.
    pub transitions: Vec<Vec<f64>>,
    pub changes_state: Vec<bool>,
}

impl World {
    pub fn new(cfg: &GenConfig, key: Key) -> Result<Self> {
        cfg.validate()?;
        let mut s = key.derive_str("vocabulary").stream();
        let mut actions = Vec::with_capacity(cfg.actions);
        // Every verb appears at least once so all verb classes occur.
        while actions.len() < cfg.actions {
            let verb = if actions.len() < cfg.verbs { actions.len() } else { s.below(cfg.verbs) };
            let a = Action::new(verb as u32, s.below(cfg.nouns) as u32);
            if !actions.contains(&a) {
                actions.push(a);
            }
        }
        actions.sort();

        let ek = key.derive_str("embeddings");
        let mut emb = Vec::with_capacity(cfg.actions * cfg.dim);
        for i in 0..cfg.actions {
            let k = ek.derive(i as u64);
            let row: Vec<f64> = (0..cfg.dim as u64).map(|j| k.normal_at(j)).collect();
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            emb.extend(row.into_iter().map(|v| v / norm));
        }
        let embeddings = Tensor::matrix(cfg.actions, cfg.dim, emb)?;

        let tk = key.derive_str("transitions");
        let transitions = (0..cfg.actions)
            .map(|a| {
                let k = tk.derive(a as u64);
                let logits: Vec<f64> = (0..cfg.actions)
                    .map(|b| if a == b { f64::NEG_INFINITY } else { k.normal_at(b as u64) / cfg.temperature })
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| libm::exp(l - mx)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|v| v / z).collect()
            })
            .collect();

        let ck = key.derive_str("changes_state");
        let changes_state = (0..cfg.verbs)
            .map(|v| match v {
                0 => true,
                1 => false,
                _ => ck.uniform_at(v as u64) < 0.5,
            })
            .collect();
        Ok(World { actions, embeddings, transitions, changes_state })
    }

    fn next(&self, from: usize, u: f64) -> usize {
        let row = &self.transitions[from];
        let mut acc = 0.0;
        for (b, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return b;
            }
        }
        // Rounding can leave the cumulative sum just below one.
        row.iter().rposition(|p| *p > 0.0).expect("row has mass")
    }
}

/// Generates one video; depends only on `(cfg, key, index)`.
pub fn generate_video(cfg: &GenConfig, world: &World, key: Key, index: usize) -> Result<ScriptedVideo> {
    let vk = key.derive_str("video").derive(index as u64);
    let mut s = vk.derive_str("script").stream();
    let n = cfg.min_segments + s.below(cfg.max_segments - cfg.min_segments + 1);
    let mut script = Vec::new();
    let mut covered = 0;
    let mut a = s.below(cfg.actions);
    while covered < n {
        let d = (cfg.min_duration + s.below(cfg.max_duration - cfg.min_duration + 1)).min(n - covered);
        script.push((a, d));
        covered += d;
        a = world.next(a, s.uniform());
    }
    let mut future = Vec::with_capacity(cfg.horizon);
    future.push(a);
    while future.len() < cfg.horizon {
        let last = *future.last().expect("non-empty");
        future.push(world.next(last, s.uniform()));
    }

    let nk = vk.derive_str("noise");
    let mut feats = Vec::with_capacity(n * cfg.dim);
    let mut t = 0;
    for &(act, d) in &script {
        for _ in 0..d {
            let e = world.embeddings.row(act);
            let base = (t * cfg.dim) as u64;
            feats.extend(e.iter().enumerate().map(|(j, v)| v + cfg.sigma * nk.normal_at(base + j as u64)));
            t += 1;
        }
    }

    let mut ann: BTreeMap<TaskKind, Vec<SegmentAnnotation>> = BTreeMap::new();
    let mut start = 0usize;
    let following = |i: usize| -> Vec<Action> {
        script[i + 1..]
            .iter()
            .map(|x| x.0)
            .chain(future.iter().copied())
            .take(cfg.horizon)
            .map(|x| world.actions[x])
            .collect()
    };
    for (i, &(act, d)) in script.iter().enumerate() {
        let (s0, e0) = (start as f64 * SEGMENT_SECONDS, (start + d) as f64 * SEGMENT_SECONDS);
        let action = world.actions[act];
        let mut push = |k: TaskKind, label: Label| {
            ann.entry(k).or_default().push(SegmentAnnotation { start: s0, end: e0, label })
        };
        push(TaskKind::Recognition, Label::Action(action));
        push(TaskKind::StateChange, Label::StateChange(world.changes_state[action.verb as usize]));
        push(TaskKind::Keyframe, Label::Keyframe(s0 + KEYFRAME_FRACTION * (e0 - s0)));
        push(TaskKind::Anticipation, Label::Future(following(i)));
        start += d;
    }
    let mut start = 0usize;
    let mut run: Option<(u32, usize)> = None;
    for &(act, d) in &script {
        let verb = world.actions[act].verb;
        match run {
            Some((v, _)) if v == verb => {}
            Some((v, s0)) => {
                ann.entry(TaskKind::Localization).or_default().push(SegmentAnnotation {
                    start: s0 as f64 * SEGMENT_SECONDS,
                    end: start as f64 * SEGMENT_SECONDS,
                    label: Label::Class(v),
                });
                run = Some((verb, start));
            }
            None => run = Some((verb, start)),
        }
        start += d;
    }
    if let Some((v, s0)) = run {
        ann.entry(TaskKind::Localization).or_default().push(SegmentAnnotation {
            start: s0 as f64 * SEGMENT_SECONDS,
            end: start as f64 * SEGMENT_SECONDS,
            label: Label::Class(v),
        });
    }

    Ok(ScriptedVideo {
        script,
        future,
        video: Video {
            id: format!("v{index:04}"),
            features: Tensor::matrix(n, cfg.dim, feats)?,
            timestamps: midpoints(n),
            annotations: ann,
        },
    })
}

/// A generated dataset; videos `0..train` form the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub config: GenConfig,
    pub world: World,
    pub videos: Vec<ScriptedVideo>,
    pub train: usize,
}

impl Synthetic {
    pub fn labels(&self) -> LabelSpace {
        self.config.labels()
    }

    pub fn train_videos(&self) -> Vec<Video> {
        self.videos[..self.train].iter().map(|v| v.video.clone()).collect()
    }

    pub fn val_videos(&self) -> Vec<Video> {
        self.videos[self.train..].iter().map(|v| v.video.clone()).collect()
    }
}

pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Synthetic> {
    cfg.validate()?;
    let key = Key::new(seed);
    let world = World::new(cfg, key)?;
    let videos = (0..cfg.videos)
        .map(|i| generate_video(cfg, &world, key, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthetic { config: cfg.clone(), world, videos, train: cfg.train_count() })
}
