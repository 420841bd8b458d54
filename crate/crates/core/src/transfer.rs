//! Directional transfer benchmark: each task in turn is the novel task and
//! the other four are supports. For every rotation and seed it compares the
//! backpack against a single-task model trained from scratch and against
//! the same pipeline with prototype coupling frozen at zero.

use alloc::vec::Vec;

use crate::backbone::BackboneConfig;
use crate::backpack::{Coupling, InteractionConfig};
use crate::data::{generate, GenConfig};
use crate::model::{EvalConfig, Fusion, ModelConfig};
use crate::tasks::{MetricRecord, TaskKind};
use crate::train::{build_prototypes, evaluate, single_task, stage1_mtl, stage2_novel, NovelConfig, TrainConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub data: GenConfig,
    pub backbone: BackboneConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Leading training videos whose novel-task labels Stage 2 may use.
    pub novel_videos: usize,
    pub interaction: InteractionConfig,
    pub fusion: Fusion,
    pub freeze_backbone: bool,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            data: GenConfig { videos: 120, dim: 32, ..GenConfig::default() },
            backbone: BackboneConfig { dim: 32, ..BackboneConfig::default() },
            stage1: TrainConfig { steps: 300, batch: 4, ..TrainConfig::default() },
            stage2: TrainConfig { steps: 200, batch: 4, ..TrainConfig::default() },
            novel_videos: 3,
            interaction: InteractionConfig { k: 8, ..InteractionConfig::default() },
            fusion: Fusion::Features,
            freeze_backbone: true,
            seeds: alloc::vec![0, 1, 2],
            eval: EvalConfig::default(),
        }
    }
}

/// Validation metrics of the three variants for one rotation and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub novel: TaskKind,
    pub seed: u64,
    pub backpack: MetricRecord,
    pub single: MetricRecord,
    pub zero: MetricRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSummary {
    pub novel: TaskKind,
    /// Seed-averaged scores where larger is better.
    pub backpack: f64,
    pub single: f64,
    pub zero: f64,
}

impl RotationSummary {
    pub fn passes(&self) -> bool {
        self.backpack >= self.single && self.backpack >= self.zero
    }
}

pub fn run_cell(cfg: &TransferConfig, novel: TaskKind, seed: u64) -> Result<TransferCell> {
    let data = generate(&cfg.data, seed)?;
    let model = ModelConfig { backbone: cfg.backbone.clone(), labels: data.labels() };
    let train = data.train_videos();
    let val = data.val_videos();
    let few = &train[..cfg.novel_videos.min(train.len())];
    let supports: Vec<TaskKind> = TaskKind::ALL.into_iter().filter(|k| *k != novel).collect();

    let s1 = TrainConfig { seed, ..cfg.stage1.clone() };
    let s2 = TrainConfig { seed, ..cfg.stage2.clone() };
    let (pre, _) = stage1_mtl(&model, &supports, &s1, &train, &mut ())?;
    let pre = build_prototypes(&pre, &train, &cfg.eval)?;
    let variant = |coupling| NovelConfig {
        task: novel,
        fusion: cfg.fusion,
        interaction: InteractionConfig { coupling, ..cfg.interaction.clone() },
        freeze_backbone: cfg.freeze_backbone,
    };
    let (full, _) = stage2_novel(&pre, &variant(Coupling::Full), &s2, few, &mut ())?;
    let (zero, _) = stage2_novel(&pre, &variant(Coupling::Zero), &s2, few, &mut ())?;
    let (single, _) = single_task(&model, novel, &s2, few, &mut ())?;
    Ok(TransferCell {
        novel,
        seed,
        backpack: evaluate(&full, &val, novel, &cfg.eval)?,
        single: evaluate(&single, &val, novel, &cfg.eval)?,
        zero: evaluate(&zero, &val, novel, &cfg.eval)?,
    })
}

/// Averages cells per rotation, in the order rotations first appear.
pub fn summarize(cells: &[TransferCell]) -> Vec<RotationSummary> {
    let mut out: Vec<RotationSummary> = Vec::new();
    for k in TaskKind::ALL {
        let mine: Vec<&TransferCell> = cells.iter().filter(|c| c.novel == k).collect();
        if mine.is_empty() {
            continue;
        }
        let avg = |f: &dyn Fn(&TransferCell) -> &MetricRecord| {
            mine.iter().map(|c| f(c).score(k).unwrap_or(f64::NEG_INFINITY)).sum::<f64>() / mine.len() as f64
        };
        out.push(RotationSummary {
            novel: k,
            backpack: avg(&|c| &c.backpack),
            single: avg(&|c| &c.single),
            zero: avg(&|c| &c.zero),
        });
    }
    out
}

/// Every rotation under every seed.
pub fn run(cfg: &TransferConfig, mut progress: impl FnMut(&TransferCell)) -> Result<Vec<TransferCell>> {
    let mut cells = Vec::new();
    for k in TaskKind::ALL {
        for &seed in &cfg.seeds {
            let c = run_cell(cfg, k, seed)?;
            progress(&c);
            cells.push(c);
        }
    }
    Ok(cells)
}
