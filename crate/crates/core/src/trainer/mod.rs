//! The training loop.
//!
//! A step runs three kinds of forward pass. Clean crops carry the scribble,
//! category, mapping, cluster and anatomy-consistency terms. Intra-mixed
//! copies run without gradient to build the (detached) mix targets. The
//! inter-mixed images carry the mix-consistency term. Sinkhorn assignments
//! are computed over all clean pixels of the batch and held fixed.
//!
//! Batches are a pure function of `(seed, epoch, step)`, per-item work runs
//! through [`crate::par`], and reductions happen in item order, so a run is
//! reproducible bit for bit whatever the worker count.

mod batch;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalkit::mean_foreground_dice;
use crate::grid::Planes;
use crate::losses::{
    ac_prototype_term_with_grad, ac_segmentation_term_with_grad, category_loss_with_grad, cluster_loss_with_grad,
    mix_consistency_loss_with_grad, scribble_loss, total_loss, LossBreakdown, LossError, LossTerms, LossWeights,
    MixSimilarity, DEFAULT_TAU,
};
use crate::mixing::{mix_targets, sample_subsets, MixConfig, MixError, SubsetSchedule};
use crate::par::{self, Exec};
use crate::phantom::PhantomSample;
use crate::phantom::{read_dataset, DatasetError, MANIFEST_FILE};
use crate::rng::derive_seed;
use crate::segnet::{
    backward_into, forward, init, predict_labels, Checkpoint, CheckpointError, ForwardOutput, ModelParams, ModelSpec,
    OutputGrad, Section, SegnetError,
};
use crate::sinkhorn::{
    aggregate_backward, aggregate_prototype_vectors, compute_scores, mapping_loss_with_grad, scores_backward, sinkhorn,
    AssignmentMatrix, PrototypeMatrix, ScoreMatrix, SinkhornError, DEFAULT_EPS, DEFAULT_ITERS, DEFAULT_SMOOTHNESS,
};

pub use batch::{build_batch, Batch, BatchItem, BatchPlan, MixPair};
pub use optim::{AdamState, OptimizerConfig, OptimizerKind};

pub const TRAIN_STATE_KIND: &str = "train_state";
const SEED_MODEL: u64 = 1;
const SEED_PROTOTYPES: u64 = 2;
const SEED_SCHEDULE: u64 = 3;
const SEED_BATCHES: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint has {checkpoint} classes but the dataset has {dataset}")]
    ClassMismatch { checkpoint: usize, dataset: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] SegnetError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// Where the data lives. `root` holds one dataset directory per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
        }
    }
}

impl DataConfig {
    pub fn split_dir(&self, split: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(split))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Network input size; `None` uses the dataset image size.
    pub input_size: Option<usize>,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self {
            input_size: None,
            base_width: spec.base_width,
            depth: spec.depth,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub epochs: usize,
    /// `None`: every training unit once per epoch.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Number of training sources (in dataset order) that keep their
    /// scribbles; `None` keeps all. The rest contribute image-level labels
    /// only.
    pub scribble_sources: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Save `epoch-N.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Validate every this many epochs; 0 disables.
    pub validate_every: usize,
    pub exec: Exec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            steps_per_epoch: None,
            batch_size: 8,
            scribble_sources: None,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Constant,
            checkpoint_every: 0,
            validate_every: 1,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub tau: f64,
    pub mix_similarity: MixSimilarity,
    /// Treat the mix target as a constant.
    pub detach_mix_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            mix_similarity: MixSimilarity::Global,
            detach_mix_target: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub iters: usize,
    /// Softmax temperature `w` of the mapping loss.
    pub smoothness: f64,
    /// Number of prototypes `d`.
    pub prototypes: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            iters: DEFAULT_ITERS,
            smoothness: DEFAULT_SMOOTHNESS,
            prototypes: 8,
        }
    }
}

/// Complete training configuration; serialises to the JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub losses: LossConfig,
    pub sinkhorn: SinkhornConfig,
    pub mix: MixConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        let t = &self.trainer;
        if !(t.optimizer.lr > 0.0 && t.optimizer.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", t.optimizer.lr));
        }
        if !(0.0..1.0).contains(&t.optimizer.beta1) || !(0.0..1.0).contains(&t.optimizer.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if t.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2 (inter-mix needs pairs), got {}",
                t.batch_size
            ));
        }
        if t.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        self.losses.weights.validate()?;
        if self.losses.tau.is_nan() || self.losses.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.losses.tau));
        }
        let s = &self.sinkhorn;
        if s.eps.is_nan() || s.eps <= 0.0 || s.smoothness.is_nan() || s.smoothness <= 0.0 {
            return bad("sinkhorn eps and smoothness must be positive".into());
        }
        if s.prototypes < 2 {
            return bad(format!("need at least 2 prototypes, got {}", s.prototypes));
        }
        let m = &self.mix;
        if m.alpha.is_nan() || m.alpha <= 0.0 {
            return bad(format!("mix alpha must be positive, got {}", m.alpha));
        }
        if !(0.0..=45.0).contains(&m.max_angle) {
            return bad(format!("max_angle must lie in [0, 45], got {}", m.max_angle));
        }
        let (lo, hi) = m.box_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("box_area must satisfy 0 < lo <= hi <= 1, got {:?}", m.box_area));
        }
        for (name, (lo, hi)) in [
            ("global_scale", m.crops.global_scale),
            ("local_scale", m.crops.local_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
            }
        }
        if m.crops.global_count + m.crops.local_count == 0 || m.mix_repeats == 0 {
            return bad("need at least one crop and one mix repeat per source".into());
        }
        Ok(())
    }

    /// Short content hash used to name run directories.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    pub fn model_spec(&self, num_classes: usize, data_size: usize) -> ModelSpec {
        ModelSpec {
            input_size: self.model.input_size.unwrap_or(data_size),
            base_width: self.model.base_width,
            depth: self.model.depth,
            num_classes,
            seed: derive_seed(self.trainer.seed, &[SEED_MODEL]),
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
///
/// Batch randomness is derived from `(seed, epoch, step)`, so the counters
/// stand in for a generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub prototypes: PrototypeMatrix,
    pub adam: AdamState,
    pub schedule: SubsetSchedule,
    pub epoch: usize,
    /// Next step to run within `epoch`.
    pub step: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, num_classes: usize, data_size: usize) -> Result<Self, TrainError> {
        let spec = cfg.model_spec(num_classes, data_size);
        let params = init(&spec)?;
        let prototypes = PrototypeMatrix::random(
            spec.prediction_channels(),
            cfg.sinkhorn.prototypes,
            derive_seed(cfg.trainer.seed, &[SEED_PROTOTYPES]),
        );
        let schedule = sample_subsets(num_classes, derive_seed(cfg.trainer.seed, &[SEED_SCHEDULE]))?;
        let adam = AdamState::new(params.len() + prototypes.data().len());
        Ok(Self {
            params,
            prototypes,
            adam,
            schedule,
            epoch: 0,
            step: 0,
            global_step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let sections = [
            ("params", self.params.data()),
            ("prototypes", self.prototypes.data()),
            ("adam_m", &self.adam.m[..]),
            ("adam_v", &self.adam.v[..]),
        ]
        .into_iter()
        .map(|(name, values)| Section {
            name: name.into(),
            values: values.to_vec(),
        })
        .collect();
        Checkpoint {
            kind: TRAIN_STATE_KIND.into(),
            model: *self.params.spec(),
            sections,
            meta: serde_json::json!({
                "epoch": self.epoch,
                "step": self.step,
                "global_step": self.global_step,
                "adam_t": self.adam.t,
                "prototype_count": self.prototypes.count(),
                "schedule": self.schedule.permutation(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.kind != TRAIN_STATE_KIND {
            return Err(TrainError::Config(format!(
                "checkpoint kind {:?} is not a training state",
                ckpt.kind
            )));
        }
        let meta = &ckpt.meta;
        let field = |name: &str| -> Result<u64, TrainError> {
            meta.get(name)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| TrainError::Config(format!("training state lacks {name:?}")))
        };
        let params = ckpt.params()?;
        let count = field("prototype_count")? as usize;
        let prototypes = PrototypeMatrix::from_vec(
            params.spec().prediction_channels(),
            count,
            ckpt.section("prototypes")?.to_vec(),
        )?;
        let permutation: Vec<u8> = serde_json::from_value(meta.get("schedule").cloned().unwrap_or_default())?;
        Ok(Self {
            prototypes,
            adam: AdamState {
                m: ckpt.section("adam_m")?.to_vec(),
                v: ckpt.section("adam_v")?.to_vec(),
                t: field("adam_t")?,
            },
            schedule: SubsetSchedule::from_permutation(permutation)?,
            epoch: field("epoch")? as usize,
            step: field("step")? as usize,
            global_step: field("global_step")?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Quantities treated as constants by the gradient: the batch assignment and
/// the mix targets. Passing them back in makes the loss a smooth function of
/// the parameters, which is what a finite-difference check needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub assignment: Option<AssignmentMatrix>,
    pub mix_targets: Vec<Planes>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grad_params: Vec<f64>,
    pub grad_prototypes: Vec<f64>,
    pub frozen: Frozen,
    /// No batch item carried a scribble.
    pub no_supervision: bool,
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Loss terms and gradients for one batch without touching any state.
pub fn loss_and_grad(
    params: &ModelParams,
    prototypes: &PrototypeMatrix,
    schedule: &SubsetSchedule,
    batch: &Batch,
    cfg: &TrainConfig,
    frozen: Option<&Frozen>,
) -> Result<StepOutput, TrainError> {
    let exec = cfg.trainer.exec.resolve();
    let w = cfg.losses.weights;
    let spec = *params.spec();
    let m = spec.num_classes;
    let channels = spec.prediction_channels();
    let n = spec.input_size * spec.input_size;
    let b = batch.items.len();
    let d = prototypes.count();

    let outs: Vec<ForwardOutput> = par::map(exec, &batch.items, |item| forward(params, &item.crop.image))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let preds: Vec<Planes> = outs.iter().map(ForwardOutput::prediction).collect();
    let mut grads: Vec<OutputGrad> = (0..b).map(|_| OutputGrad::zeros(&spec)).collect();
    let mut terms = LossTerms::default();

    // Weak supervision on the clean crops.
    let no_supervision;
    if w.scribble > 0.0 {
        let losses: Vec<_> = batch
            .items
            .iter()
            .zip(&outs)
            .map(|(item, out)| scribble_loss(&out.softmax, &item.crop.scribbles))
            .collect();
        let annotated = losses.iter().filter(|l| !l.no_supervision).count();
        no_supervision = annotated == 0;
        if annotated > 0 {
            for (g, l) in grads.iter_mut().zip(&losses) {
                if !l.no_supervision {
                    terms.l_scribble += l.value / annotated as f64;
                    g.add_softmax_grad(&scaled(&l.grad, w.scribble / annotated as f64));
                }
            }
        }
    } else {
        no_supervision = !batch.items.iter().any(BatchItem::has_scribbles);
    }
    if w.category > 0.0 {
        for ((g, item), out) in grads.iter_mut().zip(&batch.items).zip(&outs) {
            let (v, gc) = category_loss_with_grad(&out.softmax, &item.crop.present_classes);
            terms.l_category += v / b as f64;
            g.add_softmax_grad(&scaled(&gc, w.category / b as f64));
        }
    }

    // Prototype terms, on one assignment over every pixel of the batch.
    let mut grad_prototypes = vec![0.0; prototypes.data().len()];
    let mut assignment = None;
    if w.needs_assignment() {
        let per_item: Vec<ScoreMatrix> = par::map(exec, &preds, |p| compute_scores(prototypes, p.data(), n))
            .into_iter()
            .collect::<Result<_, _>>()?;
        let mut joined = vec![0.0; d * b * n];
        for (i, s) in per_item.iter().enumerate() {
            for k in 0..d {
                joined[k * b * n + i * n..k * b * n + (i + 1) * n].copy_from_slice(&s.data()[k * n..(k + 1) * n]);
            }
        }
        let scores = ScoreMatrix::from_vec(d, b * n, joined)?;
        let q = match frozen.and_then(|f| f.assignment.as_ref()) {
            Some(q) => q.clone(),
            None => sinkhorn(&scores, cfg.sinkhorn.eps, cfg.sinkhorn.iters)?,
        };

        if w.map > 0.0 {
            let (value, g_scores) = mapping_loss_with_grad(&scores, &q, cfg.sinkhorn.smoothness)?;
            terms.l_map = value;
            for (i, (g, p)) in grads.iter_mut().zip(&preds).enumerate() {
                let mut gs = vec![0.0; d * n];
                for k in 0..d {
                    gs[k * n..(k + 1) * n].copy_from_slice(&g_scores[k * b * n + i * n..k * b * n + (i + 1) * n]);
                }
                let (ga, gy) = scores_backward(prototypes, p.data(), &gs, n);
                for (o, v) in grad_prototypes.iter_mut().zip(&ga) {
                    *o += w.map * v;
                }
                g.add_prediction_grad(&scaled(&gy, w.map));
            }
        }

        let vectors: Vec<Vec<Vec<f64>>> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| aggregate_prototype_vectors(p.data(), channels, q.rows(i * n, n), d))
            .collect();
        let mut grad_vectors = vec![vec![vec![0.0; d]; channels]; b];

        if w.cluster > 0.0 {
            let singles: Vec<Vec<Vec<f64>>> = vectors.iter().map(|v| v[..m].to_vec()).collect();
            let (value, g) = cluster_loss_with_grad(&singles, cfg.losses.tau);
            terms.l_cluster = value;
            for (gv, gi) in grad_vectors.iter_mut().zip(&g) {
                for (row, gr) in gv.iter_mut().zip(gi) {
                    for (o, v) in row.iter_mut().zip(gr) {
                        *o += w.cluster * v;
                    }
                }
            }
        }
        if w.ac > 0.0 {
            for (g, p) in grads.iter_mut().zip(&preds) {
                let (value, gp) = ac_segmentation_term_with_grad(p, schedule);
                terms.l_ac += value / b as f64;
                g.add_prediction_grad(&scaled(&gp, w.ac / b as f64));
            }
            let centers: Vec<Vec<f64>> = (0..channels)
                .map(|c| {
                    let mut acc = vec![0.0; d];
                    for v in &vectors {
                        for (a, x) in acc.iter_mut().zip(&v[c]) {
                            *a += x / b as f64;
                        }
                    }
                    acc
                })
                .collect();
            let (value, g) = ac_prototype_term_with_grad(&centers, schedule);
            terms.l_ac += value;
            for gv in grad_vectors.iter_mut() {
                for (row, gr) in gv.iter_mut().zip(&g) {
                    for (o, v) in row.iter_mut().zip(gr) {
                        *o += w.ac * v / b as f64;
                    }
                }
            }
        }
        if w.cluster > 0.0 || w.ac > 0.0 {
            for (i, (g, gv)) in grads.iter_mut().zip(&grad_vectors).enumerate() {
                g.add_prediction_grad(&aggregate_backward(gv, q.rows(i * n, n), d));
            }
        }
        assignment = Some(q);
    }

    // Mix consistency on the inter-mixed images.
    let mut mix_targets_used = Vec::new();
    let mut extra: Vec<(ForwardOutput, OutputGrad)> = Vec::new();
    if w.mix > 0.0 && !batch.pairs.is_empty() {
        let detach = cfg.losses.detach_mix_target;
        let pairs = batch.pairs.len();
        let reuse = frozen.filter(|f| detach && f.mix_targets.len() == pairs);
        // Intra-mixed forwards: needed for targets unless frozen.
        let intra: Vec<Option<(ForwardOutput, ForwardOutput)>> = if reuse.is_some() {
            vec![None; pairs]
        } else {
            par::map(exec, &batch.pairs, |pair| -> Result<_, SegnetError> {
                Ok(Some((
                    forward(params, &batch.items[pair.first].mixed.image)?,
                    forward(params, &batch.items[pair.second].mixed.image)?,
                )))
            })
            .into_iter()
            .collect::<Result<_, _>>()?
        };
        let mixed_outs: Vec<ForwardOutput> = par::map(exec, &batch.pairs, |pair| forward(params, &pair.mixed.image))
            .into_iter()
            .collect::<Result<_, _>>()?;
        for (p, pair) in batch.pairs.iter().enumerate() {
            let target = match reuse {
                Some(f) => f.mix_targets[p].clone(),
                None => {
                    let (a, c) = intra[p].as_ref().expect("intra forwards computed");
                    mix_targets(&a.prediction(), &c.prediction(), pair.ratio).channels
                }
            };
            let pred = mixed_outs[p].prediction();
            let (value, gp, gt) = mix_consistency_loss_with_grad(&pred, &target, cfg.losses.mix_similarity);
            terms.l_mix += value / pairs as f64;
            let scale = w.mix / pairs as f64;
            let mut g = OutputGrad::zeros(&spec);
            g.add_prediction_grad(&scaled(&gp, scale));
            extra.push((mixed_outs[p].clone(), g));
            if !detach {
                let (a, c) = intra[p].clone().expect("intra forwards computed");
                let mut ga = OutputGrad::zeros(&spec);
                ga.add_prediction_grad(&scaled(&gt, scale * pair.ratio));
                let mut gc = OutputGrad::zeros(&spec);
                gc.add_prediction_grad(&scaled(&gt, scale * (1.0 - pair.ratio)));
                extra.push((a, ga));
                extra.push((c, gc));
            }
            mix_targets_used.push(target);
        }
    }

    let breakdown = total_loss(terms, w)?;

    let jobs: Vec<(&ForwardOutput, &OutputGrad)> = outs
        .iter()
        .zip(&grads)
        .chain(extra.iter().map(|(o, g)| (o, g)))
        .filter(|(_, g)| !g.is_zero())
        .collect();
    let partial: Vec<Vec<f64>> = par::map(exec, &jobs, |(out, g)| {
        let mut acc = vec![0.0; params.len()];
        backward_into(params, out, g, &mut acc).map(|_| acc)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let mut grad_params = vec![0.0; params.len()];
    for g in &partial {
        for (o, v) in grad_params.iter_mut().zip(g) {
            *o += v;
        }
    }
    if grad_params.iter().chain(&grad_prototypes).any(|g| !g.is_finite()) {
        return Err(LossError::Diverged {
            term: "gradient",
            value: f64::NAN,
        }
        .into());
    }

    Ok(StepOutput {
        breakdown,
        grad_params,
        grad_prototypes,
        frozen: Frozen {
            assignment,
            mix_targets: mix_targets_used,
        },
        no_supervision,
    })
}

/// One optimisation step on `state`.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutput, TrainError> {
    let out = loss_and_grad(&state.params, &state.prototypes, &state.schedule, batch, cfg, None)?;
    if cfg.losses.weights.as_array().iter().any(|&w| w > 0.0) {
        let mut protos = state.prototypes.clone();
        {
            let params = state.params.data_mut();
            state.adam.step(
                &cfg.trainer.optimizer,
                &mut [params, protos.data_mut()],
                &[&out.grad_params, &out.grad_prototypes],
            );
        }
        protos.normalize_columns();
        state.prototypes = protos;
        if !state.params.is_finite() {
            return Err(LossError::Diverged {
                term: "parameters",
                value: f64::NAN,
            }
            .into());
        }
    }
    state.global_step += 1;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub losses: LossBreakdown,
    pub no_supervision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_dice: Option<f64>,
}

/// Per-step loss records, per-epoch validation and wall-clock timings.
/// Equality ignores the timings.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Seconds per step.
    pub step_seconds: Vec<f64>,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.epochs == other.epochs
    }
}

/// Training data in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<PhantomSample>,
    pub val: Vec<PhantomSample>,
    pub num_classes: usize,
}

impl TrainData {
    pub fn load(cfg: &DataConfig) -> Result<Self, TrainError> {
        let train_dir = cfg
            .split_dir(&cfg.train_split)
            .ok_or_else(|| TrainError::Config("data.root is not set".into()))?;
        let (train, manifest) = read_dataset(&train_dir)?;
        let val_dir = cfg.split_dir(&cfg.val_split).expect("root checked");
        let val = if val_dir.join(MANIFEST_FILE).exists() {
            read_dataset(&val_dir)?.0
        } else {
            Vec::new()
        };
        Ok(Self {
            train,
            val,
            num_classes: manifest.generator.num_classes,
        })
    }

    fn image_size(&self) -> usize {
        self.train[0].image.height()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters with the best validation Dice (the last ones without a
    /// validation set).
    pub best: ModelParams,
    pub best_val_dice: Option<f64>,
    pub log: TrainLog,
}

fn plan<'a>(cfg: &'a TrainConfig, state: &'a TrainState, sources: usize) -> BatchPlan<'a> {
    BatchPlan {
        seed: derive_seed(cfg.trainer.seed, &[SEED_BATCHES]),
        batch_size: cfg.trainer.batch_size,
        out_size: state.params.spec().input_size,
        scribble_sources: cfg.trainer.scribble_sources.unwrap_or(sources),
        mix: &cfg.mix,
        schedule: &state.schedule,
        exec: cfg.trainer.exec.resolve(),
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, sources: usize) -> usize {
    cfg.trainer.steps_per_epoch.unwrap_or_else(|| {
        (sources * cfg.mix.units_per_source())
            .div_ceil(cfg.trainer.batch_size)
            .max(1)
    })
}

/// Builds the batch the state would train on next.
pub fn next_batch(cfg: &TrainConfig, state: &TrainState, data: &[PhantomSample]) -> Result<Batch, TrainError> {
    Ok(build_batch(
        data,
        &plan(cfg, state, data.len()),
        state.epoch,
        state.step,
    )?)
}

/// Mean foreground Dice of `params` over `samples`.
pub fn validation_dice(params: &ModelParams, samples: &[PhantomSample], exec: Exec) -> Result<f64, TrainError> {
    let m = params.spec().num_classes;
    let scores: Vec<f64> = par::map(exec, samples, |s| {
        predict_labels(params, &s.image).map(|pred| mean_foreground_dice(&pred, &s.labels, m))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Trains from `state` (or a fresh state) until `cfg.trainer.epochs`.
///
/// With `out_dir`, writes `last.ckpt` (training state), `best.ckpt`
/// (model), periodic `epoch-N.ckpt` and `train_log.json`. `stop_after`
/// bounds the number of steps run in this call, for checkpoint/resume.
pub fn train_from(
    cfg: &TrainConfig,
    data: &TrainData,
    state: Option<TrainState>,
    out_dir: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = match state {
        Some(s) => {
            if s.params.spec().num_classes != data.num_classes {
                return Err(TrainError::ClassMismatch {
                    checkpoint: s.params.spec().num_classes,
                    dataset: data.num_classes,
                });
            }
            s
        }
        None => TrainState::init(cfg, data.num_classes, data.image_size())?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let exec = cfg.trainer.exec.resolve();
    let per_epoch = steps_per_epoch(cfg, data.train.len());
    let mut log = TrainLog::default();
    let mut best = state.params.clone();
    let mut best_val: Option<f64> = None;
    let mut ran = 0u64;

    'epochs: while state.epoch < cfg.trainer.epochs {
        while state.step < per_epoch {
            if stop_after.is_some_and(|limit| ran >= limit) {
                break 'epochs;
            }
            let started = Instant::now();
            let batch = next_batch(cfg, &state, &data.train)?;
            let (epoch, step) = (state.epoch, state.step);
            let out = train_step(&mut state, &batch, cfg)?;
            state.step += 1;
            ran += 1;
            log.steps.push(StepRecord {
                epoch,
                step,
                global_step: state.global_step,
                losses: out.breakdown,
                no_supervision: out.no_supervision,
            });
            log.step_seconds.push(started.elapsed().as_secs_f64());
        }
        let finished = state.epoch + 1;
        let val_dice =
            if !data.val.is_empty() && cfg.trainer.validate_every > 0 && finished % cfg.trainer.validate_every == 0 {
                Some(validation_dice(&state.params, &data.val, exec)?)
            } else {
                None
            };
        if let Some(v) = val_dice {
            if best_val.is_none_or(|b| v > b) {
                best_val = Some(v);
                best = state.params.clone();
            }
        }
        log.epochs.push(EpochRecord {
            epoch: state.epoch,
            val_dice,
        });
        state.epoch += 1;
        state.step = 0;
        if let Some(dir) = out_dir {
            if cfg.trainer.checkpoint_every > 0 && finished % cfg.trainer.checkpoint_every == 0 {
                state.save(&dir.join(format!("epoch-{finished}.ckpt")))?;
            }
        }
    }
    if best_val.is_none() {
        best = state.params.clone();
    }
    if let Some(dir) = out_dir {
        state.save(&dir.join("last.ckpt"))?;
        Checkpoint::from_params(&best).save(&dir.join("best.ckpt"))?;
        std::fs::write(dir.join("train_log.json"), serde_json::to_vec_pretty(&log)?)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    }
    Ok(TrainOutcome {
        state,
        best,
        best_val_dice: best_val,
        log,
    })
}

/// Loads the configured dataset and trains from scratch.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let data = TrainData::load(&cfg.data)?;
    train_from(cfg, &data, None, out_dir, None)
}
