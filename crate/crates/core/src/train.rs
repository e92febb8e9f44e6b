//! Training engine: alternating adversarial optimization of the joint
//! objective over five folds, the JAP on/off ablation, checkpointing with
//! epoch-granular resume, and evaluation sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    discriminator_step_loss, joint_objective, BatchTargets, LossBreakdown, TermWeights,
};
use crate::autodiff::Tape;
use crate::checkpoint::{load_bundle, save_bundle};
use crate::data::folds::{stratified_five_fold, N_FOLDS};
use crate::data::format::DatasetManifest;
use crate::error::{InvalidInput, TrainError};
use crate::mask::{derive_targets, AnnotationSet, BinaryMask, Malignancy, Targets};
use crate::metrics::{dice, iou, MetricRow};
use crate::model::{ModelBundle, ModelConfig, ModelKind};
use crate::nn::{seeded_rng, Adam};

/// Which mask a single-branch baseline run trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Reference,
    Union,
    Intersection,
}

impl Default for TargetKind {
    fn default() -> Self {
        TargetKind::Reference
    }
}

/// Declarative training configuration (TOML on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub run_name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the joint minimization players (segmentation net and
    /// generator).
    pub lr_seg: f32,
    pub lr_disc: f32,
    pub lr_clf: f32,
    pub weights: TermWeights,
    pub jap_enabled: bool,
    pub patch_size: usize,
    pub model: ModelConfig,
    /// Baseline-only: the supervision target of the single branch.
    pub unet_target: TargetKind,
    /// Stop a fold early once validation Dice on the overall segmentation
    /// reaches this level.
    pub val_dice_early_stop: Option<f64>,
    /// Restrict training to a single fold index.
    pub fold: Option<usize>,
    /// Dataset root (may be overridden on the command line).
    pub dataset: Option<String>,
    /// Parent directory for run outputs.
    pub out_dir: Option<String>,
    /// Run both JAP arms and emit the fold-by-fold comparison report.
    pub ablation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            seed: 17,
            epochs: 20,
            batch_size: 8,
            lr_seg: 2e-4,
            lr_disc: 2e-4,
            lr_clf: 1e-4,
            weights: TermWeights::default(),
            jap_enabled: true,
            patch_size: 64,
            model: ModelConfig::default(),
            unet_target: TargetKind::Reference,
            val_dice_early_stop: None,
            fold: None,
            dataset: None,
            out_dir: None,
            ablation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        // zero rates are legal (a frozen player is a documented contract)
        if self.lr_seg < 0.0 || self.lr_disc < 0.0 || self.lr_clf < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning rates must be non-negative".into(),
            ));
        }
        let w = &self.weights;
        if w.seg < 0.0 || w.l1 < 0.0 || w.gan < 0.0 || w.malig < 0.0 {
            return Err(TrainError::InvalidConfig(
                "term weights must be non-negative".into(),
            ));
        }
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "patch_size {} not divisible by 32",
                self.patch_size
            )));
        }
        if let Some(f) = self.fold {
            if f >= N_FOLDS {
                return Err(TrainError::InvalidConfig(format!("fold {f} out of range")));
            }
        }
        self.model
            .arch
            .validate()
            .map_err(TrainError::Model)
    }

    pub fn from_toml_str(raw: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(raw).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// A sample with every supervision target precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: ndarray::Array2<f32>,
    pub targets: Targets,
    pub malignancy: Malignancy,
}

pub fn prepare_sample(set: &AnnotationSet) -> Result<PreparedSample, InvalidInput> {
    Ok(PreparedSample {
        id: set.sample_id.clone(),
        image: set.image.clone(),
        targets: derive_targets(set)?,
        malignancy: set.malignancy,
    })
}

fn to_tensors(batch: &[&PreparedSample]) -> (Array4<f32>, BatchTargets) {
    let b = batch.len();
    let (h, w) = batch[0].image.dim();
    let mut images = Array4::<f32>::zeros((b, 1, h, w));
    let mut union = Array4::<f32>::zeros((b, 1, h, w));
    let mut inter = Array4::<f32>::zeros((b, 1, h, w));
    let mut reference = Array4::<f32>::zeros((b, 1, h, w));
    let mut labels = Vec::with_capacity(b);
    for (n, s) in batch.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                images[[n, 0, i, j]] = s.image[[i, j]];
                union[[n, 0, i, j]] = s.targets.union.data()[[i, j]] as f32;
                inter[[n, 0, i, j]] = s.targets.intersection.data()[[i, j]] as f32;
                reference[[n, 0, i, j]] = s.targets.reference.data()[[i, j]] as f32;
            }
        }
        labels.push(Some(s.malignancy.class_index()));
    }
    (
        images,
        BatchTargets {
            union,
            inter,
            reference,
            labels,
        },
    )
}

/// Aggregate validation metrics; union/intersection slots are absent for the
/// single-branch baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub dice_r: f64,
    pub iou_r: f64,
    pub dice_union: Option<f64>,
    pub iou_union: Option<f64>,
    pub dice_inter: Option<f64>,
    pub iou_inter: Option<f64>,
}

impl EvalStats {
    fn zero_three_branch() -> Self {
        Self {
            dice_r: 0.0,
            iou_r: 0.0,
            dice_union: Some(0.0),
            iou_union: Some(0.0),
            dice_inter: Some(0.0),
            iou_inter: Some(0.0),
        }
    }
}

/// Arithmetic mean of per-fold statistics.
pub fn mean_stats(stats: &[EvalStats]) -> EvalStats {
    let n = stats.len() as f64;
    let mean_opt = |f: fn(&EvalStats) -> Option<f64>| -> Option<f64> {
        if stats.iter().all(|s| f(s).is_some()) {
            Some(stats.iter().map(|s| f(s).unwrap()).sum::<f64>() / n)
        } else {
            None
        }
    };
    EvalStats {
        dice_r: stats.iter().map(|s| s.dice_r).sum::<f64>() / n,
        iou_r: stats.iter().map(|s| s.iou_r).sum::<f64>() / n,
        dice_union: mean_opt(|s| s.dice_union),
        iou_union: mean_opt(|s| s.iou_union),
        dice_inter: mean_opt(|s| s.dice_inter),
        iou_inter: mean_opt(|s| s.iou_inter),
    }
}

/// One model plus its per-player optimizers.
pub struct Trainer {
    pub bundle: ModelBundle,
    adam_min: Adam,
    adam_disc: Option<Adam>,
    adam_clf: Option<Adam>,
    pub config: TrainConfig,
    pub steps_taken: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, model_seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let bundle = ModelBundle::new(config.model.clone(), model_seed, config.jap_enabled)?;
        let mut min_slots = bundle.store.slots_with_prefix("seg.");
        min_slots.extend(bundle.store.slots_with_prefix("gen."));
        let adam_min = Adam::new(config.lr_seg, min_slots);
        let adam_disc = config
            .jap_enabled
            .then(|| Adam::new(config.lr_disc, bundle.store.slots_with_prefix("disc.")));
        let adam_clf = config
            .jap_enabled
            .then(|| Adam::new(config.lr_clf, bundle.store.slots_with_prefix("clf.")));
        Ok(Self {
            bundle,
            adam_min,
            adam_disc,
            adam_clf,
            config: config.clone(),
            steps_taken: 0,
        })
    }

    /// One optimization step. With the joint adversarial process enabled the
    /// discriminator updates first (synthesized images detached), then the
    /// minimization players update jointly.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<LossBreakdown, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptySplit("empty batch".into()));
        }
        let (images, targets) = to_tensors(batch);
        let n_slots = self.bundle.store.len();
        if self.config.model.kind == ModelKind::Unet {
            return self.step_baseline(&images, &targets);
        }

        let mut reported_gan_d = None;
        if self.config.jap_enabled {
            let mut tape = Tape::new();
            let (d_loss, d_value) = discriminator_step_loss(&mut tape, &self.bundle, &images)?;
            if !d_value.is_finite() {
                return Err(TrainError::NanLoss {
                    step: self.steps_taken,
                    dump: format!("gan_d={d_value}"),
                });
            }
            let grads = tape.backward(d_loss, n_slots);
            self.adam_disc
                .as_mut()
                .expect("disc optimizer exists when jap is on")
                .step(&mut self.bundle.store, &grads);
            reported_gan_d = Some(d_value);
        }

        let mut tape = Tape::new();
        let fwd = self.bundle.forward_batch(&mut tape, &images, None)?;
        let objective = joint_objective(
            &mut tape,
            &self.bundle,
            &fwd,
            &images,
            &targets,
            self.config.weights,
            self.config.jap_enabled,
        )?;
        let mut breakdown = objective.breakdown(&tape);
        if let Some(v) = reported_gan_d {
            breakdown.gan_d = Some(v);
        }
        if !breakdown.is_finite() {
            return Err(TrainError::NanLoss {
                step: self.steps_taken,
                dump: breakdown.dump(),
            });
        }
        let grads = tape.backward(objective.total_min, n_slots);
        self.adam_min.step(&mut self.bundle.store, &grads);
        if let Some(clf) = self.adam_clf.as_mut() {
            clf.step(&mut self.bundle.store, &grads);
        }
        self.steps_taken += 1;
        Ok(breakdown)
    }

    fn step_baseline(
        &mut self,
        images: &Array4<f32>,
        targets: &BatchTargets,
    ) -> Result<LossBreakdown, TrainError> {
        let mut tape = Tape::new();
        let pred = self.bundle.forward_batch_baseline(&mut tape, images)?;
        let target = match self.config.unet_target {
            TargetKind::Reference => &targets.reference,
            TargetKind::Union => &targets.union,
            TargetKind::Intersection => &targets.inter,
        };
        let t = tape.constant(target.clone().into_dyn());
        let loss = tape.bce_mean(pred, t);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::NanLoss {
                step: self.steps_taken,
                dump: format!("seg_bce={value}"),
            });
        }
        let grads = tape.backward(loss, self.bundle.store.len());
        self.adam_min.step(&mut self.bundle.store, &grads);
        self.steps_taken += 1;
        let mut breakdown = LossBreakdown {
            seg_bce: value,
            seg_bce_inter: 0.0,
            seg_bce_union: 0.0,
            seg_bce_ref: 0.0,
            l1_gen: None,
            gan_g: None,
            gan_d: None,
            malig_ce: None,
            total_min_players: value,
        };
        match self.config.unet_target {
            TargetKind::Reference => breakdown.seg_bce_ref = value,
            TargetKind::Union => breakdown.seg_bce_union = value,
            TargetKind::Intersection => breakdown.seg_bce_inter = value,
        }
        Ok(breakdown)
    }

    /// Mean Dice/IoU of every prediction head over `samples`.
    pub fn evaluate(&self, samples: &[PreparedSample]) -> Result<EvalStats, TrainError> {
        Ok(self.evaluate_with_rows(0, samples)?.0)
    }

    /// Like [`Trainer::evaluate`] but also emits one row per (sample, metric).
    pub fn evaluate_with_rows(
        &self,
        fold: usize,
        samples: &[PreparedSample],
    ) -> Result<(EvalStats, Vec<MetricRow>), TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptySplit("empty evaluation set".into()));
        }
        let three_branch = self.config.model.kind == ModelKind::Uasnet;
        let mut acc = EvalStats::zero_three_branch();
        let mut rows = Vec::new();
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&PreparedSample> = chunk.iter().collect();
            let (images, _) = to_tensors(&refs);
            let mut tape = Tape::new();
            if three_branch {
                let fwd = self.bundle.forward_batch(&mut tape, &images, None)?;
                for (n, s) in chunk.iter().enumerate() {
                    let extract = |id| extract_map(&tape, id, n);
                    let pred_r = BinaryMask::from_soft(&extract(fwd.r));
                    let pred_u = BinaryMask::from_soft(&extract(fwd.union));
                    let pred_i = BinaryMask::from_soft(&extract(fwd.inter));
                    let d_r = dice(&pred_r, &s.targets.reference).expect("shapes match");
                    let j_r = iou(&pred_r, &s.targets.reference).expect("shapes match");
                    let d_u = dice(&pred_u, &s.targets.union).expect("shapes match");
                    let j_u = iou(&pred_u, &s.targets.union).expect("shapes match");
                    let d_i = dice(&pred_i, &s.targets.intersection).expect("shapes match");
                    let j_i = iou(&pred_i, &s.targets.intersection).expect("shapes match");
                    acc.dice_r += d_r;
                    acc.iou_r += j_r;
                    *acc.dice_union.as_mut().unwrap() += d_u;
                    *acc.iou_union.as_mut().unwrap() += j_u;
                    *acc.dice_inter.as_mut().unwrap() += d_i;
                    *acc.iou_inter.as_mut().unwrap() += j_i;
                    for (metric, value) in [
                        ("dice_r", d_r),
                        ("iou_r", j_r),
                        ("dice_union", d_u),
                        ("iou_union", j_u),
                        ("dice_inter", d_i),
                        ("iou_inter", j_i),
                    ] {
                        rows.push(MetricRow {
                            fold,
                            sample_id: s.id.clone(),
                            metric: metric.into(),
                            value,
                        });
                    }
                }
            } else {
                let pred = self.bundle.forward_batch_baseline(&mut tape, &images)?;
                for (n, s) in chunk.iter().enumerate() {
                    let map = extract_map(&tape, pred, n);
                    let mask = BinaryMask::from_soft(&map);
                    let target = match self.config.unet_target {
                        TargetKind::Reference => &s.targets.reference,
                        TargetKind::Union => &s.targets.union,
                        TargetKind::Intersection => &s.targets.intersection,
                    };
                    let d = dice(&mask, target).expect("shapes match");
                    let j = iou(&mask, target).expect("shapes match");
                    acc.dice_r += d;
                    acc.iou_r += j;
                    for (metric, value) in [("dice_r", d), ("iou_r", j)] {
                        rows.push(MetricRow {
                            fold,
                            sample_id: s.id.clone(),
                            metric: metric.into(),
                            value,
                        });
                    }
                }
            }
        }
        let n = samples.len() as f64;
        acc.dice_r /= n;
        acc.iou_r /= n;
        if three_branch {
            for slot in [
                &mut acc.dice_union,
                &mut acc.iou_union,
                &mut acc.dice_inter,
                &mut acc.iou_inter,
            ] {
                *slot = slot.map(|v| v / n);
            }
        } else {
            acc.dice_union = None;
            acc.iou_union = None;
            acc.dice_inter = None;
            acc.iou_inter = None;
        }
        Ok((acc, rows))
    }
}

fn extract_map(tape: &Tape, id: crate::autodiff::NodeId, batch_index: usize) -> ndarray::Array2<f32> {
    tape.value(id)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis(ndarray::Axis(0), batch_index)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned()
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub val: EvalStats,
}

/// Outcome of one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: EvalStats,
    pub records: Vec<EpochRecord>,
    #[serde(skip)]
    pub sample_rows: Vec<MetricRow>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f32;
    let sum_opt = |f: fn(&LossBreakdown) -> Option<f32>| -> Option<f32> {
        if items.iter().all(|b| f(b).is_some()) {
            Some(items.iter().map(|b| f(b).unwrap()).sum::<f32>() / n)
        } else {
            None
        }
    };
    LossBreakdown {
        seg_bce: items.iter().map(|b| b.seg_bce).sum::<f32>() / n,
        seg_bce_inter: items.iter().map(|b| b.seg_bce_inter).sum::<f32>() / n,
        seg_bce_union: items.iter().map(|b| b.seg_bce_union).sum::<f32>() / n,
        seg_bce_ref: items.iter().map(|b| b.seg_bce_ref).sum::<f32>() / n,
        l1_gen: sum_opt(|b| b.l1_gen),
        gan_g: sum_opt(|b| b.gan_g),
        gan_d: sum_opt(|b| b.gan_d),
        malig_ce: sum_opt(|b| b.malig_ce),
        total_min_players: items.iter().map(|b| b.total_min_players).sum::<f32>() / n,
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    epoch: usize,
    steps_taken: usize,
    best_epoch: usize,
    best_val: EvalStats,
    records: Vec<EpochRecord>,
    adam_min_t: u64,
    adam_disc_t: Option<u64>,
    adam_clf_t: Option<u64>,
}

/// Trains on `train`, evaluates `val` every epoch, keeps the best-Dice
/// checkpoint. Deterministic given the config seed; resumes from the fold's
/// resume checkpoint when a run directory is provided.
pub fn run_fold(
    train: &[PreparedSample],
    val: &[PreparedSample],
    config: &TrainConfig,
    fold: usize,
    run_dir: Option<&Path>,
) -> Result<FoldResult, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptySplit(format!(
            "fold {fold}: {} train / {} val samples",
            train.len(),
            val.len()
        )));
    }
    let model_seed = config.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(fold as u64 + 1));
    let mut trainer = Trainer::new(config, model_seed)?;
    let mut start_epoch = 0usize;
    let mut best_epoch = 0usize;
    let mut best_val: Option<EvalStats> = None;
    let mut best_store = trainer.bundle.store.clone();
    let mut records: Vec<EpochRecord> = Vec::new();

    let resume_path = run_dir.map(|d| d.join("checkpoints").join(format!("fold{fold}-resume.ckpt")));
    if let Some(rp) = resume_path.as_ref().filter(|p| p.exists()) {
        let (bundle, meta, leftovers) = load_bundle(rp)?;
        let state: ResumeState = serde_json::from_str(
            meta.extra
                .get("resume")
                .ok_or_else(|| TrainError::InvalidConfig("resume checkpoint lacks state".into()))?,
        )
        .map_err(|e| TrainError::InvalidConfig(format!("resume state decode: {e}")))?;
        trainer.bundle = bundle;
        trainer.steps_taken = state.steps_taken;
        let mut min_arrays = Vec::new();
        let mut disc_arrays = Vec::new();
        let mut clf_arrays = Vec::new();
        let mut best_arrays = Vec::new();
        for (name, arr) in leftovers {
            if let Some(rest) = name.strip_prefix("state.adam_min.") {
                min_arrays.push((rest.to_string(), arr));
            } else if let Some(rest) = name.strip_prefix("state.adam_disc.") {
                disc_arrays.push((rest.to_string(), arr));
            } else if let Some(rest) = name.strip_prefix("state.adam_clf.") {
                clf_arrays.push((rest.to_string(), arr));
            } else if let Some(rest) = name.strip_prefix("best.") {
                best_arrays.push((rest.to_string(), arr));
            }
        }
        trainer.adam_min.restore_state(state.adam_min_t, min_arrays);
        if let (Some(opt), Some(t)) = (trainer.adam_disc.as_mut(), state.adam_disc_t) {
            opt.restore_state(t, disc_arrays);
        }
        if let (Some(opt), Some(t)) = (trainer.adam_clf.as_mut(), state.adam_clf_t) {
            opt.restore_state(t, clf_arrays);
        }
        best_store = trainer.bundle.store.clone();
        for (name, arr) in best_arrays {
            if let Some(slot) = best_store.slot_by_name(&name) {
                *best_store.value_mut(slot) = arr;
            }
        }
        start_epoch = state.epoch;
        best_epoch = state.best_epoch;
        best_val = Some(state.best_val);
        records = state.records;
    }

    let early_stop_hit = |val: &EvalStats, config: &TrainConfig| {
        config
            .val_dice_early_stop
            .map(|t| val.dice_r >= t)
            .unwrap_or(false)
    };
    let mut stopped = records
        .last()
        .map(|r| early_stop_hit(&r.val, config))
        .unwrap_or(false);

    for epoch in start_epoch..config.epochs {
        if stopped {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seeded_rng(config.seed, &format!("shuffle-f{fold}-e{epoch}"));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            losses.push(trainer.step(&batch)?);
        }
        let (val_stats, _) = trainer.evaluate_with_rows(fold, val)?;
        let record = EpochRecord {
            epoch,
            mean_loss: mean_breakdown(&losses),
            val: val_stats,
        };
        let improved = best_val.map(|b| val_stats.dice_r > b.dice_r).unwrap_or(true);
        if improved {
            best_val = Some(val_stats);
            best_epoch = epoch;
            best_store = trainer.bundle.store.clone();
        }
        records.push(record);
        stopped = early_stop_hit(&val_stats, config);

        if let Some(rp) = resume_path.as_ref() {
            let state = ResumeState {
                epoch: epoch + 1,
                steps_taken: trainer.steps_taken,
                best_epoch,
                best_val: best_val.expect("set above"),
                records: records.clone(),
                adam_min_t: trainer.adam_min.t,
                adam_disc_t: trainer.adam_disc.as_ref().map(|a| a.t),
                adam_clf_t: trainer.adam_clf.as_ref().map(|a| a.t),
            };
            let mut extra = BTreeMap::new();
            extra.insert(
                "resume".to_string(),
                serde_json::to_string(&state)
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
            );
            let mut extra_arrays: Vec<(String, crate::autodiff::Ax)> = Vec::new();
            for (suffix, arr) in trainer.adam_min.state_arrays() {
                extra_arrays.push((format!("state.adam_min.{suffix}"), arr));
            }
            if let Some(opt) = trainer.adam_disc.as_ref() {
                for (suffix, arr) in opt.state_arrays() {
                    extra_arrays.push((format!("state.adam_disc.{suffix}"), arr));
                }
            }
            if let Some(opt) = trainer.adam_clf.as_ref() {
                for (suffix, arr) in opt.state_arrays() {
                    extra_arrays.push((format!("state.adam_clf.{suffix}"), arr));
                }
            }
            for (name, arr) in best_store.iter_sorted() {
                extra_arrays.push((format!("best.{name}"), arr.clone()));
            }
            save_bundle(rp, &trainer.bundle, extra, &extra_arrays)?;
        }
    }

    // final evaluation rows come from the best checkpoint
    trainer.bundle.store = best_store;
    let (final_val, sample_rows) = trainer.evaluate_with_rows(fold, val)?;
    if let Some(dir) = run_dir {
        let best_path = dir.join("checkpoints").join(format!("fold{fold}-best.ckpt"));
        let mut extra = BTreeMap::new();
        extra.insert("fold".into(), fold.to_string());
        extra.insert("best_epoch".into(), best_epoch.to_string());
        extra.insert("val_dice_r".into(), format!("{:.9}", final_val.dice_r));
        save_bundle(&best_path, &trainer.bundle, extra, &[])?;
    }
    Ok(FoldResult {
        fold,
        epochs_run: records.len(),
        best_epoch,
        best_val: final_val,
        records,
        sample_rows,
    })
}

/// Cross-validation outcome: per-fold results plus the fold mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub mean: EvalStats,
}

/// Runs every fold (or the single configured fold) and writes run artifacts
/// under `run_dir` when provided: `config-resolved`, `metrics.csv`,
/// `samples.csv`, `curves/` and `checkpoints/`.
pub fn run_cv(
    samples: &[PreparedSample],
    manifest: &DatasetManifest,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<CvResult, TrainError> {
    config.validate()?;
    if manifest.samples.is_empty() {
        return Err(TrainError::EmptySplit("empty manifest".into()));
    }
    let split = stratified_five_fold(manifest, config.seed)?;
    split.audit_partition(manifest)?;
    let by_id: BTreeMap<&str, &PreparedSample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for entry in &manifest.samples {
        if !by_id.contains_key(entry.sample_id.as_str()) {
            return Err(TrainError::EmptySplit(format!(
                "sample {} in manifest but not loaded",
                entry.sample_id
            )));
        }
    }

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_text(&dir.join("config-resolved"), &config.to_toml_string())?;
    }

    let folds_to_run: Vec<usize> = match config.fold {
        Some(f) => vec![f],
        None => (0..N_FOLDS).collect(),
    };
    let mut fold_results = Vec::new();
    for &fold in &folds_to_run {
        let val_ids: std::collections::BTreeSet<String> =
            split.ids_in_fold(fold).into_iter().collect();
        let train_set: Vec<PreparedSample> = manifest
            .samples
            .iter()
            .filter(|e| !val_ids.contains(&e.sample_id))
            .map(|e| (*by_id[e.sample_id.as_str()]).clone())
            .collect();
        let val_set: Vec<PreparedSample> = manifest
            .samples
            .iter()
            .filter(|e| val_ids.contains(&e.sample_id))
            .map(|e| (*by_id[e.sample_id.as_str()]).clone())
            .collect();
        // partition audit: no validation sample in the training set
        for v in &val_set {
            if train_set.iter().any(|t| t.id == v.id) {
                return Err(TrainError::EmptySplit(format!(
                    "sample {} leaked into its own training fold",
                    v.id
                )));
            }
        }
        fold_results.push(run_fold(&train_set, &val_set, config, fold, run_dir)?);
    }

    let mean = mean_stats(&fold_results.iter().map(|f| f.best_val).collect::<Vec<_>>());
    let result = CvResult {
        folds: fold_results,
        mean,
    };
    if let Some(dir) = run_dir {
        write_run_artifacts(dir, &result)?;
        // overall best checkpoint: highest validation dice fold
        if let Some(best) = result
            .folds
            .iter()
            .max_by(|a, b| a.best_val.dice_r.partial_cmp(&b.best_val.dice_r).unwrap())
        {
            let src = dir.join("checkpoints").join(format!("fold{}-best.ckpt", best.fold));
            let dst = dir.join("checkpoints").join("best.ckpt");
            std::fs::copy(&src, &dst).map_err(|e| TrainError::Io {
                path: dst.display().to_string(),
                source: e,
            })?;
        }
    }
    Ok(result)
}

fn write_text(path: &Path, content: &str) -> Result<(), TrainError> {
    std::fs::write(path, content).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_run_artifacts(dir: &Path, result: &CvResult) -> Result<(), TrainError> {
    let mut metrics = String::from("fold,epoch,target,dice,iou\n");
    for fold in &result.folds {
        for rec in &fold.records {
            let mut push = |target: &str, d: f64, j: f64| {
                metrics.push_str(&format!(
                    "{},{},{},{:.9},{:.9}\n",
                    fold.fold, rec.epoch, target, d, j
                ));
            };
            push("r", rec.val.dice_r, rec.val.iou_r);
            push(
                "union",
                rec.val.dice_union.unwrap_or(f64::NAN),
                rec.val.iou_union.unwrap_or(f64::NAN),
            );
            push(
                "inter",
                rec.val.dice_inter.unwrap_or(f64::NAN),
                rec.val.iou_inter.unwrap_or(f64::NAN),
            );
        }
    }
    write_text(&dir.join("metrics.csv"), &metrics)?;

    let curves_dir = dir.join("curves");
    std::fs::create_dir_all(&curves_dir).map_err(|e| TrainError::Io {
        path: curves_dir.display().to_string(),
        source: e,
    })?;
    for fold in &result.folds {
        let mut csv =
            String::from("epoch,seg_bce,seg_inter,seg_union,seg_ref,l1,gan_g,gan_d,malig,total\n");
        let opt = |v: Option<f32>| v.map_or(String::from(""), |x| format!("{x:.9}"));
        for rec in &fold.records {
            let b = &rec.mean_loss;
            csv.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{},{},{},{},{:.9}\n",
                rec.epoch,
                b.seg_bce,
                b.seg_bce_inter,
                b.seg_bce_union,
                b.seg_bce_ref,
                opt(b.l1_gen),
                opt(b.gan_g),
                opt(b.gan_d),
                opt(b.malig_ce),
                b.total_min_players
            ));
        }
        write_text(&curves_dir.join(format!("fold{}_losses.csv", fold.fold)), &csv)?;
    }

    let mut rows = Vec::new();
    for fold in &result.folds {
        rows.extend(fold.sample_rows.iter().cloned());
    }
    crate::metrics::write_metrics_csv(&rows, &dir.join("samples.csv")).map_err(|e| {
        TrainError::Io {
            path: dir.join("samples.csv").display().to_string(),
            source: e,
        }
    })?;
    Ok(())
}

/// One named ablation arm of the Table-3-shaped comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub result: CvResult,
}

/// Runs the JAP on/off comparison and writes the fold-by-fold report.
pub fn run_ablation(
    samples: &[PreparedSample],
    manifest: &DatasetManifest,
    base_config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<ArmReport>, TrainError> {
    let arms = [("ours_without_jap", false), ("ours", true)];
    let mut reports = Vec::new();
    for (name, jap) in arms {
        let mut config = base_config.clone();
        config.jap_enabled = jap;
        config.run_name = format!("{}-{name}", base_config.run_name);
        let arm_dir: Option<PathBuf> = run_dir.map(|d| d.join(name));
        let result = run_cv(samples, manifest, &config, arm_dir.as_deref())?;
        reports.push(ArmReport {
            name: name.to_string(),
            result,
        });
    }
    if let Some(dir) = run_dir {
        let mut csv = String::from("model,fold1,fold2,fold3,fold4,fold5,average\n");
        for arm in &reports {
            let mut line = arm.name.clone();
            for fold in &arm.result.folds {
                line.push_str(&format!(",{:.9}", fold.best_val.dice_r));
            }
            line.push_str(&format!(",{:.9}\n", arm.result.mean.dice_r));
            csv.push_str(&line);
        }
        write_text(&dir.join("report.csv"), &csv)?;
    }
    Ok(reports)
}

/// Serializes the full report table for printing.
pub fn format_report(reports: &[ArmReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "model", "fold1", "fold2", "fold3", "fold4", "fold5", "average"
    ));
    for arm in reports {
        out.push_str(&format!("{:<20}", arm.name));
        for fold in &arm.result.folds {
            out.push_str(&format!(" {:>8.4}", fold.best_val.dice_r));
        }
        out.push_str(&format!(" {:>9.4}\n", arm.result.mean.dice_r));
    }
    out
}
