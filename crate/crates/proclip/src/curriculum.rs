//! The two-stage progressive alignment pipeline, the from-scratch
//! contrastive baseline, and the component ablation.
//!
//! Stage 1 trains only the text projector, distilling the frozen CLIP text
//! teacher into LLM-embedding space over text alone. Stage 2 contrastively
//! tunes the image encoder and projector with a learnable temperature while
//! an EMA shadow of the image encoder regularizes against drift. The
//! baseline trains the same towers with the contrastive loss only, for the
//! combined epoch budget, from a fresh projector.
//!
//! Runs are bit-reproducible: every random choice derives from the config
//! seed, batches are full-corpus permutations reseeded per epoch, and all
//! reductions are fixed-order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    image_batch, llm_batch, pretrain_teachers_with, sample_corpus, teacher_batch, CorpusSplit,
    PairedSample, PretrainOptions, SplitSpec, SyntheticWorld, Teachers, WorldDims,
};
use crate::embedding::{l2_normalize, EmbeddingBatch, NORM_SMOOTHING_EPS};
use crate::error::{Error, Result};
use crate::eval::{drift_metric, recall_at_k, zero_shot_accuracy, MetricsReport};
use crate::losses::{
    self, apply_reduction, instance_alignment_loss, self_distill_reg_loss,
    structure_alignment_loss, tuning_loss, Reduction, GRAD_IMAGE, GRAD_LOG_TAU, GRAD_STUDENT,
    GRAD_TEXT,
};
use crate::models::{Activation, EmaTeacher, MlpProjector, ToyEncoder};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use crate::seeds;

/// Optimizer hyperparameters for stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

/// Stage-2 hyperparameters: stage-1 fields plus the regularizer weight and
/// the EMA rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Hyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub ema_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Which losses an ablation row enables. `reg` without `info` is invalid:
/// the regularizer exists only inside the contrastive stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub ins: bool,
    #[serde(rename = "struct")]
    pub structure: bool,
    pub info: bool,
    pub reg: bool,
}

impl AblationToggles {
    pub fn validate(&self) -> Result<()> {
        if self.reg && !self.info {
            return Err(Error::InvalidConfig(
                "ablation toggle 'reg' requires 'info': the regularizer only exists \
                 inside the contrastive stage"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ins {
            parts.push("ins");
        }
        if self.structure {
            parts.push("struct");
        }
        if self.info {
            parts.push("info");
        }
        if self.reg {
            parts.push("reg");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Proclip,
    BaselineContrastive,
    Ablation(AblationToggles),
}

/// Synthetic-world and pretraining parameters carried alongside the
/// optimizer configuration so one config file describes a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub llm_dim: usize,
    pub clip_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub heldout_classes: usize,
    pub n_per_class: usize,
    pub eval_per_class: usize,
    pub noise_sigma: f64,
    pub pretrain_epochs: usize,
}

impl WorldConfig {
    pub fn dims(&self) -> WorldDims {
        WorldDims {
            latent: self.latent_dim,
            image: self.image_dim,
            llm: self.llm_dim,
            clip: self.clip_dim,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            heldout_classes: self.heldout_classes,
            eval_per_class: self.eval_per_class,
        }
    }
}

/// Full run configuration. Serialized as JSON with these exact field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1: StageHyper,
    pub stage2: Stage2Hyper,
    pub seed: u64,
    pub schedule: Schedule,
    pub reduction: Reduction,
    pub mode: TrainMode,
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale profile: the published batch ratio (stage2 = 4x stage1)
    /// and optimizer shape are preserved, but batch sizes and learning
    /// rates are rescaled so epochs complete in well under a second.
    pub fn desk() -> Self {
        Self {
            stage1: StageHyper {
                batch_size: 64,
                epochs: 4,
                lr: 3e-3,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.98,
                adam_eps: 1e-6,
            },
            stage2: Stage2Hyper {
                batch_size: 256,
                epochs: 4,
                lr: 1e-3,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.98,
                adam_eps: 1e-6,
                lambda: 0.01,
                ema_alpha: 0.999,
            },
            seed: 0,
            schedule: Schedule::Cosine,
            reduction: Reduction::Sum,
            mode: TrainMode::Proclip,
            world: WorldConfig {
                latent_dim: 8,
                image_dim: 32,
                llm_dim: 64,
                clip_dim: 16,
                hidden_dim: 64,
                n_classes: 32,
                heldout_classes: 8,
                n_per_class: 64,
                eval_per_class: 8,
                noise_sigma: 0.1,
                pretrain_epochs: 200,
            },
        }
    }

    /// The published hyperparameters, verbatim: batches 1024/4096, AdamW
    /// with weight decay 0.05, betas (0.9, 0.98), eps 1e-6, lr 1e-5,
    /// cosine decay, 4 epochs per stage, EMA alpha 0.999, lambda 0.0004.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.stage1 = StageHyper {
            batch_size: 1024,
            epochs: 4,
            lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
        };
        cfg.stage2 = Stage2Hyper {
            batch_size: 4096,
            epochs: 4,
            lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            lambda: 0.0004,
            ema_alpha: 0.999,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let check_stage = |name: &str,
                           batch: usize,
                           epochs: usize,
                           lr: f64,
                           wd: f64,
                           b1: f64,
                           b2: f64,
                           eps: f64|
         -> Result<()> {
            if batch == 0 || epochs == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name}: batch_size and epochs must be positive"
                )));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name}: lr must be positive")));
            }
            if !(wd >= 0.0 && wd.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name}: weight_decay must be non-negative"
                )));
            }
            for (label, beta) in [("beta1", b1), ("beta2", b2)] {
                if !(0.0 < beta && beta < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: {label} must lie in (0, 1), got {beta}"
                    )));
                }
            }
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name}: adam_eps must be positive"
                )));
            }
            Ok(())
        };
        let s1 = &self.stage1;
        check_stage(
            "stage1",
            s1.batch_size,
            s1.epochs,
            s1.lr,
            s1.weight_decay,
            s1.beta1,
            s1.beta2,
            s1.adam_eps,
        )?;
        let s2 = &self.stage2;
        check_stage(
            "stage2",
            s2.batch_size,
            s2.epochs,
            s2.lr,
            s2.weight_decay,
            s2.beta1,
            s2.beta2,
            s2.adam_eps,
        )?;
        if !(s2.lambda >= 0.0 && s2.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "stage2: lambda must be non-negative, got {}",
                s2.lambda
            )));
        }
        if !(0.0..=1.0).contains(&s2.ema_alpha) {
            return Err(Error::InvalidConfig(format!(
                "stage2: ema_alpha must lie in [0, 1], got {}",
                s2.ema_alpha
            )));
        }
        if let TrainMode::Ablation(toggles) = &self.mode {
            toggles.validate()?;
        }
        let w = &self.world;
        if w.heldout_classes >= w.n_classes {
            return Err(Error::InvalidConfig(
                "world: heldout_classes must be below n_classes".into(),
            ));
        }
        Ok(())
    }

    fn adamw1(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.stage1.beta1,
            beta2: self.stage1.beta2,
            eps: self.stage1.adam_eps,
            weight_decay: self.stage1.weight_decay,
        }
    }

    fn adamw2(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.stage2.beta1,
            beta2: self.stage2.beta2,
            eps: self.stage2.adam_eps,
            weight_decay: self.stage2.weight_decay,
        }
    }
}

/// One loss-log line. `tau` is the temperature after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub stage: &'static str,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ins: f64,
    pub loss_struct: f64,
    pub loss_info: f64,
    pub loss_reg: f64,
    pub tau: f64,
}

pub const LOSS_LOG_HEADER: &str =
    "step,stage,lr,loss_total,loss_ins,loss_struct,loss_info,loss_reg,tau";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.lr,
            self.loss_total,
            self.loss_ins,
            self.loss_struct,
            self.loss_info,
            self.loss_reg,
            self.tau
        )
    }
}

/// Renders a full log as CSV, header included.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// World, corpus, and frozen teachers: everything a training run consumes.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub world: SyntheticWorld,
    pub split: CorpusSplit,
    pub teachers: Teachers,
}

impl TrainingSetup {
    /// Generates the world, pretrains the teachers, samples the corpus, and
    /// extracts the teacher text embeddings offline.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let world = crate::data::generate_world(
            cfg.seed,
            cfg.world.dims(),
            cfg.world.n_classes,
            cfg.world.noise_sigma,
        )?;
        let teachers = pretrain_teachers_with(
            &world,
            cfg.world.pretrain_epochs,
            &PretrainOptions {
                hidden_dim: cfg.world.hidden_dim,
                ..PretrainOptions::default()
            },
        )?;
        let mut split = sample_corpus(&world, cfg.world.n_per_class, cfg.world.split_spec())?;
        split.attach_teacher_embeddings(&teachers.text_encoder)?;
        Ok(Self {
            world,
            split,
            teachers,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub projector: MlpProjector,
    pub log: Vec<LogRow>,
    pub epoch_mean_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub image_encoder: ToyEncoder,
    pub projector: MlpProjector,
    pub log_tau: f64,
    pub ema: Option<EmaTeacher>,
    pub log: Vec<LogRow>,
    /// Elementwise (min, max) of every student parameter over the run,
    /// flattened in optimizer order and including the initial values. The
    /// EMA shadow always lies inside this envelope.
    pub student_param_extremes: (Vec<f64>, Vec<f64>),
}

fn effective_stage1_toggles(mode: &TrainMode) -> (bool, bool) {
    match mode {
        TrainMode::Ablation(t) => (t.ins, t.structure),
        _ => (true, true),
    }
}

fn effective_lambda(cfg: &TrainConfig) -> f64 {
    match &cfg.mode {
        TrainMode::Ablation(t) if !t.reg => 0.0,
        TrainMode::BaselineContrastive => 0.0,
        _ => cfg.stage2.lambda,
    }
}

fn check_training_batch(samples: &[&PairedSample], finetune_classes: usize) -> Result<()> {
    if let Some(bad) = samples.iter().find(|s| s.class_id >= finetune_classes) {
        return Err(Error::InvalidConfig(format!(
            "held-out class {} leaked into a training batch",
            bad.class_id
        )));
    }
    Ok(())
}

fn ensure_nonempty(cfg_batch: usize, corpus_len: usize, what: &str) -> Result<usize> {
    if corpus_len == 0 {
        return Err(Error::EmptyCorpus(what.into()));
    }
    let steps = corpus_len / cfg_batch;
    if steps == 0 {
        return Err(Error::InvalidConfig(format!(
            "{what}: batch size {cfg_batch} exceeds corpus size {corpus_len}"
        )));
    }
    Ok(steps)
}

/// Stage 1: distill the frozen text teacher into the projector over text
/// only. Only the projector receives updates. Returns the per-step log and
/// per-epoch mean losses.
pub fn run_stage1(cfg: &TrainConfig, setup: &TrainingSetup) -> Result<Stage1Output> {
    cfg.validate()?;
    let corpus = &setup.split.finetune;
    let steps_per_epoch = ensure_nonempty(cfg.stage1.batch_size, corpus.len(), "stage1")?;
    if !setup.split.teacher_embeddings_attached() {
        return Err(Error::InvalidConfig(
            "stage1 requires teacher text embeddings; run pretraining first".into(),
        ));
    }
    let (use_ins, use_struct) = effective_stage1_toggles(&cfg.mode);
    if !use_ins && !use_struct {
        return Err(Error::InvalidConfig(
            "stage1 needs at least one of the ins/struct losses enabled".into(),
        ));
    }

    let mut projector = MlpProjector::init(
        setup.world.dims.llm,
        cfg.world.hidden_dim,
        setup.world.dims.clip,
        Activation::Gelu,
        seeds::rng(cfg.seed, seeds::PROJECTOR_INIT).random(),
    );
    let tensor_lens: Vec<usize> = projector.param_slices().iter().map(|s| s.len()).collect();
    let mut state = OptimizerState::new(&tensor_lens);
    let adamw = cfg.adamw1();

    let total_steps = (steps_per_epoch * cfg.stage1.epochs) as u64;
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut epoch_mean_loss = Vec::with_capacity(cfg.stage1.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.stage1.epochs {
        let perm =
            seeds::epoch_permutation(cfg.seed, epoch as u64, seeds::SHUFFLE, corpus.len());
        let mut epoch_loss = 0.0;
        for chunk in perm.chunks_exact(cfg.stage1.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &corpus[i]).collect();
            check_training_batch(&batch, setup.split.finetune_classes)?;
            let inputs = llm_batch(&batch);
            let teacher = teacher_batch(&batch)?;

            let (student, cache) = projector.forward(&inputs)?;
            let mut ins_value = 0.0;
            let mut struct_value = 0.0;
            let mut grad = EmbeddingBatch::zeros(student.rows(), student.cols());
            if use_ins {
                let ins = instance_alignment_loss(&student, &teacher)?;
                ins_value = ins.value;
                grad.add_scaled(&ins.grads[GRAD_STUDENT], 1.0);
            }
            if use_struct {
                let st = structure_alignment_loss(&student, &teacher)?;
                struct_value = st.value;
                if let Some(g) = st.grad(GRAD_STUDENT) {
                    grad.add_scaled(g, 1.0);
                }
            }
            let mut loss = losses::LossValue {
                value: ins_value + struct_value,
                grads: [(GRAD_STUDENT, grad)].into_iter().collect(),
                warnings: Vec::new(),
            };
            apply_reduction(&mut loss, cfg.reduction, batch.len());
            if !loss.value.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    context: "stage1 distillation loss".into(),
                });
            }
            let scale = match cfg.reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / batch.len() as f64,
            };

            let (grads, _) = projector.backward(&cache, &loss.grads[GRAD_STUDENT])?;
            let lr = cosine_lr(step, total_steps, cfg.stage1.lr);
            {
                let mut params = projector.param_slices_mut();
                adamw_step(&mut params, &grads.slices(), &mut state, lr, &adamw)?;
            }
            log.push(LogRow {
                step,
                stage: "stage1",
                lr,
                loss_total: loss.value,
                loss_ins: ins_value * scale,
                loss_struct: struct_value * scale,
                loss_info: 0.0,
                loss_reg: 0.0,
                tau: losses::TAU_INIT,
            });
            epoch_loss += loss.value;
            step += 1;
        }
        epoch_mean_loss.push(epoch_loss / steps_per_epoch as f64);
    }

    Ok(Stage1Output {
        projector,
        log,
        epoch_mean_loss,
    })
}

/// Shared contrastive training loop for stage 2 and the baseline: both
/// towers and the temperature train under AdamW with cosine decay; when an
/// EMA teacher is present it regularizes the image tower and is updated
/// after every optimizer step.
#[allow(clippy::too_many_arguments)]
fn contrastive_run(
    cfg: &TrainConfig,
    setup: &TrainingSetup,
    mut image_net: MlpProjector,
    mut projector: MlpProjector,
    mut ema: Option<EmaTeacher>,
    lambda: f64,
    epochs: usize,
    stage_label: &'static str,
) -> Result<Stage2Output> {
    let corpus = &setup.split.finetune;
    let steps_per_epoch = ensure_nonempty(cfg.stage2.batch_size, corpus.len(), stage_label)?;
    let mut log_tau = losses::TAU_INIT.ln();

    let tensor_lens: Vec<usize> = image_net
        .param_slices()
        .iter()
        .chain(projector.param_slices().iter())
        .map(|s| s.len())
        .chain([1usize])
        .collect();
    let mut state = OptimizerState::new(&tensor_lens);
    let adamw = cfg.adamw2();

    let mut param_min: Vec<f64> = Vec::new();
    let mut param_max: Vec<f64> = Vec::new();
    let mut track_extremes = |image_net: &MlpProjector| {
        let flat: Vec<f64> = image_net
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        if param_min.is_empty() {
            param_min = flat.clone();
            param_max = flat;
        } else {
            for (i, v) in flat.iter().enumerate() {
                param_min[i] = param_min[i].min(*v);
                param_max[i] = param_max[i].max(*v);
            }
        }
    };
    track_extremes(&image_net);

    let total_steps = (steps_per_epoch * epochs) as u64;
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let perm =
            seeds::epoch_permutation(cfg.seed, epoch as u64, seeds::SHUFFLE, corpus.len());
        for chunk in perm.chunks_exact(cfg.stage2.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &corpus[i]).collect();
            check_training_batch(&batch, setup.split.finetune_classes)?;
            let images = image_batch(&batch);
            let texts = llm_batch(&batch);

            let (v_raw, v_cache) = image_net.forward(&images)?;
            let (t_raw, t_cache) = projector.forward(&texts)?;
            let ema_raw = match &ema {
                Some(teacher) => teacher.apply(&images)?,
                None => v_raw.clone(),
            };
            let mut loss = tuning_loss(&v_raw, &t_raw, &ema_raw, log_tau, lambda)?;
            apply_reduction(&mut loss, cfg.reduction, batch.len());
            if !loss.value.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    context: format!("{stage_label} tuning loss"),
                });
            }
            // Component decomposition for the log.
            let scale = match cfg.reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / batch.len() as f64,
            };
            let reg_value = if lambda > 0.0 {
                self_distill_reg_loss(&v_raw, &ema_raw)?.value * scale
            } else {
                0.0
            };
            let info_value = loss.value - lambda * reg_value;

            let (img_grads, _) = image_net.backward(&v_cache, &loss.grads[GRAD_IMAGE])?;
            let (txt_grads, _) = projector.backward(&t_cache, &loss.grads[GRAD_TEXT])?;
            let tau_grad = [loss.grads[GRAD_LOG_TAU].get(0, 0)];

            let lr = cosine_lr(step, total_steps, cfg.stage2.lr);
            let mut tau_param = [log_tau];
            {
                let mut params: Vec<&mut [f64]> = image_net.param_slices_mut();
                params.extend(projector.param_slices_mut());
                params.push(&mut tau_param);
                let grad_slices: Vec<&[f64]> = img_grads
                    .slices()
                    .into_iter()
                    .chain(txt_grads.slices())
                    .chain([&tau_grad[..]])
                    .collect();
                adamw_step(&mut params, &grad_slices, &mut state, lr, &adamw)?;
            }
            log_tau = tau_param[0];
            track_extremes(&image_net);
            if let Some(teacher) = &mut ema {
                teacher.update(&image_net)?;
            }

            log.push(LogRow {
                step,
                stage: stage_label,
                lr,
                loss_total: loss.value,
                loss_ins: 0.0,
                loss_struct: 0.0,
                loss_info: info_value,
                loss_reg: reg_value,
                tau: log_tau.exp(),
            });
            step += 1;
        }
    }

    Ok(Stage2Output {
        image_encoder: ToyEncoder::new(image_net, "image_features"),
        projector,
        log_tau,
        ema,
        log,
        student_param_extremes: (param_min, param_max),
    })
}

/// Stage 2: contrastive tuning of the pretrained image encoder and the
/// stage-1 projector, with EMA self-distillation regularization.
pub fn run_stage2(
    cfg: &TrainConfig,
    setup: &TrainingSetup,
    stage1_projector: &MlpProjector,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if stage1_projector.in_dim() != setup.world.dims.llm
        || stage1_projector.out_dim() != setup.world.dims.clip
    {
        return Err(Error::ShapeMismatch {
            context: "run_stage2",
            expected: format!("projector {}->{}", setup.world.dims.llm, setup.world.dims.clip),
            got: format!(
                "{}->{}",
                stage1_projector.in_dim(),
                stage1_projector.out_dim()
            ),
        });
    }
    let image_net = setup.teachers.image_encoder.net.clone();
    let ema = EmaTeacher::new(&image_net, cfg.stage2.ema_alpha)?;
    contrastive_run(
        cfg,
        setup,
        image_net,
        stage1_projector.clone(),
        Some(ema),
        effective_lambda(cfg),
        cfg.stage2.epochs,
        "stage2",
    )
}

/// The from-scratch alignment baseline: a fresh projector and the
/// pretrained image encoder train with the contrastive loss only, for the
/// combined stage-1 + stage-2 epoch budget. No distillation, no EMA.
pub fn run_baseline(cfg: &TrainConfig, setup: &TrainingSetup) -> Result<Stage2Output> {
    cfg.validate()?;
    let projector = MlpProjector::init(
        setup.world.dims.llm,
        cfg.world.hidden_dim,
        setup.world.dims.clip,
        Activation::Gelu,
        seeds::rng(cfg.seed, seeds::BASELINE_PROJECTOR_INIT).random(),
    );
    let image_net = setup.teachers.image_encoder.net.clone();
    contrastive_run(
        cfg,
        setup,
        image_net,
        projector,
        None,
        0.0,
        cfg.stage1.epochs + cfg.stage2.epochs,
        "baseline",
    )
}

/// Evaluates one trained model: retrieval on the fine-tune eval split,
/// zero-shot accuracy over all-class prototypes on held-out and fine-tune
/// images, and mean drift of the image encoder from its pretrained
/// reference over every evaluation image.
pub fn evaluate_model(
    setup: &TrainingSetup,
    image_encoder: &ToyEncoder,
    projector: &MlpProjector,
    label: impl Into<String>,
) -> Result<MetricsReport> {
    let eval_refs: Vec<&PairedSample> = setup.split.retrieval_eval.iter().collect();
    if eval_refs.is_empty() {
        return Err(Error::EmptyCorpus("retrieval_eval".into()));
    }
    let normalize = |b: &EmbeddingBatch| l2_normalize(b, NORM_SMOOTHING_EPS).0;

    let image_emb = normalize(&image_encoder.apply(&image_batch(&eval_refs))?);
    let text_emb = normalize(&projector.apply(&llm_batch(&eval_refs))?);
    let (recall_i2t_at1, recall_t2i_at1) = recall_at_k(&image_emb, &text_emb, 1)?;
    let k5 = 5.min(image_emb.rows());
    let (recall_i2t_at5, recall_t2i_at5) = recall_at_k(&image_emb, &text_emb, k5)?;

    // Zero-shot prototypes: the projected canonical text of every class.
    let prototypes = normalize(&projector.apply(&setup.world.canonical_llm_embeddings())?);
    let finetune_labels: Vec<usize> = eval_refs.iter().map(|s| s.class_id).collect();
    let finetune_class_accuracy = zero_shot_accuracy(&image_emb, &prototypes, &finetune_labels)?;

    let heldout_refs: Vec<&PairedSample> = setup.split.heldout.iter().collect();
    let heldout_zero_shot_accuracy = if heldout_refs.is_empty() {
        0.0
    } else {
        let heldout_emb = normalize(&image_encoder.apply(&image_batch(&heldout_refs))?);
        let heldout_labels: Vec<usize> = heldout_refs.iter().map(|s| s.class_id).collect();
        zero_shot_accuracy(&heldout_emb, &prototypes, &heldout_labels)?
    };

    // Drift probes: every evaluation image, fine-tune and held-out alike.
    let mut probe_rows: Vec<Vec<f64>> = eval_refs
        .iter()
        .map(|s| s.image_features.clone())
        .collect();
    probe_rows.extend(heldout_refs.iter().map(|s| s.image_features.clone()));
    let probes = EmbeddingBatch::from_rows(&probe_rows)?;
    let mean_drift = drift_metric(image_encoder, &setup.teachers.image_encoder, &probes)?;

    Ok(MetricsReport {
        label: label.into(),
        recall_i2t_at1,
        recall_t2i_at1,
        recall_i2t_at5,
        recall_t2i_at5,
        heldout_zero_shot_accuracy,
        finetune_class_accuracy,
        mean_drift,
    })
}

/// The four-row component ablation: `{ins}`, `{ins,struct}`,
/// `{ins,struct,info}`, `{ins,struct,info,reg}`. Rows without `info` skip
/// stage 2 entirely and evaluate the pretrained image encoder with the
/// stage-1 projector.
pub fn run_ablation(cfg: &TrainConfig, setup: &TrainingSetup) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let rows = [
        AblationToggles {
            ins: true,
            structure: false,
            info: false,
            reg: false,
        },
        AblationToggles {
            ins: true,
            structure: true,
            info: false,
            reg: false,
        },
        AblationToggles {
            ins: true,
            structure: true,
            info: true,
            reg: false,
        },
        AblationToggles {
            ins: true,
            structure: true,
            info: true,
            reg: true,
        },
    ];
    let mut reports = Vec::with_capacity(rows.len());
    for toggles in rows {
        reports.push(run_ablation_row(cfg, setup, toggles)?);
    }
    Ok(reports)
}

/// Runs one toggle configuration end to end and evaluates it.
pub fn run_ablation_row(
    cfg: &TrainConfig,
    setup: &TrainingSetup,
    toggles: AblationToggles,
) -> Result<MetricsReport> {
    toggles.validate()?;
    let mut row_cfg = cfg.clone();
    row_cfg.mode = TrainMode::Ablation(toggles);
    let stage1 = run_stage1(&row_cfg, setup)?;
    let (image_encoder, projector) = if toggles.info {
        let stage2 = run_stage2(&row_cfg, setup, &stage1.projector)?;
        (stage2.image_encoder, stage2.projector)
    } else {
        (setup.teachers.image_encoder.clone(), stage1.projector)
    };
    evaluate_model(setup, &image_encoder, &projector, toggles.label())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.world = WorldConfig {
            latent_dim: 4,
            image_dim: 8,
            llm_dim: 12,
            clip_dim: 6,
            hidden_dim: 16,
            n_classes: 6,
            heldout_classes: 2,
            n_per_class: 16,
            eval_per_class: 4,
            noise_sigma: 0.05,
            pretrain_epochs: 3,
        };
        cfg.stage1.batch_size = 16;
        cfg.stage1.epochs = 2;
        cfg.stage2.batch_size = 32;
        cfg.stage2.epochs = 2;
        cfg
    }

    fn tiny_setup(cfg: &TrainConfig) -> TrainingSetup {
        let world = crate::data::generate_world(
            cfg.seed,
            cfg.world.dims(),
            cfg.world.n_classes,
            cfg.world.noise_sigma,
        )
        .unwrap();
        let teachers = pretrain_teachers_with(
            &world,
            cfg.world.pretrain_epochs,
            &PretrainOptions {
                hidden_dim: cfg.world.hidden_dim,
                batch_size: 32,
                n_per_class: 8,
                eval_per_class: 4,
                recall_gate: 0.0, // tiny smoke worlds skip the gate
                ..PretrainOptions::default()
            },
        )
        .unwrap();
        let mut split =
            sample_corpus(&world, cfg.world.n_per_class, cfg.world.split_spec()).unwrap();
        split.attach_teacher_embeddings(&teachers.text_encoder).unwrap();
        TrainingSetup {
            world,
            split,
            teachers,
        }
    }

    #[test]
    fn config_json_round_trip_mirrors_field_names() {
        let cfg = TrainConfig::desk();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        for key in [
            "\"stage1\"",
            "\"stage2\"",
            "\"batch_size\"",
            "\"epochs\"",
            "\"lr\"",
            "\"weight_decay\"",
            "\"beta1\"",
            "\"beta2\"",
            "\"adam_eps\"",
            "\"lambda\"",
            "\"ema_alpha\"",
            "\"seed\"",
            "\"schedule\"",
            "\"reduction\"",
            "\"mode\"",
        ] {
            assert!(json.contains(key), "missing {key} in config JSON");
        }
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_profile_matches_published_values() {
        let cfg = TrainConfig::paper();
        assert_eq!(cfg.stage1.batch_size, 1024);
        assert_eq!(cfg.stage2.batch_size, 4096);
        assert_eq!(cfg.stage1.epochs, 4);
        assert_eq!(cfg.stage2.epochs, 4);
        assert_eq!(cfg.stage1.lr, 1e-5);
        assert_eq!(cfg.stage1.weight_decay, 0.05);
        assert_eq!(cfg.stage1.beta1, 0.9);
        assert_eq!(cfg.stage1.beta2, 0.98);
        assert_eq!(cfg.stage1.adam_eps, 1e-6);
        assert_eq!(cfg.stage2.lambda, 0.0004);
        assert_eq!(cfg.stage2.ema_alpha, 0.999);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = TrainConfig::desk();
        cfg.stage2.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.stage1.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.stage2.ema_alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.mode = TrainMode::Ablation(AblationToggles {
            ins: true,
            structure: true,
            info: false,
            reg: true,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_serialization_shapes() {
        assert_eq!(
            serde_json::to_string(&TrainMode::Proclip).unwrap(),
            "\"proclip\""
        );
        assert_eq!(
            serde_json::to_string(&TrainMode::BaselineContrastive).unwrap(),
            "\"baseline_contrastive\""
        );
        let ablation = TrainMode::Ablation(AblationToggles {
            ins: true,
            structure: true,
            info: true,
            reg: false,
        });
        let json = serde_json::to_string(&ablation).unwrap();
        assert!(json.contains("\"ablation\""));
        assert!(json.contains("\"struct\":true"));
    }

    #[test]
    fn stage1_loss_zero_when_teacher_matches_student_init() {
        // Construct the degenerate case: attach teacher embeddings equal to
        // the initial projector outputs. The loss is exactly zero at step 0
        // and, with zero weight decay, parameters never move.
        let mut cfg = tiny_config();
        cfg.stage1.weight_decay = 0.0;
        let mut setup = tiny_setup(&cfg);
        let projector = MlpProjector::init(
            setup.world.dims.llm,
            cfg.world.hidden_dim,
            setup.world.dims.clip,
            Activation::Gelu,
            seeds::rng(cfg.seed, seeds::PROJECTOR_INIT).random(),
        );
        let refs: Vec<&PairedSample> = setup.split.finetune.iter().collect();
        let outputs = projector.apply(&llm_batch(&refs)).unwrap();
        for (i, sample) in setup.split.finetune.iter_mut().enumerate() {
            sample.clip_teacher_text_embedding = Some(outputs.row(i).to_vec());
        }
        let out = run_stage1(&cfg, &setup).unwrap();
        assert!(out.log.iter().all(|row| row.loss_total == 0.0));
        assert_eq!(out.projector, projector);
    }

    #[test]
    fn stage1_trains_only_the_projector() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let teachers_before = setup.teachers.clone();
        let world_before = setup.world.clone();
        let out = run_stage1(&cfg, &setup).unwrap();
        // Frozen teachers and the world's generator maps are bit-identical.
        assert_eq!(setup.teachers.image_encoder.net, teachers_before.image_encoder.net);
        assert_eq!(setup.teachers.text_encoder.net, teachers_before.text_encoder.net);
        assert_eq!(setup.world, world_before);
        // The projector did move.
        let fresh = MlpProjector::init(
            setup.world.dims.llm,
            cfg.world.hidden_dim,
            setup.world.dims.clip,
            Activation::Gelu,
            seeds::rng(cfg.seed, seeds::PROJECTOR_INIT).random(),
        );
        assert_ne!(out.projector, fresh);
    }

    #[test]
    fn stage1_decreases_loss() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let out = run_stage1(&cfg, &setup).unwrap();
        let first = out.epoch_mean_loss.first().unwrap();
        let last = out.epoch_mean_loss.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn stage2_runs_and_logs_reg_zero_at_step0() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let stage1 = run_stage1(&cfg, &setup).unwrap();
        let out = run_stage2(&cfg, &setup, &stage1.projector).unwrap();
        // EMA starts as an exact copy, so the first step's regularizer is 0.
        assert_eq!(out.log[0].loss_reg, 0.0);
        assert!(out.log.iter().all(|r| r.stage == "stage2"));
        assert!(out.log.iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn stage2_lambda_zero_is_pure_info_nce() {
        let mut cfg = tiny_config();
        cfg.stage2.lambda = 0.0;
        let setup = tiny_setup(&cfg);
        let stage1 = run_stage1(&cfg, &setup).unwrap();
        let out = run_stage2(&cfg, &setup, &stage1.projector).unwrap();
        for row in &out.log {
            assert_eq!(row.loss_reg, 0.0);
            assert_eq!(row.loss_total, row.loss_info);
        }
    }

    #[test]
    fn ema_shadow_stays_inside_student_envelope() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let stage1 = run_stage1(&cfg, &setup).unwrap();
        let out = run_stage2(&cfg, &setup, &stage1.projector).unwrap();
        let ema = out.ema.as_ref().unwrap();
        let (min, max) = &out.student_param_extremes;
        let flat: Vec<f64> = ema
            .shadow()
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        for (i, v) in flat.iter().enumerate() {
            assert!(
                *v >= min[i] - 1e-12 && *v <= max[i] + 1e-12,
                "shadow param {i} = {v} outside [{}, {}]",
                min[i],
                max[i]
            );
        }
    }

    #[test]
    fn baseline_first_batch_matches_stage2_with_fresh_projector() {
        // Same seed, same fresh projector, lambda 0: the first logged
        // InfoNCE value must be identical between the two paths.
        let mut cfg = tiny_config();
        cfg.stage2.lambda = 0.0;
        let setup = tiny_setup(&cfg);
        let baseline = run_baseline(&cfg, &setup).unwrap();
        let fresh = MlpProjector::init(
            setup.world.dims.llm,
            cfg.world.hidden_dim,
            setup.world.dims.clip,
            Activation::Gelu,
            seeds::rng(cfg.seed, seeds::BASELINE_PROJECTOR_INIT).random(),
        );
        let stage2 = run_stage2(&cfg, &setup, &fresh).unwrap();
        assert_eq!(
            baseline.log[0].loss_info.to_bits(),
            stage2.log[0].loss_info.to_bits()
        );
    }

    #[test]
    fn determinism_bit_identical_logs_and_params() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let run = || {
            let stage1 = run_stage1(&cfg, &setup).unwrap();
            let stage2 = run_stage2(&cfg, &setup, &stage1.projector).unwrap();
            (stage1, stage2)
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(log_to_csv(&a1.log), log_to_csv(&b1.log));
        assert_eq!(log_to_csv(&a2.log), log_to_csv(&b2.log));
        assert_eq!(a2.image_encoder.net, b2.image_encoder.net);
        assert_eq!(a2.projector, b2.projector);
        assert_eq!(a2.log_tau.to_bits(), b2.log_tau.to_bits());
    }

    #[test]
    fn empty_corpus_is_fatal() {
        let cfg = tiny_config();
        let mut setup = tiny_setup(&cfg);
        setup.split.finetune.clear();
        assert!(matches!(
            run_stage1(&cfg, &setup),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn ablation_produces_four_labeled_rows() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let rows = run_ablation(&cfg, &setup).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].label, "ins");
        assert_eq!(rows[1].label, "ins+struct");
        assert_eq!(rows[2].label, "ins+struct+info");
        assert_eq!(rows[3].label, "ins+struct+info+reg");
        for row in &rows {
            for rate in [
                row.recall_i2t_at1,
                row.recall_t2i_at1,
                row.heldout_zero_shot_accuracy,
                row.finetune_class_accuracy,
            ] {
                assert!((0.0..=1.0).contains(&rate));
            }
            assert!(row.mean_drift >= 0.0);
        }
        // Stage-1-only rows leave the image encoder untouched.
        assert_eq!(rows[0].mean_drift, 0.0);
        assert_eq!(rows[1].mean_drift, 0.0);
    }

    #[test]
    fn reg_toggle_without_info_is_fatal() {
        let cfg = tiny_config();
        let setup = tiny_setup(&cfg);
        let bad = AblationToggles {
            ins: true,
            structure: true,
            info: false,
            reg: true,
        };
        assert!(run_ablation_row(&cfg, &setup, bad).is_err());
    }

    #[test]
    fn log_csv_header_is_stable() {
        assert_eq!(
            LOSS_LOG_HEADER,
            "step,stage,lr,loss_total,loss_ins,loss_struct,loss_info,loss_reg,tau"
        );
        let row = LogRow {
            step: 3,
            stage: "stage1",
            lr: 0.001,
            loss_total: 1.5,
            loss_ins: 1.0,
            loss_struct: 0.5,
            loss_info: 0.0,
            loss_reg: 0.0,
            tau: 0.07,
        };
        assert_eq!(row.to_csv(), "3,stage1,0.001,1.5,1,0.5,0,0,0.07");
    }
}
