//! The dual-branch objective, the training step, and the pretraining loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::genome_io::Window;
use crate::masking::{build_mask_plan_with, MaskPlan};
use crate::model::{pool_groups, EncoderOutput, Student, StudentConfig};
use crate::numeric::{grad_check, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::optim::{accumulate_grads, clip_global_norm, lr_at, par_map, worker_threads, AdamW, OptimConfig};
use crate::rng;
use crate::teacher::{filter_visible, select_rows, SyntheticTeacher, Teacher, TeacherConfig};
use crate::tokenizers::{TokenizedSequence, CHAR_N};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Align pooled visible representations with teacher rows at visible
    /// k-mers.
    Visible,
    /// Align pooled decoder outputs at masked positions with teacher rows at
    /// masked k-mers.
    Masked,
    /// Reconstruction only, as a single-stream masked language model.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    /// Validate every this many steps (0 = only at the start and end).
    pub val_every: usize,
    /// Cap on validation windows (0 = all).
    pub val_windows: usize,
    /// Replace each training window by its reverse complement with
    /// probability 1/2.
    pub rc_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            lambda: 1.0,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            warmup_steps: o.warmup_steps,
            min_lr_ratio: o.min_lr_ratio,
            grad_clip: o.grad_clip,
            val_every: 100,
            val_windows: 64,
            rc_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { ratio: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_attention: bool,
    pub distill_mode: DistillMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_attention: true,
            distill_mode: DistillMode::Visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub ablation: AblationConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let r = self.mask.ratio;
        if !(0.0..=1.0).contains(&r) {
            return Err(HadError::Config(format!("mask.ratio ({r}) must lie in [0, 1]")));
        }
        if self.ablation.distill_mode != DistillMode::Off && !(r > 0.0 && r < 1.0) {
            return Err(HadError::Config(format!(
                "mask.ratio ({r}) must lie strictly between 0 and 1 when distillation is on"
            )));
        }
        if r == 0.0 {
            return Err(HadError::Config("mask.ratio must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(HadError::Config("train.batch_size must be positive".into()));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(HadError::Config("train.lambda must be finite and non-negative".into()));
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) || !(t.grad_clip >= 0.0) {
            return Err(HadError::Config("train.lr, weight_decay and grad_clip must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(HadError::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) {
            return Err(HadError::Config("train.min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over masked positions. Targets must be base ids.
pub fn loss_reconstruction<F: Scalar>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(HadError::EmptyMaskSet);
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= CHAR_N as usize) {
        return Err(HadError::InvalidTokenId(t as u32));
    }
    g.cross_entropy(logits, targets)
}

/// Squared Euclidean distance per row, averaged over rows.
pub fn loss_distillation<F: Scalar>(g: &mut Graph<F>, student_proj: Var, teacher: Var) -> Result<Var> {
    let (a, b) = (g.shape(student_proj).to_vec(), g.shape(teacher).to_vec());
    if a != b || a.len() != 2 {
        return Err(HadError::shape("loss_distillation", &a, &b));
    }
    if a[0] == 0 {
        return Err(HadError::NoVisibleTokens);
    }
    let diff = g.sub(student_proj, teacher)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, F::of(1.0 / a[0] as f64)))
}

/// One masked training window with the teacher rows its distillation
/// branch compares against.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenizedSequence,
    pub plan: MaskPlan,
    /// Teacher rows at visible k-mers (visible mode) or masked k-mers
    /// (masked mode); absent when distillation is off.
    pub teacher: Option<Tensor<f32>>,
}

impl Sample {
    pub fn new(tokens: TokenizedSequence, plan: MaskPlan, teacher: Option<&dyn Teacher>, mode: DistillMode) -> Result<Self> {
        if tokens.len() != plan.len || tokens.k != plan.k {
            return Err(HadError::shape("sample", &[tokens.len(), tokens.k], &[plan.len, plan.k]));
        }
        let teacher = match (mode, teacher) {
            (DistillMode::Off, _) => None,
            (_, None) => return Err(HadError::Config("distillation requires a teacher".into())),
            (DistillMode::Visible, Some(t)) => Some(filter_visible(&t.embed(&tokens)?, &plan)?),
            (DistillMode::Masked, Some(t)) => Some(select_rows(&t.embed(&tokens)?, &plan.masked_kmer, plan.n_units())?),
        };
        Ok(Sample { tokens, plan, teacher })
    }

    /// Masked positions whose base is known; N is never a target.
    pub fn rec_positions(&self) -> Vec<usize> {
        self.plan
            .masked_char
            .iter()
            .copied()
            .filter(|&p| self.tokens.char_ids[p] < CHAR_N)
            .collect()
    }

    /// Rows entering the distillation mean.
    pub fn dis_rows(&self) -> usize {
        self.teacher.as_ref().map_or(0, |t| t.shape()[0])
    }
}

/// Per-window loss terms; either may be absent.
#[derive(Debug, Clone, Copy)]
pub struct WindowLoss {
    pub dis: Option<Var>,
    pub rec: Option<Var>,
}

/// Builds both loss branches of one window in `g`.
pub fn window_losses<F: Scalar>(g: &mut Graph<F>, student: &Student<F>, sample: &Sample, mode: DistillMode) -> Result<WindowLoss> {
    let ids = &sample.tokens.char_ids;
    let plan = &sample.plan;
    let rec_pos = sample.rec_positions();
    let targets: Vec<usize> = rec_pos.iter().map(|&p| ids[p] as usize).collect();
    let teacher_var = |g: &mut Graph<F>| -> Result<Var> {
        let t = sample
            .teacher
            .as_ref()
            .ok_or_else(|| HadError::Config("distillation requires teacher rows".into()))?;
        Ok(g.constant(t.cast()))
    };
    match mode {
        DistillMode::Visible => {
            let enc = student.encode_visible(g, ids, plan)?;
            let pooled = student.pool_to_kmer(g, &enc, plan)?;
            let proj = student.project_to_teacher(g, pooled)?;
            let t = teacher_var(g)?;
            let dis = loss_distillation(g, proj, t)?;
            let rec = if rec_pos.is_empty() {
                None
            } else {
                let z_m = student.cross_attention_decode(g, &rec_pos, enc.z)?;
                let logits = student.lm_head(g, z_m)?;
                Some(loss_reconstruction(g, logits, &targets)?)
            };
            Ok(WindowLoss { dis: Some(dis), rec })
        }
        DistillMode::Masked => {
            let enc = student.encode_visible(g, ids, plan)?;
            let z_m = student.cross_attention_decode(g, &plan.masked_char, enc.z)?;
            let dec = EncoderOutput {
                z: z_m,
                positions: plan.masked_char.clone(),
            };
            let pooled = pool_groups(g, &dec, &plan.masked_kmer, plan.k)?;
            let proj = student.project_to_teacher(g, pooled)?;
            let t = teacher_var(g)?;
            let dis = loss_distillation(g, proj, t)?;
            let rec = if rec_pos.is_empty() {
                None
            } else {
                let rows: Vec<usize> = plan
                    .masked_char
                    .iter()
                    .enumerate()
                    .filter(|&(_, &p)| ids[p] < CHAR_N)
                    .map(|(i, _)| i)
                    .collect();
                let z = g.gather(z_m, &rows)?;
                let logits = student.lm_head(g, z)?;
                Some(loss_reconstruction(g, logits, &targets)?)
            };
            Ok(WindowLoss { dis: Some(dis), rec })
        }
        DistillMode::Off => {
            if rec_pos.is_empty() {
                return Ok(WindowLoss { dis: None, rec: None });
            }
            let z = student.encode_with_mask_tokens(g, ids, plan)?;
            let z_m = g.gather(z, &rec_pos)?;
            let logits = student.lm_head(g, z_m)?;
            Ok(WindowLoss {
                dis: None,
                rec: Some(loss_reconstruction(g, logits, &targets)?),
            })
        }
    }
}

/// Scalar total and branch terms of a single-window objective.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: Var,
    pub dis: Option<Var>,
    pub rec: Option<Var>,
}

/// `loss_dis + λ·loss_rec` for one window, with absent branches counting
/// as zero.
pub fn combined_loss<F: Scalar>(g: &mut Graph<F>, student: &Student<F>, sample: &Sample, mode: DistillMode, lambda: f64) -> Result<CombinedLoss> {
    let w = window_losses(g, student, sample, mode)?;
    let total = weighted_total(g, w.dis, 1.0, w.rec, lambda)?;
    Ok(CombinedLoss {
        total,
        dis: w.dis,
        rec: w.rec,
    })
}

fn weighted_total<F: Scalar>(g: &mut Graph<F>, dis: Option<Var>, wd: f64, rec: Option<Var>, wr: f64) -> Result<Var> {
    let d = dis.map(|v| g.scale(v, F::of(wd)));
    let r = rec.map(|v| g.scale(v, F::of(wr)));
    match (d, r) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(HadError::EmptyMaskSet),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss_rec: f64,
    pub loss_dis: Option<f64>,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_rec: f64,
    pub loss_dis: Option<f64>,
    pub loss_total: f64,
    pub ppl: f64,
    pub lr: f64,
}

/// Batch-level branch values. Each branch is the mean over all of its rows
/// in the batch, so a batch behaves like one long concatenated window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub loss_rec: f64,
    pub loss_dis: Option<f64>,
    pub loss_total: f64,
}

impl BatchLoss {
    pub fn ppl(&self) -> f64 {
        self.loss_rec.exp()
    }
}

struct BatchWeights {
    dis: Vec<f64>,
    rec: Vec<f64>,
}

fn batch_weights(batch: &[Sample], mode: DistillMode) -> Result<BatchWeights> {
    let n_dis: Vec<usize> = batch.iter().map(|s| if mode == DistillMode::Off { 0 } else { s.dis_rows() }).collect();
    let n_rec: Vec<usize> = batch.iter().map(|s| s.rec_positions().len()).collect();
    let (td, tr) = (n_dis.iter().sum::<usize>(), n_rec.iter().sum::<usize>());
    if mode != DistillMode::Off && td == 0 {
        return Err(HadError::NoVisibleTokens);
    }
    if tr == 0 && (mode == DistillMode::Off || td == 0) {
        return Err(HadError::EmptyMaskSet);
    }
    let frac = |n: &[usize], t: usize| n.iter().map(|&x| if t == 0 { 0.0 } else { x as f64 / t as f64 }).collect();
    Ok(BatchWeights {
        dis: frac(&n_dis, td),
        rec: frac(&n_rec, tr),
    })
}

#[derive(Debug, Clone, Copy)]
struct WindowValues {
    dis: Option<f64>,
    rec: Option<f64>,
}

fn combine(values: &[WindowValues], w: &BatchWeights, mode: DistillMode, lambda: f64) -> BatchLoss {
    let rec: f64 = values.iter().zip(&w.rec).filter_map(|(v, &wi)| v.rec.map(|r| r * wi)).sum();
    let dis = (mode != DistillMode::Off).then(|| values.iter().zip(&w.dis).filter_map(|(v, &wi)| v.dis.map(|d| d * wi)).sum::<f64>());
    BatchLoss {
        loss_rec: rec,
        loss_dis: dis,
        loss_total: dis.unwrap_or(0.0) + lambda * rec,
    }
}

fn diagnostic(batch: &[Sample], values: &[WindowValues]) -> String {
    let rows: Vec<serde_json::Value> = batch
        .iter()
        .zip(values)
        .map(|(s, v)| serde_json::json!({"key": s.tokens.key, "loss_dis": v.dis, "loss_rec": v.rec}))
        .collect();
    serde_json::Value::Array(rows).to_string()
}

/// Owns the student and optimizer state; the teacher stays outside.
pub struct Pretrainer {
    pub student: Student<f32>,
    pub opt: AdamW<f32>,
    pub cfg: PretrainConfig,
    step: usize,
    threads: usize,
}

impl Pretrainer {
    pub fn new(student: Student<f32>, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.train.optim(), &student.store);
        Ok(Pretrainer {
            student,
            opt,
            cfg,
            step: 0,
            threads: worker_threads(),
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn mode(&self) -> DistillMode {
        self.cfg.ablation.distill_mode
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        let t = &self.cfg.train;
        lr_at(t.lr, self.step, t.warmup_steps, t.steps, t.min_lr_ratio)
    }

    /// Forward pass only.
    pub fn evaluate(&self, batch: &[Sample]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(HadError::EmptyInput);
        }
        let mode = self.mode();
        let w = batch_weights(batch, mode)?;
        let values = par_map(batch.len(), self.threads, |i| -> Result<WindowValues> {
            let mut g = Graph::frozen();
            let l = window_losses(&mut g, &self.student, &batch[i], mode)?;
            Ok(WindowValues {
                dis: l.dis.map(|v| g.value(v).item().f64()),
                rec: l.rec.map(|v| g.value(v).item().f64()),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(combine(&values, &w, mode, self.cfg.train.lambda))
    }

    /// Backward pass, clipping, and one optimizer update.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(HadError::EmptyInput);
        }
        let start = Instant::now();
        let mode = self.mode();
        let lambda = self.cfg.train.lambda;
        let w = batch_weights(batch, mode)?;
        let student = &self.student;
        let (mut grads, values) = accumulate_grads(&student.store, batch.len(), self.threads, |i, g| {
            let l = window_losses(g, student, &batch[i], mode)?;
            let total = weighted_total(g, l.dis, w.dis[i], l.rec, lambda * w.rec[i])?;
            let v = WindowValues {
                dis: l.dis.map(|v| g.value(v).item().f64()),
                rec: l.rec.map(|v| g.value(v).item().f64()),
            };
            Ok((total, v))
        })?;
        let loss = combine(&values, &w, mode, lambda);
        if !loss.loss_total.is_finite() {
            return Err(HadError::NonFiniteLoss {
                step: self.step,
                detail: diagnostic(batch, &values),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(HadError::NonFiniteLoss {
                step: self.step,
                detail: format!("gradient norm {grad_norm}; windows {}", diagnostic(batch, &values)),
            });
        }
        let lr = self.current_lr();
        self.opt.step(&mut self.student.store, &grads, lr);
        let report = StepReport {
            step: self.step,
            loss_rec: loss.loss_rec,
            loss_dis: loss.loss_dis,
            loss_total: loss.loss_total,
            grad_norm,
            tokens_per_sec: batch.iter().map(|s| s.tokens.len()).sum::<usize>() as f64 / start.elapsed().as_secs_f64().max(1e-9),
        };
        self.step += 1;
        Ok(report)
    }
}

/// Output locations of a pretraining run. The validation log defaults to
/// the metrics log with a `.val.jsonl` suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val_log: PathBuf,
}

impl RunPaths {
    pub fn new(checkpoint: impl Into<PathBuf>, log: impl Into<PathBuf>) -> Self {
        let log = log.into();
        let val_log = val_log_path(&log);
        RunPaths {
            checkpoint: checkpoint.into(),
            log,
            val_log,
        }
    }
}

pub fn val_log_path(log: &Path) -> PathBuf {
    let stem = log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    log.with_file_name(format!("{stem}.val.jsonl"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub train: Vec<LogRecord>,
    pub val: Vec<LogRecord>,
}

/// Builds a masked sample for window `w`; `index` selects the mask stream.
pub fn make_sample(w: &Window, k: usize, ratio: f64, seed: u64, stream: &str, index: u64, teacher: Option<&dyn Teacher>, mode: DistillMode) -> Result<Sample> {
    let tokens = TokenizedSequence::from_window(w, k)?;
    let mut r = rng::indexed_stream(seed, stream, index);
    let plan = build_mask_plan_with(tokens.len(), k, ratio, &mut r)?;
    Sample::new(tokens, plan, teacher, mode)
}

/// Deterministic epoch-shuffled sampling with optional reverse-complement
/// augmentation.
struct Sampler<'a> {
    windows: &'a [Window],
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl<'a> Sampler<'a> {
    fn new(windows: &'a [Window], seed: u64) -> Self {
        Sampler {
            windows,
            seed,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn window(&mut self, global: u64, rc_augment: bool) -> Window {
        let n = self.windows.len() as u64;
        let epoch = global / n;
        if self.epoch != Some(epoch) {
            self.order = (0..self.windows.len()).collect();
            self.order.shuffle(&mut rng::indexed_stream(self.seed, "shuffle", epoch));
            self.epoch = Some(epoch);
        }
        let w = &self.windows[self.order[(global % n) as usize]];
        if rc_augment && rng::indexed_stream(self.seed, "augment", global).random_bool(0.5) {
            w.reverse_complemented()
        } else {
            w.clone()
        }
    }
}

fn write_line(w: &mut impl Write, rec: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains `trainer` for `train.steps` steps over `train_windows`, writing
/// per-step metrics to `paths.log`, periodic validation to `paths.val_log`,
/// and the final parameters to `paths.checkpoint`.
pub fn pretrain_run(
    trainer: &mut Pretrainer,
    teacher: Option<&dyn Teacher>,
    train_windows: &[Window],
    val_windows: &[Window],
    paths: &RunPaths,
) -> Result<PretrainSummary> {
    if train_windows.is_empty() {
        return Err(HadError::EmptyInput);
    }
    let cfg = trainer.cfg.clone();
    let t = &cfg.train;
    let mode = cfg.ablation.distill_mode;
    let k = trainer.student.cfg.k;
    let threads = trainer.threads;
    let teacher = if mode == DistillMode::Off { None } else { teacher };

    let n_val = if t.val_windows == 0 { val_windows.len() } else { t.val_windows.min(val_windows.len()) };
    let val: Vec<Sample> = par_map(n_val, threads, |i| make_sample(&val_windows[i], k, cfg.mask.ratio, t.seed, "val_mask", i as u64, teacher, mode))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut log = BufWriter::new(File::create(&paths.log)?);
    let mut val_log = BufWriter::new(File::create(&paths.val_log)?);
    let mut summary = PretrainSummary {
        train: Vec::new(),
        val: Vec::new(),
    };
    let mut validate = |trainer: &Pretrainer, summary: &mut PretrainSummary| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let l = trainer.evaluate(&val)?;
        let rec = LogRecord {
            step: trainer.step(),
            loss_rec: l.loss_rec,
            loss_dis: l.loss_dis,
            loss_total: l.loss_total,
            ppl: l.ppl(),
            lr: trainer.current_lr(),
        };
        write_line(&mut val_log, &rec)?;
        summary.val.push(rec);
        Ok(())
    };

    validate(trainer, &mut summary)?;
    let mut sampler = Sampler::new(train_windows, t.seed);
    for step in 0..t.steps {
        let base = (step * t.batch_size) as u64;
        let windows: Vec<Window> = (0..t.batch_size as u64).map(|i| sampler.window(base + i, t.rc_augment)).collect();
        let batch: Vec<Sample> = par_map(windows.len(), threads, |i| make_sample(&windows[i], k, cfg.mask.ratio, t.seed, "mask", base + i as u64, teacher, mode))
            .into_iter()
            .collect::<Result<_>>()?;
        let lr = trainer.current_lr();
        let r = trainer.train_step(&batch)?;
        let rec = LogRecord {
            step: r.step,
            loss_rec: r.loss_rec,
            loss_dis: r.loss_dis,
            loss_total: r.loss_total,
            ppl: r.loss_rec.exp(),
            lr,
        };
        write_line(&mut log, &rec)?;
        summary.train.push(rec);
        let done = step + 1;
        if (t.val_every > 0 && done % t.val_every == 0) || done == t.steps {
            validate(trainer, &mut summary)?;
        }
    }
    log.flush()?;
    val_log.flush()?;
    trainer.student.store.save(&paths.checkpoint)?;
    Ok(summary)
}

/// Finite-difference check of the full objective (both branches, λ = 1)
/// for a random window on a 64-bit student of shape `cfg`, with a small
/// synthetic teacher of width `cfg.d_t`.
pub fn grad_check_objective(cfg: &StudentConfig, mode: DistillMode, seed: u64) -> Result<GradCheckReport> {
    let len = cfg.max_len;
    let teacher = SyntheticTeacher::new(
        &TeacherConfig {
            d_t: cfg.d_t,
            depth: 1,
            n_heads: 1,
            seed,
            ..TeacherConfig::default()
        },
        cfg.k,
    )?;
    let mut r = rng::stream(seed, "grad-check");
    let seq: String = (0..len).map(|_| b"ACGT"[r.random_range(0..4)] as char).collect();
    let tokens = TokenizedSequence::new("grad-check", &seq, cfg.k)?;
    let plan = build_mask_plan_with(len, cfg.k, 0.34, &mut r)?;
    let sample = Sample::new(tokens, plan, Some(&teacher), mode)?;
    let student = Student::<f64>::new(cfg.clone(), seed)?;
    grad_check(&student.store, 1e-5, |g, s| {
        Ok(combined_loss(g, &student.with_store(s.clone()), &sample, mode, 1.0)?.total)
    })
}
