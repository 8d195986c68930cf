//! Sequence classification on top of the pretrained encoder: fine-tuning,
//! reverse-complement conjoined prediction, metrics, and embedding export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::genome_io::reverse_complement;
use crate::layers::Linear;
use crate::model::{Student, StudentConfig};
use crate::numeric::params::{read_u32, read_u64};
use crate::numeric::{Graph, ParamStore, Scalar, Var};
use crate::optim::{accumulate_grads, clip_global_norm, lr_at, par_map, worker_threads, AdamW, OptimConfig};
use crate::rng;
use crate::tokenizers::{encode_char, CHAR_N};

const EMBED_MAGIC: &[u8; 4] = b"HADE";
const EMBED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sequence: String,
    pub label: usize,
}

/// Reads a CSV with header `sequence,label`. Bases are upper-cased.
pub fn read_labeled_csv(path: &Path) -> Result<Vec<LabeledExample>> {
    read_labeled(File::open(path)?)
}

pub fn read_labeled(r: impl Read) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sequence", "label"] {
        return Err(HadError::BadFile {
            what: "labeled csv",
            reason: format!("expected header `sequence,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut ex: LabeledExample = row?;
        ex.sequence.make_ascii_uppercase();
        encode_char(&ex.sequence)?;
        out.push(ex);
    }
    Ok(out)
}

/// `max label + 1`, at least 2.
pub fn infer_n_classes(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.label + 1).max().unwrap_or(0).max(2)
}

pub fn check_labels(examples: &[LabeledExample], n_classes: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= n_classes) {
        Some(e) => Err(HadError::Config(format!("label {} out of range for {n_classes} classes", e.label))),
        None => Ok(()),
    }
}

/// Binary counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(HadError::shape("confusion", &[predictions.len()], &[labels.len()]));
        }
        let mut counts = vec![0u64; n_classes * n_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= n_classes || y >= n_classes {
                return Err(HadError::Config(format!("class index out of range for {n_classes} classes")));
            }
            counts[y * n_classes + p] += 1;
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn binary(&self) -> Option<BinaryCounts> {
        (self.n_classes == 2).then(|| BinaryCounts {
            tp: self.at(1, 1),
            tn: self.at(0, 0),
            fp: self.at(0, 1),
            fn_: self.at(1, 0),
        })
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &BinaryCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// Gorodkin's R_K over the full confusion matrix; reduces to [`mcc`] for
/// two classes.
pub fn mcc_multiclass(c: &ConfusionMatrix) -> f64 {
    let n = c.n_classes;
    let s = c.total() as f64;
    let diag: f64 = (0..n).map(|k| c.at(k, k) as f64).sum();
    let t: Vec<f64> = (0..n).map(|k| (0..n).map(|j| c.at(k, j) as f64).sum()).collect();
    let p: Vec<f64> = (0..n).map(|k| (0..n).map(|i| c.at(i, k) as f64).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den == 0.0 {
        return 0.0;
    }
    (diag * s - tp) / den.sqrt()
}

/// `2TP / (2TP + FP + FN)`; 0 when the denominator is 0.
pub fn f1(c: &BinaryCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / den as f64
    }
}

/// Unweighted mean of one-vs-rest F1 over classes.
pub fn f1_macro(c: &ConfusionMatrix) -> f64 {
    let n = c.n_classes;
    let per = (0..n).map(|k| {
        let tp = c.at(k, k);
        let fp: u64 = (0..n).filter(|&i| i != k).map(|i| c.at(i, k)).sum();
        let fn_: u64 = (0..n).filter(|&j| j != k).map(|j| c.at(k, j)).sum();
        f1(&BinaryCounts { tp, tn: 0, fp, fn_ })
    });
    per.sum::<f64>() / n as f64
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(HadError::shape("accuracy", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(HadError::EmptyInput);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Binary MCC for two classes, R_K otherwise.
    Mcc,
    /// Binary F1 for two classes, macro F1 otherwise.
    F1,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mcc => "mcc",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn compute(self, predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
        if labels.is_empty() {
            return Err(HadError::EmptyInput);
        }
        let c = ConfusionMatrix::from_predictions(predictions, labels, n_classes)?;
        Ok(match (self, c.binary()) {
            (Metric::Accuracy, _) => accuracy(predictions, labels)?,
            (Metric::Mcc, Some(b)) => mcc(&b),
            (Metric::Mcc, None) => mcc_multiclass(&c),
            (Metric::F1, Some(b)) => f1(&b),
            (Metric::F1, None) => f1_macro(&c),
        })
    }
}

/// One metrics output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: String,
    /// 0 infers `max label + 1` from the training data.
    pub n_classes: usize,
    pub metric: Metric,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    /// Train only the classification head.
    pub head_only: bool,
    /// Exclude padding from the mean pool.
    pub pad_masked_pool: bool,
    /// Average logits over each sequence and its reverse complement at
    /// prediction time.
    pub conjoin: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: "task".into(),
            n_classes: 0,
            metric: Metric::Mcc,
            steps: 300,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 10,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            head_only: false,
            pad_masked_pool: false,
            conjoin: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 1 {
            return Err(HadError::InvalidHead(1));
        }
        if self.batch_size == 0 {
            return Err(HadError::Config("finetune.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(HadError::Config("finetune.lr, weight_decay and grad_clip must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(HadError::Config("finetune.min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            grad_clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }
}

/// Encoder plus a mean-pool and an affine head named `cls`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F: Scalar> {
    pub student: Student<F>,
    pub n_classes: usize,
    pub pad_masked_pool: bool,
    head: Linear,
}

impl<F: Scalar> Classifier<F> {
    /// Adds a freshly initialized head to `student`.
    pub fn new(mut student: Student<F>, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(HadError::InvalidHead(n_classes));
        }
        let d = student.cfg.d_model;
        let head = Linear::init(&mut student.store, "cls", d, n_classes, true, &mut rng::stream(seed, "head"))?;
        Ok(Classifier {
            student,
            n_classes,
            pad_masked_pool: false,
            head,
        })
    }

    /// A classifier of shape (`cfg`, `n_classes`) carrying every weight in
    /// `store`; the head stays freshly initialized if `store` has none.
    pub fn from_store(cfg: StudentConfig, n_classes: usize, store: &ParamStore<F>, seed: u64) -> Result<Self> {
        let mut c = Self::new(Student::new(cfg, 0)?, n_classes, seed)?;
        c.student.store.load_matching(store)?;
        Ok(c)
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.student.store
    }

    pub fn head_param_names(&self) -> [&'static str; 2] {
        ["cls.w", "cls.b"]
    }

    /// Character ids truncated to `max_len` and padded with N to a multiple
    /// of k, and the number of unpadded characters.
    pub fn prepare(&self, seq: &str) -> Result<(Vec<u32>, usize)> {
        let mut ids = encode_char(seq)?;
        ids.truncate(self.student.cfg.max_len);
        let real = ids.len();
        let k = self.student.cfg.k;
        let padded = real.div_ceil(k).max(1) * k;
        ids.resize(padded, CHAR_N);
        Ok((ids, real))
    }

    /// Mean-pooled encoder output, shape (1, d).
    pub fn pooled(&self, g: &mut Graph<F>, ids: &[u32], real: usize) -> Result<Var> {
        let z = self.student.encode_sequence(g, ids)?;
        let z = if self.pad_masked_pool && real > 0 && real < ids.len() {
            let rows: Vec<usize> = (0..real).collect();
            g.gather(z, &rows)?
        } else {
            z
        };
        let m = g.mean(z, 0)?;
        g.reshape(m, &[1, self.student.cfg.d_model])
    }

    /// Logits, shape (1, n_classes).
    pub fn logits_graph(&self, g: &mut Graph<F>, ids: &[u32], real: usize) -> Result<Var> {
        let p = self.pooled(g, ids, real)?;
        self.head.forward(g, &self.student.store, p)
    }

    pub fn logits(&self, seq: &str) -> Result<Vec<F>> {
        let (ids, real) = self.prepare(seq)?;
        let mut g = Graph::frozen();
        let l = self.logits_graph(&mut g, &ids, real)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn embedding(&self, seq: &str) -> Result<Vec<F>> {
        let (ids, real) = self.prepare(seq)?;
        let mut g = Graph::frozen();
        let p = self.pooled(&mut g, &ids, real)?;
        Ok(g.value(p).data().to_vec())
    }

    /// `(logits(seq) + logits(revcomp(seq))) / 2`.
    pub fn conjoined_predict(&self, seq: &str) -> Result<Vec<F>> {
        let a = self.logits(seq)?;
        let b = self.logits(&reverse_complement(seq)?)?;
        let half = F::of(0.5);
        Ok(a.iter().zip(&b).map(|(&x, &y)| (x + y) * half).collect())
    }

    pub fn predict_logits(&self, seq: &str, conjoin: bool) -> Result<Vec<F>> {
        if conjoin {
            self.conjoined_predict(seq)
        } else {
            self.logits(seq)
        }
    }
}

pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub logits: Vec<Vec<f32>>,
    pub predictions: Vec<usize>,
    pub value: f64,
}

/// Scores `examples`, in parallel over examples.
pub fn evaluate(clf: &Classifier<f32>, examples: &[LabeledExample], metric: Metric, conjoin: bool) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(HadError::EmptyInput);
    }
    check_labels(examples, clf.n_classes)?;
    let logits = par_map(examples.len(), worker_threads(), |i| clf.predict_logits(&examples[i].sequence, conjoin))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let value = metric.compute(&predictions, &labels, clf.n_classes)?;
    Ok(Evaluation { logits, predictions, value })
}

/// Per-step mean training cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
}

/// Supervised training of `clf` on `train`. All parameters train unless
/// `cfg.head_only`.
pub fn finetune_run(clf: &mut Classifier<f32>, train: &[LabeledExample], cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HadError::EmptyInput);
    }
    check_labels(train, clf.n_classes)?;
    clf.pad_masked_pool = cfg.pad_masked_pool;
    let prepared: Vec<(Vec<u32>, usize)> = train.iter().map(|e| clf.prepare(&e.sequence)).collect::<Result<_>>()?;
    let mask: Vec<bool> = clf
        .store()
        .iter()
        .map(|(_, p)| !cfg.head_only || p.name.starts_with("cls."))
        .collect();
    let mut opt = AdamW::new(cfg.optim(), clf.store()).with_trainable(mask);
    let threads = worker_threads();
    let n = train.len();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|i| {
                let global = step * cfg.batch_size + i;
                if global % n == 0 || order.is_empty() {
                    order = (0..n).collect();
                    order.shuffle(&mut rng::indexed_stream(cfg.seed, "shuffle", (global / n) as u64));
                }
                order[global % n]
            })
            .collect();
        let w = 1.0 / idx.len() as f32;
        let c: &Classifier<f32> = clf;
        let (mut grads, vals) = accumulate_grads(c.store(), idx.len(), threads, |i, g| {
            let (ids, real) = &prepared[idx[i]];
            let l = c.logits_graph(g, ids, *real)?;
            let ce = g.cross_entropy(l, &[train[idx[i]].label])?;
            let v = g.value(ce).item() as f64;
            Ok((g.scale(ce, w), v))
        })?;
        let loss = vals.iter().sum::<f64>() / vals.len() as f64;
        if !loss.is_finite() {
            return Err(HadError::NonFiniteLoss {
                step,
                detail: format!("fine-tuning batch {idx:?}"),
            });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(cfg.lr, step, cfg.warmup_steps, cfg.steps, cfg.min_lr_ratio);
        opt.step(&mut clf.student.store, &grads, lr);
        losses.push(loss);
    }
    Ok(FinetuneReport { losses })
}

/// Writes the mean-pooled encoder output and label of every example.
pub fn export_embeddings(clf: &Classifier<f32>, examples: &[LabeledExample], out: &Path) -> Result<usize> {
    let rows = par_map(examples.len(), worker_threads(), |i| clf.embedding(&examples[i].sequence))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = examples.iter().map(|e| e.label as u32).collect();
    let mut w = BufWriter::new(File::create(out)?);
    write_embeddings(&mut w, clf.student.cfg.d_model, labels.iter().copied().zip(rows.iter().map(|r| r.as_slice())))?;
    w.flush()?;
    Ok(rows.len())
}

pub fn write_embeddings<'a>(w: &mut impl Write, d: usize, records: impl ExactSizeIterator<Item = (u32, &'a [f32])>) -> Result<()> {
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&EMBED_VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (label, v) in records {
        if v.len() != d {
            return Err(HadError::dims("embedding", d, v.len()));
        }
        w.write_all(&label.to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns `d` and the `(label, vector)` records.
pub fn read_embeddings(r: &mut impl Read) -> Result<(usize, Vec<(u32, Vec<f32>)>)> {
    let bad = |reason: &str| HadError::BadFile {
        what: "embedding",
        reason: reason.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(bad("bad magic"));
    }
    if read_u32(r)? != EMBED_VERSION {
        return Err(bad("unsupported version"));
    }
    let d = read_u32(r)? as usize;
    let n = read_u64(r)?;
    let mut out = Vec::new();
    let mut buf = vec![0u8; d * 4];
    for _ in 0..n {
        let label = read_u32(r)?;
        r.read_exact(&mut buf)?;
        let v = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((label, v));
    }
    Ok((d, out))
}

pub fn load_embeddings(path: &Path) -> Result<(usize, Vec<(u32, Vec<f32>)>)> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn expand(c: &BinaryCounts) -> (Vec<usize>, Vec<usize>) {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (n, pred, truth) in [(c.tp, 1, 1), (c.tn, 0, 0), (c.fp, 1, 0), (c.fn_, 0, 1)] {
            for _ in 0..n {
                p.push(pred);
                y.push(truth);
            }
        }
        (p, y)
    }

    /// Pearson correlation of two label vectors, 0 on zero variance.
    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    }

    /// R_K as the correlation of one-hot matrices.
    fn one_hot_correlation(p: &[usize], y: &[usize], n: usize) -> f64 {
        let s = p.len() as f64;
        let cov = |a: &[usize], b: &[usize]| -> f64 {
            (0..n)
                .map(|k| {
                    let ma = a.iter().filter(|&&x| x == k).count() as f64 / s;
                    let mb = b.iter().filter(|&&x| x == k).count() as f64 / s;
                    a.iter()
                        .zip(b)
                        .map(|(&x, &z)| ((x == k) as u8 as f64 - ma) * ((z == k) as u8 as f64 - mb))
                        .sum::<f64>()
                })
                .sum()
        };
        let den = cov(p, p) * cov(y, y);
        if den == 0.0 {
            0.0
        } else {
            cov(p, y) / den.sqrt()
        }
    }

    #[test]
    fn metric_examples() {
        let c = |tp, tn, fp, fn_| BinaryCounts { tp, tn, fp, fn_ };
        assert_eq!(mcc(&c(5, 3, 0, 0)), 1.0);
        assert_eq!(mcc(&c(1, 1, 1, 1)), 0.0);
        assert!((mcc(&c(3, 4, 1, 2)) - 10.0 / 600f64.sqrt()).abs() < 1e-12);
        assert!((mcc(&c(3, 4, 1, 2)) - 0.40825).abs() < 1e-5);
        assert_eq!(mcc(&c(0, 4, 0, 2)), 0.0);
        assert_eq!(f1(&c(1, 0, 0, 0)), 1.0);
        assert_eq!(f1(&c(1, 0, 1, 1)), 0.5);
        assert_eq!(f1(&c(0, 3, 2, 1)), 0.0);
        assert_eq!(f1(&c(0, 3, 0, 0)), 0.0);
        assert_eq!(accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 2, 2], &[1, 0, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(HadError::EmptyInput)));
    }

    #[test]
    fn metrics_match_brute_force_on_all_small_matrices() {
        let mut cases = 0;
        for tp in 0..=5u64 {
            for tn in 0..=5u64 {
                for fp in 0..=5u64 {
                    for fn_ in 0..=5u64 {
                        let c = BinaryCounts { tp, tn, fp, fn_ };
                        let (p, y) = expand(&c);
                        cases += 1;
                        let pf: Vec<f64> = p.iter().map(|&x| x as f64).collect();
                        let yf: Vec<f64> = y.iter().map(|&x| x as f64).collect();
                        if !p.is_empty() {
                            assert!((mcc(&c) - pearson(&pf, &yf)).abs() < 1e-12, "{c:?}");
                            let m = ConfusionMatrix::from_predictions(&p, &y, 2).unwrap();
                            assert_eq!(m.binary().unwrap(), c);
                            assert!((mcc_multiclass(&m) - mcc(&c)).abs() < 1e-12, "{c:?}");
                            let hits = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64;
                            assert!((accuracy(&p, &y).unwrap() - hits / p.len() as f64).abs() < 1e-12);
                        }
                        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                        let want = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                        assert!((f1(&c) - want).abs() < 1e-12, "{c:?}");
                    }
                }
            }
        }
        assert_eq!(cases, 1296);
    }

    #[test]
    fn multiclass_mcc_matches_one_hot_correlation() {
        let mut r = rng::from_seed(5);
        for _ in 0..200 {
            let n = r.random_range(3..6);
            let len = r.random_range(1..40);
            let p: Vec<usize> = (0..len).map(|_| r.random_range(0..n)).collect();
            let y: Vec<usize> = (0..len).map(|_| r.random_range(0..n)).collect();
            let m = ConfusionMatrix::from_predictions(&p, &y, n).unwrap();
            let v = mcc_multiclass(&m);
            assert!((v - one_hot_correlation(&p, &y, n)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&v));
        }
        let perfect = ConfusionMatrix::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert!((mcc_multiclass(&perfect) - 1.0).abs() < 1e-12);
        assert!((f1_macro(&perfect) - 1.0).abs() < 1e-12);
    }

    fn tiny(max_len: usize) -> StudentConfig {
        StudentConfig::scaled(8, 1, max_len, 6, 16)
    }

    fn random_seq(r: &mut rng::Rng, len: usize) -> String {
        (0..len).map(|_| b"ACGTN"[r.random_range(0..5)] as char).collect()
    }

    #[test]
    fn head_and_padding() {
        let s = Student::<f32>::new(tiny(24), 1).unwrap();
        assert!(matches!(Classifier::new(s.clone(), 1, 0), Err(HadError::InvalidHead(1))));
        let c = Classifier::new(s, 3, 0).unwrap();
        let (ids, real) = c.prepare("ACGTACG").unwrap();
        assert_eq!((ids.len(), real), (12, 7));
        assert!(ids[7..].iter().all(|&x| x == CHAR_N));
        let (ids, real) = c.prepare(&"A".repeat(40)).unwrap();
        assert_eq!((ids.len(), real), (24, 24));
        assert_eq!(c.logits("ACGTAC").unwrap().len(), 3);
        assert_eq!(c.logits("ACGTACGG").unwrap(), c.logits("ACGTACGG").unwrap());
    }

    #[test]
    fn conjoined_prediction_identities() {
        let mut r = rng::from_seed(11);
        let c = Classifier::new(Student::<f32>::new(tiny(24), 2).unwrap(), 2, 3).unwrap();
        for _ in 0..20 {
            let len = r.random_range(1..30);
            let x = random_seq(&mut r, len);
            let rc = reverse_complement(&x).unwrap();
            let a = c.conjoined_predict(&x).unwrap();
            let b = c.conjoined_predict(&rc).unwrap();
            assert_eq!(a, b);
            let (la, lb) = (c.logits(&x).unwrap(), c.logits(&rc).unwrap());
            let want: Vec<f32> = la.iter().zip(&lb).map(|(p, q)| (p + q) / 2.0).collect();
            for (u, v) in a.iter().zip(&want) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
        let mut zero = c.clone();
        let ids: Vec<_> = zero.student.store.ids().collect();
        for id in ids {
            zero.student.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(zero.conjoined_predict("ACGTTG").unwrap(), vec![0.0, 0.0]);
    }

    fn gc_at_task(n: usize, len: usize, seed: u64) -> Vec<LabeledExample> {
        let mut r = rng::from_seed(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let (rich, poor) = if label == 1 { (b"GC", b"AT") } else { (b"AT", b"GC") };
                let sequence = (0..len)
                    .map(|_| {
                        let pool = if r.random_bool(0.8) { rich } else { poor };
                        pool[r.random_range(0..2)] as char
                    })
                    .collect();
                LabeledExample { sequence, label }
            })
            .collect()
    }

    #[test]
    fn gc_versus_at_is_learned_quickly() {
        let train = gc_at_task(64, 36, 1);
        let test = gc_at_task(64, 36, 2);
        let mut c = Classifier::new(Student::<f32>::new(tiny(36), 4).unwrap(), 2, 4).unwrap();
        let cfg = FinetuneConfig {
            steps: 300,
            batch_size: 8,
            ..FinetuneConfig::default()
        };
        let rep = finetune_run(&mut c, &train, &cfg).unwrap();
        assert_eq!(rep.losses.len(), 300);
        let ev = evaluate(&c, &test, Metric::Accuracy, true).unwrap();
        assert!(ev.value >= 0.95, "accuracy {}", ev.value);
    }

    #[test]
    fn finetuning_is_deterministic_and_head_only_freezes_the_encoder() {
        let train = gc_at_task(16, 24, 3);
        let cfg = FinetuneConfig {
            steps: 5,
            batch_size: 4,
            ..FinetuneConfig::default()
        };
        let run = |cfg: &FinetuneConfig| {
            let mut c = Classifier::new(Student::<f32>::new(tiny(24), 5).unwrap(), 2, 5).unwrap();
            finetune_run(&mut c, &train, cfg).unwrap();
            c
        };
        assert_eq!(run(&cfg), run(&cfg));
        let base = Classifier::new(Student::<f32>::new(tiny(24), 5).unwrap(), 2, 5).unwrap();
        let head = run(&FinetuneConfig { head_only: true, ..cfg.clone() });
        for (id, p) in base.store().iter() {
            let same = head.store().get(id) == &p.value;
            assert_eq!(same, !p.name.starts_with("cls."), "{}", p.name);
        }
        let mut bad = vec![LabeledExample { sequence: "ACGTAC".into(), label: 2 }];
        let mut c = base.clone();
        assert!(finetune_run(&mut c, &bad, &cfg).is_err());
        bad.clear();
        assert!(matches!(finetune_run(&mut c, &bad, &cfg), Err(HadError::EmptyInput)));
    }

    #[test]
    fn embedding_file_round_trip() {
        let c = Classifier::new(Student::<f32>::new(tiny(24), 6).unwrap(), 2, 6).unwrap();
        let ex = gc_at_task(5, 20, 4);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.hade"), dir.path().join("b.hade"));
        assert_eq!(export_embeddings(&c, &ex, &a).unwrap(), 5);
        export_embeddings(&c, &ex, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let (d, rows) = load_embeddings(&a).unwrap();
        assert_eq!((d, rows.len()), (8, 5));
        for (e, (label, v)) in ex.iter().zip(&rows) {
            assert_eq!(*label as usize, e.label);
            assert_eq!(v, &c.embedding(&e.sequence).unwrap());
        }
        let empty = dir.path().join("e.hade");
        export_embeddings(&c, &[], &empty).unwrap();
        assert_eq!(load_embeddings(&empty).unwrap().1.len(), 0);
        assert!(read_embeddings(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
    }

    #[test]
    fn csv_reading() {
        let ok = "sequence,label\nACGT,1\nggcc,0\n";
        let ex = read_labeled(ok.as_bytes()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1], LabeledExample { sequence: "GGCC".into(), label: 0 });
        assert_eq!(infer_n_classes(&ex), 2);
        assert!(read_labeled("seq,label\nA,0\n".as_bytes()).is_err());
        assert!(read_labeled("sequence,label\nAXGT,0\n".as_bytes()).is_err());
        assert!(read_labeled("sequence,label\nACGT,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn pad_masked_pool_ignores_padding() {
        let mut c = Classifier::new(Student::<f32>::new(tiny(24), 7).unwrap(), 2, 7).unwrap();
        c.pad_masked_pool = true;
        let (ids, real) = c.prepare("ACGTACGT").unwrap();
        let mut g = Graph::frozen();
        let p = c.pooled(&mut g, &ids, real).unwrap();
        let z = c.student.encode_sequence(&mut g, &ids).unwrap();
        let zt = g.value(z).clone();
        let d = c.student.cfg.d_model;
        for j in 0..d {
            let want: f32 = (0..real).map(|i| zt.at2(i, j)).sum::<f32>() / real as f32;
            assert!((g.value(p).data()[j] - want).abs() < 1e-5);
        }
    }
}
