//! Python bindings: `import had_py`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use had_core::bench::{bench_gdn as core_bench_gdn, BenchResult};
use had_core::config::RunConfig;
use had_core::finetune_eval::{
    self as fe, evaluate as core_evaluate, finetune_run, BinaryCounts, FinetuneConfig, LabeledExample, Metric,
};
use had_core::gdn::{scan_chunkwise, scan_sequential, GdnState, ScanData};
use had_core::model::StudentConfig;
use had_core::numeric::ParamStore;
use had_core::pretrain::{grad_check_objective, pretrain_run as core_pretrain_run, DistillMode, LogRecord, Pretrainer, RunPaths};
use had_core::teacher::build_teacher;
use had_core::{genome_io, masking, tokenizers, HadError};

fn err(e: HadError) -> PyErr {
    match e {
        HadError::Io(_) | HadError::BadFile { .. } => PyOSError::new_err(e.to_string()),
        HadError::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn student_config(json: Option<&str>) -> PyResult<StudentConfig> {
    let cfg = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad student config: {e}")))?,
        None => StudentConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> PyResult<DistillMode> {
    serde_json::from_value(s.into()).map_err(|_| PyValueError::new_err(format!("unknown distill mode {s:?}")))
}

fn parse_metric(s: &str) -> PyResult<Metric> {
    serde_json::from_value(s.into()).map_err(|_| PyValueError::new_err(format!("unknown metric {s:?}")))
}

fn examples(sequences: Vec<String>, labels: Vec<usize>) -> PyResult<Vec<LabeledExample>> {
    if sequences.len() != labels.len() {
        return Err(PyValueError::new_err("sequences and labels differ in length"));
    }
    Ok(sequences
        .into_iter()
        .zip(labels)
        .map(|(sequence, label)| LabeledExample {
            sequence: sequence.to_ascii_uppercase(),
            label,
        })
        .collect())
}

#[pyfunction]
fn reverse_complement(seq: &str) -> PyResult<String> {
    genome_io::reverse_complement(seq).map_err(err)
}

#[pyfunction]
fn encode_char(seq: &str) -> PyResult<Vec<u32>> {
    tokenizers::encode_char(seq).map_err(err)
}

#[pyfunction]
fn encode_kmer(seq: &str, k: usize) -> PyResult<Vec<u32>> {
    tokenizers::encode_kmer(seq, k).map_err(err)
}

/// Masked and visible index lists at unit and character granularity.
#[pyfunction]
#[pyo3(signature = (length, k=6, ratio=0.15, seed=0))]
fn build_mask_plan<'py>(py: Python<'py>, length: usize, k: usize, ratio: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let p = masking::build_mask_plan(length, k, ratio, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("masked_kmer", p.masked_kmer)?;
    d.set_item("visible_kmer", p.visible_kmer)?;
    d.set_item("masked_char", p.masked_char)?;
    d.set_item("visible_char", p.visible_char)?;
    Ok(d)
}

/// Runs the GDN recurrence from a zero state over flattened row-major
/// inputs. `chunk=0` uses the sequential scan. Returns `(outputs, state)`.
#[pyfunction]
#[pyo3(signature = (k, v, q, alpha, beta, d_k, d_v, chunk=0))]
#[allow(clippy::too_many_arguments)]
fn gdn_scan(
    k: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    d_k: usize,
    d_v: usize,
    chunk: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let data = ScanData {
        k,
        v,
        q,
        alpha,
        beta,
        d_k,
        d_v,
    };
    data.validate().map_err(err)?;
    let s0 = GdnState::zeros(d_v, d_k);
    let (o, s) = if chunk == 0 {
        scan_sequential(&data, &s0)
    } else {
        scan_chunkwise(&data, &s0, chunk)
    }
    .map_err(err)?;
    Ok((o, s.data().to_vec()))
}

#[pyfunction]
#[pyo3(name = "mcc")]
fn py_mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    fe::mcc(&BinaryCounts { tp, tn, fp, fn_ })
}

#[pyfunction]
#[pyo3(name = "f1")]
fn py_f1(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    fe::f1(&BinaryCounts { tp, tn, fp, fn_ })
}

#[pyfunction]
#[pyo3(name = "accuracy")]
fn py_accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    fe::accuracy(&predictions, &labels).map_err(err)
}

/// Finite-difference check of the training objective in 64-bit floats.
#[pyfunction]
#[pyo3(signature = (d=8, length=24, k=6, blocks=2, d_t=16, mode="visible", seed=0))]
fn grad_check<'py>(
    py: Python<'py>,
    d: usize,
    length: usize,
    k: usize,
    blocks: usize,
    d_t: usize,
    mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = StudentConfig::scaled(d, blocks, length, k, d_t);
    cfg.validate().map_err(err)?;
    let r = grad_check_objective(&cfg, parse_mode(mode)?, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("max_rel_error", r.max_rel_error)?;
    out.set_item("worst_param", r.worst_param)?;
    out.set_item("worst_index", r.worst_index)?;
    out.set_item("coords", r.coords)?;
    Ok(out)
}

fn bench_row<'py>(py: Python<'py>, r: &BenchResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("variant", &r.variant)?;
    d.set_item("L", r.len)?;
    d.set_item("d", r.d)?;
    d.set_item("chunk", r.chunk)?;
    d.set_item("ns_per_token", r.ns_per_token)?;
    d.set_item("tokens_per_sec", r.tokens_per_sec)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (lens, d=64, chunks=vec![1, 64], repeats=5))]
fn bench_gdn<'py>(py: Python<'py>, lens: Vec<usize>, d: usize, chunks: Vec<usize>, repeats: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = core_bench_gdn(&lens, d, &chunks, repeats).map_err(err)?;
    rows.iter().map(|r| bench_row(py, r)).collect()
}

fn log_row<'py>(py: Python<'py>, r: &LogRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("loss_rec", r.loss_rec)?;
    d.set_item("loss_dis", r.loss_dis)?;
    d.set_item("loss_total", r.loss_total)?;
    d.set_item("ppl", r.ppl)?;
    d.set_item("lr", r.lr)?;
    Ok(d)
}

/// Full pretraining run from a JSON config file, as `had pretrain` does.
/// Returns `{"train": [...], "val": [...]}` metric records.
#[pyfunction]
#[pyo3(signature = (config, overrides=Vec::new()))]
fn pretrain<'py>(py: Python<'py>, config: PathBuf, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config, &overrides).map_err(err)?;
    let (train, val) = cfg.corpus().map_err(err)?;
    let teacher = match cfg.ablation.distill_mode {
        DistillMode::Off => None,
        _ => Some(build_teacher(&cfg.teacher, cfg.model.k).map_err(err)?),
    };
    let student = had_core::model::Student::<f32>::new(cfg.student(), cfg.train.seed).map_err(err)?;
    let mut trainer = Pretrainer::new(student, cfg.pretrain()).map_err(err)?;
    let paths = RunPaths::new(&cfg.io.checkpoint, &cfg.io.log);
    let summary = core_pretrain_run(&mut trainer, teacher.as_deref(), &train, &val, &paths).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("train", summary.train.iter().map(|r| log_row(py, r)).collect::<PyResult<Vec<_>>>()?)?;
    out.set_item("val", summary.val.iter().map(|r| log_row(py, r)).collect::<PyResult<Vec<_>>>()?)?;
    Ok(out)
}

/// A student model in 32-bit floats.
#[pyclass(name = "Student")]
struct PyStudent {
    inner: had_core::model::Student<f32>,
}

#[pymethods]
impl PyStudent {
    /// `config` is a JSON object of student fields; omitted fields take
    /// their defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let inner = had_core::model::Student::new(student_config(config)?, seed).map_err(err)?;
        Ok(PyStudent { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let store = ParamStore::<f32>::load(&path).map_err(err)?;
        let inner = had_core::model::Student::from_store(student_config(config)?, &store).map_err(err)?;
        Ok(PyStudent { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.store.save(&path).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn config(&self) -> String {
        serde_json::to_string(&self.inner.cfg).expect("config serializes")
    }
}

/// Mean-pooled encoder with a linear head.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: fe::Classifier<f32>,
}

#[pymethods]
impl PyClassifier {
    /// Wraps a fresh student, or the encoder weights of `checkpoint`.
    #[new]
    #[pyo3(signature = (n_classes=2, config=None, checkpoint=None, seed=0))]
    fn new(n_classes: usize, config: Option<&str>, checkpoint: Option<PathBuf>, seed: u64) -> PyResult<Self> {
        let cfg = student_config(config)?;
        let inner = match checkpoint {
            Some(p) => {
                let store = ParamStore::<f32>::load(&p).map_err(err)?;
                fe::Classifier::from_store(cfg, n_classes, &store, seed)
            }
            None => had_core::model::Student::new(cfg, seed).and_then(|s| fe::Classifier::new(s, n_classes, seed)),
        }
        .map_err(err)?;
        Ok(PyClassifier { inner })
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    fn logits(&self, seq: &str) -> PyResult<Vec<f32>> {
        self.inner.logits(seq).map_err(err)
    }

    /// Logits averaged over the sequence and its reverse complement.
    fn conjoined_predict(&self, seq: &str) -> PyResult<Vec<f32>> {
        self.inner.conjoined_predict(seq).map_err(err)
    }

    #[pyo3(signature = (seq, conjoin=true))]
    fn predict(&self, seq: &str, conjoin: bool) -> PyResult<usize> {
        Ok(fe::argmax(&self.inner.predict_logits(seq, conjoin).map_err(err)?))
    }

    fn embedding(&self, seq: &str) -> PyResult<Vec<f32>> {
        self.inner.embedding(seq).map_err(err)
    }

    /// Fine-tunes in place; `config` is a JSON object of fine-tuning
    /// fields. Returns the per-step losses.
    #[pyo3(signature = (sequences, labels, config=None))]
    fn finetune(&mut self, sequences: Vec<String>, labels: Vec<usize>, config: Option<&str>) -> PyResult<Vec<f64>> {
        let cfg: FinetuneConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad finetune config: {e}")))?,
            None => FinetuneConfig::default(),
        };
        cfg.validate().map_err(err)?;
        let data = examples(sequences, labels)?;
        Ok(finetune_run(&mut self.inner, &data, &cfg).map_err(err)?.losses)
    }

    #[pyo3(signature = (sequences, labels, metric="mcc", conjoin=true))]
    fn evaluate(&self, sequences: Vec<String>, labels: Vec<usize>, metric: &str, conjoin: bool) -> PyResult<f64> {
        let data = examples(sequences, labels)?;
        Ok(core_evaluate(&self.inner, &data, parse_metric(metric)?, conjoin).map_err(err)?.value)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.store().save(&path).map_err(err)
    }
}

#[pymodule]
pub fn had_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStudent>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(reverse_complement, m)?)?;
    m.add_function(wrap_pyfunction!(encode_char, m)?)?;
    m.add_function(wrap_pyfunction!(encode_kmer, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask_plan, m)?)?;
    m.add_function(wrap_pyfunction!(gdn_scan, m)?)?;
    m.add_function(wrap_pyfunction!(py_mcc, m)?)?;
    m.add_function(wrap_pyfunction!(py_f1, m)?)?;
    m.add_function(wrap_pyfunction!(py_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(bench_gdn, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    Ok(())
}
