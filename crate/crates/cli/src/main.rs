//! `had`: pretraining, fine-tuning, evaluation and diagnostics for hybrid
//! GDN/attention DNA models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use had_core::bench::{bench_attention, bench_gdn, bench_recurrent, to_csv};
use had_core::config::RunConfig;
use had_core::finetune_eval::{
    evaluate, export_embeddings, finetune_run, infer_n_classes, read_labeled_csv, Classifier, MetricRecord,
};
use had_core::model::{Student, StudentConfig};
use had_core::numeric::ParamStore;
use had_core::optim::worker_threads;
use had_core::pretrain::{grad_check_objective, pretrain_run, DistillMode, Pretrainer, RunPaths};
use had_core::teacher::{build_teacher, build_teacher_cache, SyntheticTeacher, TeacherKind};
use had_core::HadError;

#[derive(Parser)]
#[command(name = "had", version, about = "Hybrid GDN/attention DNA model distillation")]
struct Cli {
    /// Print extra diagnostics to standard error.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `train.steps=10`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> had_core::Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a student on the configured FASTA corpus.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a pretrained checkpoint on a labeled CSV.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training CSV with header `sequence,label`.
        #[arg(long)]
        train: PathBuf,
        /// Held-out CSV scored after training (defaults to the training set).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Where to write the fine-tuned checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint on a labeled CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Write mean-pooled encoder embeddings of a labeled CSV.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute synthetic-teacher embeddings for every corpus window and
    /// its reverse complement.
    TeacherCache {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output path (defaults to `teacher.cache_path`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective in 64-bit floats.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 24)]
        len: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 16)]
        d_t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Time the GDN scan (and optionally attention) and print CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1024, 4096])]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 64])]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Add rows for the rank-one recurrent scan.
        #[arg(long)]
        recurrent: bool,
        /// Add rows for exact attention over the same lengths.
        #[arg(long)]
        attention: bool,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    All,
    Visible,
    Masked,
    Off,
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_store(path: &Path) -> anyhow::Result<ParamStore<f32>> {
    ParamStore::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Class count recorded in a fine-tuned checkpoint's head.
fn head_classes(store: &ParamStore<f32>) -> Option<usize> {
    store.by_name("cls.b").map(|b| b.len())
}

fn print_metric(cfg: &RunConfig, value: f64) -> anyhow::Result<()> {
    let rec = MetricRecord {
        task: cfg.finetune.task.clone(),
        metric: cfg.finetune.metric.name().into(),
        value,
        seed: cfg.finetune.seed,
    };
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn pretrain(cfg: &RunConfig, debug: bool) -> anyhow::Result<()> {
    let (train, val) = cfg.corpus()?;
    let mode = cfg.ablation.distill_mode;
    let teacher = if mode == DistillMode::Off {
        None
    } else {
        Some(build_teacher(&cfg.teacher, cfg.model.k)?)
    };
    let student = Student::<f32>::new(cfg.student(), cfg.train.seed)?;
    if debug {
        eprintln!(
            "pretrain: {} train / {} val windows, {} parameters, {} threads",
            train.len(),
            val.len(),
            student.num_params(),
            worker_threads()
        );
    }
    let mut trainer = Pretrainer::new(student, cfg.pretrain())?;
    let paths = RunPaths::new(&cfg.io.checkpoint, &cfg.io.log);
    ensure_parent(&paths.checkpoint)?;
    ensure_parent(&paths.log)?;
    let summary = pretrain_run(&mut trainer, teacher.as_deref(), &train, &val, &paths)?;
    if let Some(last) = summary.val.last() {
        eprintln!(
            "step {}: val loss_rec {:.4} (ppl {:.3}), loss_dis {}",
            last.step,
            last.loss_rec,
            last.ppl,
            last.loss_dis.map_or("-".into(), |d| format!("{d:.4}"))
        );
    }
    eprintln!("checkpoint written to {}", paths.checkpoint.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, checkpoint: &Path, train_csv: &Path, test_csv: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let train = read_labeled_csv(train_csv).with_context(|| format!("reading {}", train_csv.display()))?;
    let n_classes = match cfg.finetune.n_classes {
        0 => infer_n_classes(&train),
        n => n,
    };
    let store = load_store(checkpoint)?;
    let mut clf = Classifier::from_store(cfg.student(), n_classes, &store, cfg.finetune.seed)?;
    finetune_run(&mut clf, &train, &cfg.finetune)?;
    ensure_parent(out)?;
    clf.store().save(out)?;
    let test = match test_csv {
        Some(p) => read_labeled_csv(p).with_context(|| format!("reading {}", p.display()))?,
        None => train,
    };
    let ev = evaluate(&clf, &test, cfg.finetune.metric, cfg.finetune.conjoin)?;
    print_metric(cfg, ev.value)
}

fn classifier_for(cfg: &RunConfig, store: &ParamStore<f32>) -> anyhow::Result<Classifier<f32>> {
    let n = head_classes(store).unwrap_or(2);
    let mut clf = Classifier::from_store(cfg.student(), n, store, cfg.finetune.seed)?;
    clf.pad_masked_pool = cfg.finetune.pad_masked_pool;
    Ok(clf)
}

fn eval(cfg: &RunConfig, checkpoint: &Path, csv: &Path, debug: bool) -> anyhow::Result<()> {
    let store = load_store(checkpoint)?;
    if head_classes(&store).is_none() {
        bail!("{} has no classification head; fine-tune it first", checkpoint.display());
    }
    let clf = classifier_for(cfg, &store)?;
    let data = read_labeled_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    let conjoin = cfg.finetune.conjoin;
    let ev = evaluate(&clf, &data, cfg.finetune.metric, conjoin)?;
    if debug {
        let path = if conjoin {
            "conjoined: (logits(x) + logits(revcomp(x))) / 2"
        } else {
            "forward: logits(x)"
        };
        eprintln!("logits path: {path}");
        for (i, l) in ev.logits.iter().enumerate() {
            eprintln!("example {i}: logits {l:?} -> {}", ev.predictions[i]);
        }
    }
    print_metric(cfg, ev.value)
}

fn export(cfg: &RunConfig, checkpoint: &Path, csv: &Path, out: &Path) -> anyhow::Result<()> {
    let store = load_store(checkpoint)?;
    let clf = classifier_for(cfg, &store)?;
    let data = read_labeled_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    ensure_parent(out)?;
    let n = export_embeddings(&clf, &data, out)?;
    eprintln!("wrote {n} embeddings to {}", out.display());
    Ok(())
}

fn teacher_cache(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.teacher.cache_path.clone())
        .ok_or_else(|| anyhow!("no output path: pass --out or set teacher.cache_path"))?;
    let mut tcfg = cfg.teacher.clone();
    tcfg.kind = TeacherKind::Synthetic;
    let teacher = SyntheticTeacher::new(&tcfg, cfg.model.k)?;
    let windows = cfg.windows()?;
    ensure_parent(&out)?;
    let n = build_teacher_cache(&windows, &teacher, cfg.model.k, &out)?;
    eprintln!("cached {n} entries in {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn grad_check(d: usize, len: usize, k: usize, blocks: usize, d_t: usize, seed: u64, mode: ModeArg, threshold: f64) -> anyhow::Result<bool> {
    let cfg = StudentConfig::scaled(d, blocks, len, k, d_t);
    cfg.validate()?;
    let modes: &[DistillMode] = match mode {
        ModeArg::All => &[DistillMode::Visible, DistillMode::Masked, DistillMode::Off],
        ModeArg::Visible => &[DistillMode::Visible],
        ModeArg::Masked => &[DistillMode::Masked],
        ModeArg::Off => &[DistillMode::Off],
    };
    let mut worst: f64 = 0.0;
    for &m in modes {
        let r = grad_check_objective(&cfg, m, seed)?;
        println!(
            "{:<8} max relative error {:.3e} at {}[{}] over {} coordinates",
            format!("{m:?}").to_lowercase(),
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.coords
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (threshold {threshold:e})");
    Ok(worst <= threshold)
}

#[allow(clippy::too_many_arguments)]
fn bench(lens: &[usize], d: usize, chunks: &[usize], repeats: usize, recurrent: bool, attention: bool, out: Option<&Path>) -> anyhow::Result<()> {
    eprintln!("bench: single-threaded scans (HAD_THREADS={})", worker_threads());
    let mut rows = bench_gdn(lens, d, chunks, repeats)?;
    if recurrent {
        rows.extend(bench_recurrent(lens, d, repeats)?);
    }
    if attention {
        rows.extend(bench_attention(lens, d, repeats)?);
    }
    let csv = to_csv(&rows);
    match out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, csv)?;
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let debug = cli.debug;
    match cli.cmd {
        Cmd::Pretrain { cfg } => pretrain(&cfg.load()?, debug)?,
        Cmd::Finetune {
            cfg,
            checkpoint,
            train,
            test,
            out,
        } => finetune(&cfg.load()?, &checkpoint, &train, test.as_deref(), &out)?,
        Cmd::Eval { cfg, checkpoint, csv } => eval(&cfg.load()?, &checkpoint, &csv, debug)?,
        Cmd::ExportEmbeddings {
            cfg,
            checkpoint,
            csv,
            out,
        } => export(&cfg.load()?, &checkpoint, &csv, &out)?,
        Cmd::TeacherCache { cfg, out } => teacher_cache(&cfg.load()?, out.as_deref())?,
        Cmd::GradCheck {
            d,
            len,
            k,
            blocks,
            d_t,
            seed,
            mode,
            threshold,
        } => {
            if !grad_check(d, len, k, blocks, d_t, seed, mode, threshold)? {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Bench {
            lens,
            d,
            chunks,
            repeats,
            recurrent,
            attention,
            out,
        } => bench(&lens, d, &chunks, repeats, recurrent, attention, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let debug = cli.debug;
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            if debug {
                eprintln!("error: {e:?}");
            } else {
                eprintln!("error: {e:#}");
            }
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<HadError>(), Some(HadError::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
