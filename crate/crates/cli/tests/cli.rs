mod common;

use std::fs;
use std::path::{Path, PathBuf};

use had_core::finetune_eval::load_embeddings;
use had_core::genome_io::reverse_complement;
use had_core::numeric::ParamStore;
use had_core::teacher::{read_cache, SyntheticTeacher, Teacher, TeacherConfig};
use had_core::tokenizers::TokenizedSequence;

use common::*;

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(steps: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fasta = dir.path().join("genome.fa");
        write_fasta(&fasta, &[("chr1", &markov_dna(1800, 1)), ("chr2", &random_dna(700, 2))]);
        let config = dir.path().join("config.json");
        write_config(&config, &small_config(dir.path(), &[fasta], steps));
        Fixture { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, extra: &[&str]) -> std::process::Output {
        run(had().arg("pretrain").arg("--config").arg(&self.config).args(extra))
    }
}

/// Class 1 is GC-rich, class 0 AT-rich.
fn gc_rows(n: usize, len: usize, seed: u64) -> Vec<(String, usize)> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let pool: &[u8] = if label == 1 { b"GGGCCCA" } else { b"AAATTTG" };
            let raw = random_dna(len, seed * 1000 + i as u64);
            let seq = raw.bytes().map(|b| pool[(b as usize) % pool.len()] as char).collect();
            (seq, label)
        })
        .collect()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn pretrain_writes_checkpoint_and_logs_with_overrides() {
    let fx = Fixture::new(5);
    let out = fx.pretrain(&["--override", "train.steps=3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(lines(&fx.path("metrics.jsonl")), 3);
    assert!(lines(&fx.path("metrics.val.jsonl")) >= 2);
    let store = ParamStore::<f32>::load(&fx.path("ckpt.hadw")).unwrap();
    assert!(store.by_name("enc.b0.fwd.w_v").is_some());
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(fx.path("metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["step", "loss_rec", "loss_dis", "loss_total", "ppl", "lr"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn missing_fasta_names_the_file_and_exits_one() {
    let fx = Fixture::new(1);
    let out = fx.pretrain(&["--override", "data.fasta=[\"/no/such/genome.fa\"]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/no/such/genome.fa"), "{}", stderr(&out));
}

#[test]
fn invalid_configuration_exits_two() {
    let fx = Fixture::new(1);
    for o in ["train.stepz=3", "model.n_heads=3", "mask.ratio=1.5", "data.window=61"] {
        let out = fx.pretrain(&["--override", o]);
        assert_eq!(out.status.code(), Some(2), "{o}: {}", stderr(&out));
    }
    let out = run(had().args(["pretrain", "--bogus"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn off_mode_and_attention_ablation_run() {
    let fx = Fixture::new(2);
    let out = fx.pretrain(&["--override", "ablation.distill_mode=off", "--override", "ablation.use_attention=false"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rec: serde_json::Value = serde_json::from_str(fs::read_to_string(fx.path("metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(rec["loss_dis"].is_null());
    let store = ParamStore::<f32>::load(&fx.path("ckpt.hadw")).unwrap();
    assert!(store.ids().all(|id| !store.name(id).starts_with("enc.attn")));
}

#[test]
fn finetune_eval_and_export_round_trip() {
    let fx = Fixture::new(2);
    assert!(fx.pretrain(&[]).status.success());
    let (train, test) = (fx.path("train.csv"), fx.path("test.csv"));
    write_csv(&train, &gc_rows(24, 30, 1));
    write_csv(&test, &gc_rows(12, 30, 2));
    let tuned = fx.path("tuned.hadw");
    let out = run(had()
        .arg("finetune")
        .arg("--config")
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(fx.path("ckpt.hadw"))
        .arg("--train")
        .arg(&train)
        .arg("--test")
        .arg(&test)
        .arg("--out")
        .arg(&tuned));
    assert!(out.status.success(), "{}", stderr(&out));
    let rec: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(rec["metric"], "accuracy");
    assert!(rec["value"].as_f64().unwrap() >= 0.9, "{rec}");

    // a model that fits its own training set scores 1.0 on it
    let out = run(had()
        .arg("eval")
        .arg("--config")
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(&tuned)
        .arg("--csv")
        .arg(&train));
    assert!(out.status.success(), "{}", stderr(&out));
    let rec: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(rec["value"].as_f64().unwrap(), 1.0);

    let emb = fx.path("emb.bin");
    let out = run(had()
        .arg("export-embeddings")
        .arg("--config")
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(&tuned)
        .arg("--csv")
        .arg(&test)
        .arg("--out")
        .arg(&emb));
    assert!(out.status.success(), "{}", stderr(&out));
    let (d, rows) = load_embeddings(&emb).unwrap();
    assert_eq!(d, 16);
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[1].0, 1);
}

#[test]
fn eval_debug_reports_the_logits_path() {
    let fx = Fixture::new(1);
    assert!(fx.pretrain(&[]).status.success());
    let csv = fx.path("data.csv");
    write_csv(&csv, &gc_rows(4, 24, 3));
    let tuned = fx.path("tuned.hadw");
    let ft = run(had()
        .args(["finetune", "--override", "finetune.steps=2", "--config"])
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(fx.path("ckpt.hadw"))
        .arg("--train")
        .arg(&csv)
        .arg("--out")
        .arg(&tuned));
    assert!(ft.status.success(), "{}", stderr(&ft));
    let eval = |conjoin: &str| {
        let out = run(had()
            .args(["--debug", "eval", "--override"])
            .arg(format!("finetune.conjoin={conjoin}"))
            .arg("--config")
            .arg(&fx.config)
            .arg("--checkpoint")
            .arg(&tuned)
            .arg("--csv")
            .arg(&csv));
        assert!(out.status.success(), "{}", stderr(&out));
        stderr(&out)
    };
    assert!(eval("true").contains("logits path: conjoined"));
    assert!(eval("false").contains("logits path: forward"));
}

#[test]
fn incompatible_checkpoint_is_an_error() {
    let fx = Fixture::new(1);
    assert!(fx.pretrain(&[]).status.success());
    let csv = fx.path("data.csv");
    write_csv(&csv, &gc_rows(4, 24, 4));
    let out = run(had()
        .args(["finetune", "--override", "model.d_model=32", "--override", "model.d_k=32", "--override", "model.d_v=32", "--config"])
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(fx.path("ckpt.hadw"))
        .arg("--train")
        .arg(&csv)
        .arg("--out")
        .arg(fx.path("x.hadw")));
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    // an untuned checkpoint has no head to evaluate
    let out = run(had()
        .arg("eval")
        .arg("--config")
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(fx.path("ckpt.hadw"))
        .arg("--csv")
        .arg(&csv));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_csv_exports_an_empty_file() {
    let fx = Fixture::new(1);
    assert!(fx.pretrain(&[]).status.success());
    let csv = fx.path("empty.csv");
    write_csv(&csv, &[]);
    let emb = fx.path("emb.bin");
    let out = run(had()
        .arg("export-embeddings")
        .arg("--config")
        .arg(&fx.config)
        .arg("--checkpoint")
        .arg(fx.path("ckpt.hadw"))
        .arg("--csv")
        .arg(&csv)
        .arg("--out")
        .arg(&emb));
    assert!(out.status.success(), "{}", stderr(&out));
    let (d, rows) = load_embeddings(&emb).unwrap();
    assert_eq!((d, rows.len()), (16, 0));
}

#[test]
fn teacher_cache_matches_the_live_teacher() {
    let fx = Fixture::new(1);
    let cache = fx.path("teacher.hadt");
    let build = || {
        let out = run(had().arg("teacher-cache").arg("--config").arg(&fx.config).arg("--out").arg(&cache));
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(&cache).unwrap()
    };
    let first = build();
    assert_eq!(first, build());

    let (d_t, entries) = read_cache(&mut first.as_slice()).unwrap();
    assert_eq!(d_t, 16);
    // 1800/60 + 700/60 windows, both strands
    assert_eq!(entries.len(), 2 * (30 + 11));
    let teacher = SyntheticTeacher::new(
        &TeacherConfig {
            d_t: 16,
            depth: 1,
            n_heads: 2,
            ..TeacherConfig::default()
        },
        6,
    )
    .unwrap();
    let genome = markov_dna(1800, 1);
    let fwd = &genome[60..120];
    let (_, cached) = entries.iter().find(|(k, _)| k == "chr1:60:+").unwrap();
    let live = teacher.embed(&TokenizedSequence::new("chr1:60:+", fwd, 6).unwrap()).unwrap();
    assert_eq!(cached, &live.vectors);
    let rc = reverse_complement(fwd).unwrap();
    let (_, cached_rc) = entries.iter().find(|(k, _)| k == "chr1:60:-").unwrap();
    let live_rc = teacher.embed(&TokenizedSequence::new("chr1:60:-", &rc, 6).unwrap()).unwrap();
    assert_eq!(cached_rc, &live_rc.vectors);

    let cfg = fx.path("cached.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fx.config).unwrap()).unwrap();
    doc["teacher"]["kind"] = "cache".into();
    doc["teacher"]["cache_path"] = cache.to_string_lossy().into_owned().into();
    doc["io"]["checkpoint"] = fx.path("cached.hadw").to_string_lossy().into_owned().into();
    write_config(&cfg, &doc);
    let out = run(had().arg("pretrain").arg("--config").arg(&cfg));
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn grad_check_passes_and_fails_on_threshold() {
    let out = run(had().args(["grad-check", "--d", "4", "--len", "12", "--blocks", "1", "--mode", "masked"]));
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("max relative error"));
    let out = run(had().args(["grad-check", "--d", "4", "--len", "12", "--blocks", "1", "--mode", "off", "--threshold", "0"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_emits_one_row_per_configuration() {
    let out = run(had().args(["bench", "--lens", "32,64", "--d", "8", "--chunks", "1,4,16", "--repeats", "1", "--recurrent", "--attention"]));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,L,d,chunk,ns_per_token,tokens_per_sec");
    assert_eq!(rows.len(), 1 + 6 + 2 + 2);
    assert_eq!(rows.iter().filter(|r| r.starts_with("attention,")).count(), 2);
}
