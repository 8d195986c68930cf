#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use had_core::rng;
use rand::Rng as _;

pub const BASES: &[u8; 4] = b"ACGT";

pub fn had() -> Command {
    Command::new(env!("CARGO_BIN_EXE_had"))
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn had")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn random_dna(len: usize, seed: u64) -> String {
    let mut r = rng::indexed_stream(seed, "test-dna", len as u64);
    (0..len).map(|_| BASES[r.random_range(0..4)] as char).collect()
}

/// An order-2 Markov chain whose transitions favour one base with
/// probability 0.7, so that reconstruction has something to learn.
pub fn markov_dna(len: usize, seed: u64) -> String {
    let mut r = rng::indexed_stream(seed, "test-markov", 0);
    let favoured: Vec<usize> = (0..16).map(|_| r.random_range(0..4)).collect();
    let mut out = vec![0usize, 1];
    while out.len() < len {
        let ctx = out[out.len() - 2] * 4 + out[out.len() - 1];
        let b = if r.random_bool(0.7) { favoured[ctx] } else { r.random_range(0..4) };
        out.push(b);
    }
    out.truncate(len);
    out.into_iter().map(|b| BASES[b] as char).collect()
}

pub fn write_fasta(path: &Path, records: &[(&str, &str)]) {
    let mut s = String::new();
    for (id, seq) in records {
        s.push('>');
        s.push_str(id);
        s.push('\n');
        for line in seq.as_bytes().chunks(60) {
            s.push_str(std::str::from_utf8(line).unwrap());
            s.push('\n');
        }
    }
    fs::write(path, s).unwrap();
}

/// A small run configuration rooted in `dir`: width-16 student on 60-base
/// windows with a matching synthetic teacher.
pub fn small_config(dir: &Path, fasta: &[PathBuf], steps: usize) -> serde_json::Value {
    serde_json::json!({
        "data": { "fasta": fasta, "window": 60, "val_fraction": 0.1 },
        "model": {
            "n_blocks": 1, "d_model": 16, "d_k": 16, "d_v": 16, "n_heads": 2,
            "k": 6, "d_t": 16, "max_len": 60, "mlp_hidden": 32, "chunk": 8
        },
        "teacher": { "d_t": 16, "depth": 1, "n_heads": 2 },
        "train": { "steps": steps, "batch_size": 4, "lr": 0.003, "warmup_steps": 2, "val_every": 2, "val_windows": 4 },
        "finetune": { "steps": 60, "batch_size": 8, "lr": 0.01, "warmup_steps": 2, "metric": "accuracy", "conjoin": false },
        "io": { "checkpoint": dir.join("ckpt.hadw"), "log": dir.join("metrics.jsonl") }
    })
}

pub fn write_config(path: &Path, cfg: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

pub fn write_csv(path: &Path, rows: &[(String, usize)]) {
    let mut s = String::from("sequence,label\n");
    for (seq, label) in rows {
        s.push_str(&format!("{seq},{label}\n"));
    }
    fs::write(path, s).unwrap();
}
