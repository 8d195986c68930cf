//! Teachers producing one `d_T`-wide vector per k-mer token.
//!
//! Two backends: a frozen, randomly initialized transformer over k-mer ids
//! ([`SyntheticTeacher`]) and precomputed vectors looked up by window key
//! ([`CacheTeacher`]). The cache format (little-endian) is: magic `HADT`,
//! version u32, d_T u32, count u64, then per entry: key length u32, UTF-8
//! key, n_tokens u32, f32 data `n_tokens × d_T` row-major.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::genome_io::Window;
use crate::layers::{sinusoidal_encoding, FeedForward, LayerNorm, MultiHeadAttention};
use crate::masking::MaskPlan;
use crate::numeric::params::{read_u32, read_u64};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor};
use crate::rng;
use crate::tokenizers::{KmerVocab, TokenizedSequence};

const MAGIC: &[u8; 4] = b"HADT";
const VERSION: u32 = 1;

/// Per-k-mer teacher vectors for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbedding {
    pub seq_key: String,
    pub vectors: Tensor<f32>,
}

pub trait Teacher: Send + Sync {
    fn d_t(&self) -> usize;

    /// Embeds the full, unmasked sequence; one row per k-mer.
    fn embed(&self, seq: &TokenizedSequence) -> Result<TeacherEmbedding>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Synthetic,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub d_t: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    /// Keep computed embeddings in memory, keyed by window key.
    pub memoize: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Synthetic,
            d_t: 1024,
            depth: 2,
            n_heads: 4,
            ff_mult: 1,
            seed: 1234,
            cache_path: None,
            memoize: true,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 {
            return Err(HadError::Config("teacher.d_t must be positive".into()));
        }
        match self.kind {
            TeacherKind::Synthetic => {
                if self.n_heads == 0 || self.d_t % self.n_heads != 0 || self.depth == 0 || self.ff_mult == 0 {
                    return Err(HadError::Config(
                        "teacher.depth, teacher.ff_mult must be positive and teacher.d_t divisible by teacher.n_heads"
                            .into(),
                    ));
                }
            }
            TeacherKind::Cache => {
                if self.cache_path.is_none() {
                    return Err(HadError::Config("teacher.cache_path is required for a cache teacher".into()));
                }
            }
        }
        Ok(())
    }
}

struct TeacherLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// A fixed-seed transformer encoder over k-mer ids, evaluated without
/// gradients: token embedding + sinusoidal encoding, `depth` pre-norm
/// layers of self-attention and feed-forward, final layer norm.
pub struct SyntheticTeacher {
    store: ParamStore<f32>,
    tok: ParamId,
    layers: Vec<TeacherLayer>,
    ln_f: LayerNorm,
    k: usize,
    d_t: usize,
}

impl SyntheticTeacher {
    pub fn new(cfg: &TeacherConfig, k: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_t;
        let mut r = rng::stream(cfg.seed, "teacher");
        let mut store = ParamStore::new();
        let vocab = KmerVocab::new(k).size();
        let tok = store.add_normal("tok", &[vocab, d], 1.0, &mut r)?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            layers.push(TeacherLayer {
                ln_attn: LayerNorm::init(&mut store, &format!("l{l}.ln_attn"), d)?,
                attn: MultiHeadAttention::init(&mut store, &format!("l{l}.attn"), d, cfg.n_heads, &mut r)?,
                ln_ff: LayerNorm::init(&mut store, &format!("l{l}.ln_ff"), d)?,
                ff: FeedForward::init(&mut store, &format!("l{l}.ff"), d, cfg.ff_mult * d, &mut r)?,
            });
        }
        let ln_f = LayerNorm::init(&mut store, "ln_f", d)?;
        Ok(SyntheticTeacher {
            store,
            tok,
            layers,
            ln_f,
            k,
            d_t: d,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }
}

impl Teacher for SyntheticTeacher {
    fn d_t(&self) -> usize {
        self.d_t
    }

    fn embed(&self, seq: &TokenizedSequence) -> Result<TeacherEmbedding> {
        if seq.k != self.k {
            return Err(HadError::dims("teacher k", self.k.to_string(), seq.k.to_string()));
        }
        let n = seq.kmer_ids.len();
        if n == 0 {
            return Err(HadError::EmptyInput);
        }
        let s = &self.store;
        let mut g = Graph::frozen();
        let table = g.param(s, self.tok);
        let rows: Vec<usize> = seq.kmer_ids.iter().map(|&i| i as usize).collect();
        let x = g.gather(table, &rows)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.constant(sinusoidal_encoding(&positions, self.d_t));
        let mut h = g.add(x, pe)?;
        for l in &self.layers {
            let a = l.ln_attn.forward(&mut g, s, h)?;
            let a = l.attn.forward(&mut g, s, a, a)?;
            h = g.add(h, a)?;
            let f = l.ln_ff.forward(&mut g, s, h)?;
            let f = l.ff.forward(&mut g, s, f)?;
            h = g.add(h, f)?;
        }
        let out = self.ln_f.forward(&mut g, s, h)?;
        Ok(TeacherEmbedding {
            seq_key: seq.key.clone(),
            vectors: g.value(out).clone(),
        })
    }
}

/// Precomputed embeddings keyed by window key.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheTeacher {
    d_t: usize,
    entries: HashMap<String, Tensor<f32>>,
}

impl CacheTeacher {
    pub fn new(d_t: usize, entries: HashMap<String, Tensor<f32>>) -> Self {
        CacheTeacher { d_t, entries }
    }

    /// Loads a cache file, checking its width against `expected_d_t`.
    pub fn load(path: &Path, expected_d_t: usize) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let (d_t, entries) = read_cache(&mut bytes.as_slice())?;
        if d_t != expected_d_t {
            return Err(HadError::dims("teacher d_T", expected_d_t.to_string(), d_t.to_string()));
        }
        Ok(CacheTeacher {
            d_t,
            entries: entries.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Teacher for CacheTeacher {
    fn d_t(&self) -> usize {
        self.d_t
    }

    fn embed(&self, seq: &TokenizedSequence) -> Result<TeacherEmbedding> {
        let v = self
            .entries
            .get(&seq.key)
            .ok_or_else(|| HadError::CacheMiss(seq.key.clone()))?;
        if v.shape()[0] != seq.kmer_ids.len() {
            return Err(HadError::dims(
                format!("cached tokens for {}", seq.key),
                seq.kmer_ids.len().to_string(),
                v.shape()[0].to_string(),
            ));
        }
        Ok(TeacherEmbedding {
            seq_key: seq.key.clone(),
            vectors: v.clone(),
        })
    }
}

/// Remembers the embeddings of an inner teacher by sequence key.
pub struct MemoTeacher<T> {
    inner: T,
    memo: Mutex<HashMap<String, Tensor<f32>>>,
}

impl<T: Teacher> MemoTeacher<T> {
    pub fn new(inner: T) -> Self {
        MemoTeacher {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Teacher> Teacher for MemoTeacher<T> {
    fn d_t(&self) -> usize {
        self.inner.d_t()
    }

    fn embed(&self, seq: &TokenizedSequence) -> Result<TeacherEmbedding> {
        if let Some(v) = self.memo.lock().expect("memo lock").get(&seq.key) {
            return Ok(TeacherEmbedding {
                seq_key: seq.key.clone(),
                vectors: v.clone(),
            });
        }
        let e = self.inner.embed(seq)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(seq.key.clone(), e.vectors.clone());
        Ok(e)
    }
}

/// Builds the teacher described by `cfg` for k-mers of size `k`.
pub fn build_teacher(cfg: &TeacherConfig, k: usize) -> Result<Box<dyn Teacher>> {
    cfg.validate()?;
    let t: Box<dyn Teacher> = match cfg.kind {
        TeacherKind::Synthetic if cfg.memoize => Box::new(MemoTeacher::new(SyntheticTeacher::new(cfg, k)?)),
        TeacherKind::Synthetic => Box::new(SyntheticTeacher::new(cfg, k)?),
        TeacherKind::Cache => Box::new(CacheTeacher::load(
            cfg.cache_path.as_deref().expect("validated"),
            cfg.d_t,
        )?),
    };
    Ok(t)
}

/// Rows of `emb` at `rows` (ascending unit indices).
pub fn select_rows(emb: &TeacherEmbedding, rows: &[usize], n_units: usize) -> Result<Tensor<f32>> {
    let v = &emb.vectors;
    let (n, d) = v.dims2()?;
    if n != n_units {
        return Err(HadError::shape("teacher rows", v.shape(), &[n_units, d]));
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(v.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Teacher rows at the plan's visible k-mers, aligned with the student's
/// pooled visible groups.
pub fn filter_visible(emb: &TeacherEmbedding, plan: &MaskPlan) -> Result<Tensor<f32>> {
    select_rows(emb, &plan.visible_kmer, plan.n_units())
}

pub fn write_cache<'a>(
    w: &mut impl Write,
    d_t: usize,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(d_t as u32).to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (key, t) in entries {
        let (n, d) = t.dims2()?;
        if d != d_t {
            return Err(HadError::dims(format!("cache entry {key}"), d_t.to_string(), d.to_string()));
        }
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a cache, returning its width and entries in file order.
pub fn read_cache(r: &mut impl Read) -> Result<(usize, Vec<(String, Tensor<f32>)>)> {
    let bad = |reason: &str| HadError::BadFile {
        what: "teacher cache",
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let d_t = read_u32(r)? as usize;
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let klen = read_u32(r)? as usize;
        let mut key = vec![0u8; klen];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|_| bad("key is not UTF-8"))?;
        let n = read_u32(r)? as usize;
        let mut raw = vec![0u8; n * d_t * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((key, Tensor::new(vec![n, d_t], data)?));
    }
    Ok((d_t, out))
}

/// Embeds every window of `corpus` and its reverse complement with
/// `teacher` and writes them to `out`.
pub fn build_teacher_cache(corpus: &[Window], teacher: &dyn Teacher, k: usize, out: &Path) -> Result<usize> {
    let mut entries = Vec::with_capacity(corpus.len() * 2);
    for w in corpus {
        for win in [w.clone(), w.reverse_complemented()] {
            let seq = TokenizedSequence::from_window(&win, k)?;
            let e = teacher.embed(&seq)?;
            entries.push((e.seq_key, e.vectors));
        }
    }
    let mut buf = Vec::new();
    write_cache(&mut buf, teacher.d_t(), entries.iter().map(|(k, v)| (k.as_str(), v)))?;
    fs::write(out, buf)?;
    Ok(entries.len())
}
