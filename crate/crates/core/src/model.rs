//! The hybrid student: character embeddings with positional encodings,
//! bidirectional GDN blocks, one self-attention layer and a gated MLP,
//! followed by three heads (teacher projection, cross-attention decoder,
//! LM head).
//!
//! All blocks are pre-norm residual: `x += f(LN(x))`. The encoder ends with
//! a final layer norm.

use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::gdn::{bidirectional_gdn, GdnCellParams, ScanMode};
use crate::layers::{sinusoidal_encoding, FeedForward, GatedMlp, LayerNorm, Linear, MultiHeadAttention};
use crate::masking::MaskPlan;
use crate::numeric::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::rng::{self, Rng};
use crate::tokenizers::CHAR_VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub k: usize,
    pub d_t: usize,
    pub max_len: usize,
    pub mlp_hidden: usize,
    pub decoder_ff_mult: usize,
    pub chunk: usize,
    pub positional: Positional,
    /// Driven by `ablation.use_attention` in run configs.
    #[serde(skip)]
    pub use_attention: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            n_blocks: 4,
            d_model: 128,
            d_k: 128,
            d_v: 128,
            n_heads: 4,
            k: 6,
            d_t: 1024,
            max_len: 1026,
            mlp_hidden: 512,
            decoder_ff_mult: 4,
            chunk: 64,
            positional: Positional::Sinusoidal,
            use_attention: true,
        }
    }
}

impl StudentConfig {
    /// The reduced configuration used by gradient checks.
    pub fn scaled(d: usize, n_blocks: usize, max_len: usize, k: usize, d_t: usize) -> Self {
        StudentConfig {
            n_blocks,
            d_model: d,
            d_k: d,
            d_v: d,
            n_heads: 2.min(d),
            k,
            d_t,
            max_len,
            mlp_hidden: 4 * d,
            decoder_ff_mult: 4,
            chunk: 8,
            ..StudentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_heads", self.n_heads),
            ("k", self.k),
            ("d_t", self.d_t),
            ("max_len", self.max_len),
            ("mlp_hidden", self.mlp_hidden),
            ("decoder_ff_mult", self.decoder_ff_mult),
            ("chunk", self.chunk),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(HadError::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(HadError::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len % self.k != 0 {
            return Err(HadError::Config(format!(
                "model.max_len ({}) must be divisible by model.k ({})",
                self.max_len, self.k
            )));
        }
        Ok(())
    }

    pub fn scan_mode(&self) -> ScanMode {
        ScanMode::Chunkwise(self.chunk)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GdnBlock {
    ln: LayerNorm,
    fwd: GdnCellParams,
    rev: GdnCellParams,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    mask_query: ParamId,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
    ln_out: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<GdnBlock>,
    attn: Option<(LayerNorm, MultiHeadAttention)>,
    mlp: (LayerNorm, GatedMlp),
    ln_f: LayerNorm,
    proj: Linear,
    dec: Decoder,
    lm: Linear,
}

impl Layout {
    fn init<F: Scalar>(cfg: &StudentConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let tok = store.add_normal("embed.tok", &[CHAR_VOCAB_SIZE, d], 1.0, rng)?;
        let pos = match cfg.positional {
            Positional::Sinusoidal => None,
            Positional::Learned => Some(store.add_normal("embed.pos", &[cfg.max_len, d], 0.1, rng)?),
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let name = format!("enc.b{b}");
            blocks.push(GdnBlock {
                ln: LayerNorm::init(store, &format!("{name}.ln"), d)?,
                fwd: GdnCellParams::init(store, &format!("{name}.fwd"), d, cfg.d_k, cfg.d_v, rng)?,
                rev: GdnCellParams::init(store, &format!("{name}.rev"), d, cfg.d_k, cfg.d_v, rng)?,
                out: Linear::init(store, &format!("{name}.out"), cfg.d_v, d, false, rng)?,
            });
        }
        let attn = if cfg.use_attention {
            Some((
                LayerNorm::init(store, "enc.attn.ln", d)?,
                MultiHeadAttention::init(store, "enc.attn", d, cfg.n_heads, rng)?,
            ))
        } else {
            None
        };
        let mlp = (
            LayerNorm::init(store, "enc.mlp.ln", d)?,
            GatedMlp::init(store, "enc.mlp", d, cfg.mlp_hidden, rng)?,
        );
        let ln_f = LayerNorm::init(store, "enc.ln_f", d)?;
        let proj = Linear::init(store, "proj", d, cfg.d_t, true, rng)?;
        let dec = Decoder {
            mask_query: store.add_normal("dec.mask_query", &[1, d], 1.0, rng)?,
            ln_q: LayerNorm::init(store, "dec.ln_q", d)?,
            ln_kv: LayerNorm::init(store, "dec.ln_kv", d)?,
            attn: MultiHeadAttention::init(store, "dec.attn", d, cfg.n_heads, rng)?,
            ln_ff: LayerNorm::init(store, "dec.ln_ff", d)?,
            ff: FeedForward::init(store, "dec.ff", d, cfg.decoder_ff_mult * d, rng)?,
            ln_out: LayerNorm::init(store, "dec.ln_out", d)?,
        };
        let lm = Linear::init(store, "lm", d, CHAR_VOCAB_SIZE, true, rng)?;
        Ok(Layout {
            tok,
            pos,
            blocks,
            attn,
            mlp,
            ln_f,
            proj,
            dec,
            lm,
        })
    }
}

/// Visible-token representations and the original positions they hold.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: Var,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student<F: Scalar> {
    pub cfg: StudentConfig,
    pub store: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> Student<F> {
    /// Randomly initialized student; weights come from the "init" stream of
    /// `seed`.
    pub fn new(cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::init(&cfg, &mut store, &mut rng::stream(seed, "init"))?;
        Ok(Student { cfg, store, layout })
    }

    /// A student of shape `cfg` carrying the weights of `store` (every
    /// stored name must exist with a matching shape).
    pub fn from_store(cfg: StudentConfig, store: &ParamStore<F>) -> Result<Self> {
        let mut s = Self::new(cfg, 0)?;
        s.store.load_matching(store)?;
        Ok(s)
    }

    /// The same layout over `store`, which must share this student's
    /// parameter order and shapes (a perturbed copy, for example).
    pub fn with_store(&self, store: ParamStore<F>) -> Self {
        Student {
            cfg: self.cfg.clone(),
            store,
            layout: self.layout.clone(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Student<G> {
        Student {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn positional(&self, g: &mut Graph<F>, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(HadError::PositionOutOfRange {
                pos: p,
                max_len: self.cfg.max_len,
            });
        }
        match self.layout.pos {
            None => Ok(g.constant(sinusoidal_encoding(positions, self.cfg.d_model))),
            Some(id) => {
                let table = g.param(&self.store, id);
                g.gather(table, positions)
            }
        }
    }

    /// Token embedding plus the positional encoding of each token's original
    /// position.
    pub fn embed_with_positions(&self, g: &mut Graph<F>, char_ids: &[u32], positions: &[usize]) -> Result<Var> {
        if char_ids.len() != positions.len() {
            return Err(HadError::shape("embed", &[char_ids.len()], &[positions.len()]));
        }
        if let Some(&bad) = char_ids.iter().find(|&&c| c as usize >= CHAR_VOCAB_SIZE) {
            return Err(HadError::InvalidTokenId(bad));
        }
        let pe = self.positional(g, positions)?;
        let table = g.param(&self.store, self.layout.tok);
        let rows: Vec<usize> = char_ids.iter().map(|&c| c as usize).collect();
        let tok = g.gather(table, &rows)?;
        g.add(tok, pe)
    }

    /// The shared mask query plus each position's encoding.
    pub fn mask_queries(&self, g: &mut Graph<F>, positions: &[usize]) -> Result<Var> {
        let pe = self.positional(g, positions)?;
        let mq = g.param(&self.store, self.layout.dec.mask_query);
        let rows = g.gather(mq, &vec![0; positions.len()])?;
        g.add(rows, pe)
    }

    /// Encoder stack over `(n, d_model)` inputs.
    pub fn encode(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = &self.store;
        let l = &self.layout;
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.cfg.d_model {
            return Err(HadError::shape("encode", g.shape(x), &[0, self.cfg.d_model]));
        }
        if g.shape(x)[0] == 0 {
            return Err(HadError::NoVisibleTokens);
        }
        let mode = self.cfg.scan_mode();
        let mut h = x;
        for b in &l.blocks {
            let n = b.ln.forward(g, s, h)?;
            let z = bidirectional_gdn(g, s, n, &b.fwd, &b.rev, mode)?;
            let z = b.out.forward(g, s, z)?;
            h = g.add(h, z)?;
        }
        if let Some((ln, attn)) = &l.attn {
            let n = ln.forward(g, s, h)?;
            let a = attn.forward(g, s, n, n)?;
            h = g.add(h, a)?;
        }
        let n = l.mlp.0.forward(g, s, h)?;
        let m = l.mlp.1.forward(g, s, n)?;
        h = g.add(h, m)?;
        l.ln_f.forward(g, s, h)
    }

    /// Encodes only the visible characters of `char_ids`, each at its
    /// original position. Masked characters never enter the graph.
    pub fn encode_visible(&self, g: &mut Graph<F>, char_ids: &[u32], plan: &MaskPlan) -> Result<EncoderOutput> {
        if char_ids.len() != plan.len {
            return Err(HadError::shape("encode_visible", &[char_ids.len()], &[plan.len]));
        }
        if plan.visible_char.is_empty() {
            return Err(HadError::NoVisibleTokens);
        }
        let ids: Vec<u32> = plan.visible_char.iter().map(|&p| char_ids[p]).collect();
        let x = self.embed_with_positions(g, &ids, &plan.visible_char)?;
        let z = self.encode(g, x)?;
        Ok(EncoderOutput {
            z,
            positions: plan.visible_char.clone(),
        })
    }

    /// Single-stream encoding of the whole sequence, with masked positions
    /// replaced by mask queries.
    pub fn encode_with_mask_tokens(&self, g: &mut Graph<F>, char_ids: &[u32], plan: &MaskPlan) -> Result<Var> {
        if char_ids.len() != plan.len {
            return Err(HadError::shape("encode_with_mask_tokens", &[char_ids.len()], &[plan.len]));
        }
        if let Some(&bad) = char_ids.iter().find(|&&c| c as usize >= CHAR_VOCAB_SIZE) {
            return Err(HadError::InvalidTokenId(bad));
        }
        let mask_row = CHAR_VOCAB_SIZE;
        let mut rows: Vec<usize> = char_ids.iter().map(|&c| c as usize).collect();
        for &p in &plan.masked_char {
            rows[p] = mask_row;
        }
        let tok = g.param(&self.store, self.layout.tok);
        let mq = g.param(&self.store, self.layout.dec.mask_query);
        let table = g.concat(&[tok, mq], 0)?;
        let x = g.gather(table, &rows)?;
        let positions: Vec<usize> = (0..plan.len).collect();
        let pe = self.positional(g, &positions)?;
        let x = g.add(x, pe)?;
        self.encode(g, x)
    }

    /// Encodes a fully visible sequence.
    pub fn encode_sequence(&self, g: &mut Graph<F>, char_ids: &[u32]) -> Result<Var> {
        let positions: Vec<usize> = (0..char_ids.len()).collect();
        let x = self.embed_with_positions(g, char_ids, &positions)?;
        self.encode(g, x)
    }

    /// Mean over the k rows of each visible k-mer group, ascending by k-mer
    /// index.
    pub fn pool_to_kmer(&self, g: &mut Graph<F>, enc: &EncoderOutput, plan: &MaskPlan) -> Result<Var> {
        pool_groups(g, enc, &plan.visible_kmer, plan.k)
    }

    pub fn project_to_teacher(&self, g: &mut Graph<F>, pooled: Var) -> Result<Var> {
        self.layout.proj.forward(g, &self.store, pooled)
    }

    /// Cross-attention decoder: mask queries at `masked_positions` attend over
    /// the visible representations `z_v`.
    pub fn cross_attention_decode(&self, g: &mut Graph<F>, masked_positions: &[usize], z_v: Var) -> Result<Var> {
        let s = &self.store;
        let d = &self.layout.dec;
        if g.shape(z_v)[0] == 0 {
            return Err(HadError::NoVisibleTokens);
        }
        let q = self.mask_queries(g, masked_positions)?;
        let qn = d.ln_q.forward(g, s, q)?;
        let kv = d.ln_kv.forward(g, s, z_v)?;
        let a = d.attn.forward(g, s, qn, kv)?;
        let h = g.add(q, a)?;
        let n = d.ln_ff.forward(g, s, h)?;
        let f = d.ff.forward(g, s, n)?;
        let h = g.add(h, f)?;
        d.ln_out.forward(g, s, h)
    }

    pub fn lm_head(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        self.layout.lm.forward(g, &self.store, z)
    }

    /// Parameters of the encoder stack (embeddings through the final norm).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("embed.") || p.name.starts_with("enc."))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Means over consecutive groups of `k` rows of `enc.z`, one per entry of
/// `groups`; the rows of group `j` must hold positions `j·k .. j·k + k`.
pub fn pool_groups<F: Scalar>(g: &mut Graph<F>, enc: &EncoderOutput, groups: &[usize], k: usize) -> Result<Var> {
    let d = g.shape(enc.z)[1];
    if enc.positions.len() != groups.len() * k || g.shape(enc.z)[0] != enc.positions.len() {
        return Err(HadError::IncompleteGroup {
            group: groups.first().copied().unwrap_or(0),
        });
    }
    for (i, &j) in groups.iter().enumerate() {
        let rows = &enc.positions[i * k..(i + 1) * k];
        if rows.iter().enumerate().any(|(o, &p)| p != j * k + o) {
            return Err(HadError::IncompleteGroup { group: j });
        }
    }
    let r = g.reshape(enc.z, &[groups.len(), k, d])?;
    g.mean(r, 1)
}
