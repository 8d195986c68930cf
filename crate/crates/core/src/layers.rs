//! Affine maps, layer norm, multi-head attention and gated feed-forward
//! blocks over row-major `(n, d)` activations.

use crate::error::{HadError, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// `x W (+ b)` with `W` stored `(d_in, d_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?;
        let b = if bias {
            Some(store.add_const(&format!("{name}.b"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn find<F: Scalar>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(Linear {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b")).ok(),
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm over the feature axis with a learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_const(&format!("{name}.gain"), &[d], 1.0)?,
            shift: store.add_const(&format!("{name}.shift"), &[d], 0.0)?,
        })
    }

    pub fn find<F: Scalar>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.id(&format!("{name}.gain"))?,
            shift: store.id(&format!("{name}.shift"))?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, 1, F::of(LN_EPS))?;
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(y, gain)?;
        g.add_row(y, shift)
    }
}

/// `softmax(q kᵀ · scale) v` for one head.
pub fn attend<F: Scalar>(g: &mut Graph<F>, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, F::of(scale));
    let p = g.softmax(logits, 1)?;
    g.matmul(p, v)
}

/// Exact multi-head attention with per-head projections (no biases) and an
/// output map over the concatenated heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub heads: Vec<[ParamId; 3]>,
    pub w_o: ParamId,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(HadError::Config(format!("d_model {d} is not divisible by n_heads {n_heads}")));
        }
        let d_head = d / n_heads;
        let std = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let mut p = |s: &str| store.add_normal(&format!("{name}.h{h}.{s}"), &[d, d_head], std, rng);
            heads.push([p("w_q")?, p("w_k")?, p("w_v")?]);
        }
        let w_o = store.add_normal(&format!("{name}.w_o"), &[d, d], std, rng)?;
        Ok(MultiHeadAttention { heads, w_o, d_head })
    }

    pub fn find<F: Scalar>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        let mut heads = Vec::new();
        while let Ok(q) = store.id(&format!("{name}.h{}.w_q", heads.len())) {
            let h = heads.len();
            heads.push([q, store.id(&format!("{name}.h{h}.w_k"))?, store.id(&format!("{name}.h{h}.w_v"))?]);
        }
        let first = heads.first().ok_or_else(|| HadError::UnknownParameter(format!("{name}.h0.w_q")))?;
        let d_head = store.get(first[0]).shape()[1];
        Ok(MultiHeadAttention {
            w_o: store.id(&format!("{name}.w_o"))?,
            heads,
            d_head,
        })
    }

    /// Queries from `x_q` (n_q × d) attend over `x_kv` (n_kv × d).
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x_q: Var, x_kv: Var) -> Result<Var> {
        if g.shape(x_kv)[0] == 0 {
            return Err(HadError::NoVisibleTokens);
        }
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for &[wq, wk, wv] in &self.heads {
            let wq = g.param(store, wq);
            let wk = g.param(store, wk);
            let wv = g.param(store, wv);
            let q = g.matmul(x_q, wq)?;
            let k = g.matmul(x_kv, wk)?;
            let v = g.matmul(x_kv, wv)?;
            outs.push(attend(g, q, k, v, scale)?);
        }
        let cat = g.concat(&outs, 1)?;
        let w_o = g.param(store, self.w_o);
        g.matmul(cat, w_o)
    }
}

/// `(silu(x W_gate) ⊙ x W_up) W_down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedMlp {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl GatedMlp {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(GatedMlp {
            gate: Linear::init(store, &format!("{name}.gate"), d, hidden, false, rng)?,
            up: Linear::init(store, &format!("{name}.up"), d, hidden, false, rng)?,
            down: Linear::init(store, &format!("{name}.down"), hidden, d, false, rng)?,
        })
    }

    pub fn find<F: Scalar>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(GatedMlp {
            gate: Linear::find(store, &format!("{name}.gate"))?,
            up: Linear::find(store, &format!("{name}.up"))?,
            down: Linear::find(store, &format!("{name}.down"))?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let a = self.gate.forward(g, store, x)?;
        let a = g.silu(a);
        let b = self.up.forward(g, store, x)?;
        let h = g.mul(a, b)?;
        self.down.forward(g, store, h)
    }
}

/// Two-layer feed-forward `silu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::init(store, &format!("{name}.fc1"), d, hidden, true, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, d, true, rng)?,
        })
    }

    pub fn find<F: Scalar>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::find(store, &format!("{name}.fc1"))?,
            fc2: Linear::find(store, &format!("{name}.fc2"))?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Sinusoidal encodings for the given positions:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(·)`.
pub fn sinusoidal_encoding<F: Scalar>(positions: &[usize], d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sinusoid_range_and_distinct_positions() {
        let pe = sinusoidal_encoding::<f64>(&(0..1026).collect::<Vec<_>>(), 128);
        assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_ne!(pe.row(0), pe.row(1));
        assert_eq!(pe.row(0)[0], 0.0);
        assert_eq!(pe.row(0)[1], 1.0);
    }

    #[test]
    fn linear_is_affine() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::from_seed(1);
        let lin = Linear::init(&mut store, "p", 3, 5, true, &mut r).unwrap();
        store.get_mut(lin.b.unwrap()).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.0]);
        let a = Tensor::from_f64(&[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let b = Tensor::from_f64(&[2, 3], &[-0.3, 1.0, 2.0, 4.0, -2.0, 0.1]).unwrap();
        let ab = Tensor::from_f64(&[2, 3], &[0.7, 3.0, 1.0, 4.5, -2.0, 3.1]).unwrap();
        let mut g = Graph::new();
        let run = |g: &mut Graph<f64>, t: &Tensor<f64>| {
            let x = g.constant(t.clone());
            let y = lin.forward(g, &store, x).unwrap();
            g.value(y).clone()
        };
        let fa = run(&mut g, &a);
        let fb = run(&mut g, &b);
        let fab = run(&mut g, &ab);
        let f0 = run(&mut g, &Tensor::zeros(&[2, 3]));
        for i in 0..10 {
            let lhs = fab.data()[i];
            let rhs = fa.data()[i] + fb.data()[i] - f0.data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_and_uniform_attention() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.0, -4.0, 2.0, 0.3, 0.3]).unwrap());
        let k = g.constant(Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[1, 2], &[7.0, -3.0]).unwrap());
        let o = attend(&mut g, q, k, v, 0.7).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(o).row(i), &[7.0, -3.0]);
        }

        // a query orthogonal to the key difference sees equal logits
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[2, 2], &[1.0, -1.0, -1.0, 1.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 4.0, 6.0, -2.0]).unwrap());
        let o = attend(&mut g, q, k, v, 1.0).unwrap();
        assert_eq!(g.value(o).row(0), &[4.0, 1.0]);
    }

    #[test]
    fn attention_rejects_empty_memory() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::from_seed(2);
        let mha = MultiHeadAttention::init(&mut store, "a", 4, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let kv = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(mha.forward(&mut g, &store, q, kv), Err(HadError::NoVisibleTokens)));
        assert!(MultiHeadAttention::init(&mut store, "b", 5, 2, &mut r).is_err());
        assert_eq!(MultiHeadAttention::find(&store, "a").unwrap(), mha);
    }
}
