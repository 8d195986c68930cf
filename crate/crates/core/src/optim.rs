//! AdamW with decoupled weight decay, the warmup-cosine schedule, global
//! norm clipping, and deterministic data-parallel gradient accumulation.

use std::f64::consts::PI;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{Graph, ParamStore, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to
/// `min_ratio · base` at `total` steps. `step` counts from 0.
pub fn lr_at(base: f64, step: usize, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let min = base * min_ratio;
    min + (base - min) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Euclidean norm over all gradient entries.
pub fn global_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub cfg: OptimConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    decay: Vec<bool>,
    trainable: Vec<bool>,
}

impl<F: Scalar> AdamW<F> {
    /// Weight decay applies to matrices (rank ≥ 2) only.
    pub fn new(cfg: OptimConfig, store: &ParamStore<F>) -> Self {
        AdamW {
            cfg,
            m: store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect(),
            t: 0,
            decay: store.iter().map(|(_, p)| p.value.rank() >= 2).collect(),
            trainable: vec![true; store.len()],
        }
    }

    /// Restricts updates to parameters with `mask[i] == true`.
    pub fn with_trainable(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.trainable.len(), "trainable mask length");
        self.trainable = mask;
        self
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr` with per-parameter gradients `grads`
    /// (indexed like the store).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = F::of(1.0 - b1.powi(self.t as i32));
        let bc2 = F::of(1.0 - b2.powi(self.t as i32));
        let (b1, b2) = (F::of(b1), F::of(b2));
        let (one, eps, lr_f) = (F::one(), F::of(self.cfg.eps), F::of(lr));
        let wd = F::of(lr * self.cfg.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let decay = self.decay[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                if decay {
                    p[j] -= wd * p[j];
                }
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr_f * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Worker threads for batch evaluation: `HAD_THREADS` if set, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("HAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Maps `f` over `0..n` on up to `threads` scoped workers, each taking a
/// contiguous block; results come back in index order.
pub fn par_map<T, B>(n: usize, threads: usize, f: B) -> Vec<T>
where
    T: Send,
    B: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    thread::scope(|s| {
        for (c, block) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (o, slot) in block.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + o));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every index mapped")).collect()
}

/// Evaluates `f` on samples `0..n` across worker threads and sums the
/// parameter gradients of the returned scalar in sample order, so the
/// result does not depend on the thread count. Returns one gradient vector
/// per parameter (zeros where no gradient flowed) and the per-sample side
/// values.
pub fn accumulate_grads<F, T, B>(store: &ParamStore<F>, n: usize, threads: usize, f: B) -> Result<(Vec<Vec<F>>, Vec<T>)>
where
    F: Scalar,
    T: Send,
    B: Fn(usize, &mut Graph<F>) -> Result<(Var, T)> + Sync,
{
    let results = par_map(n, threads, |i| -> Result<(Vec<(usize, Vec<F>)>, T)> {
        let mut g = Graph::new();
        let (loss, side) = f(i, &mut g)?;
        let grads = g.backward(loss)?;
        let per = grads
            .params()
            .into_iter()
            .map(|(id, gr)| (id.index(), gr.to_vec()))
            .collect();
        Ok((per, side))
    });
    let mut total: Vec<Vec<F>> = store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
    let mut sides = Vec::with_capacity(n);
    for r in results {
        let (per, side) = r?;
        for (idx, gr) in per {
            total[idx].iter_mut().zip(&gr).for_each(|(t, &x)| *t += x);
        }
        sides.push(side);
    }
    Ok((total, sides))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn schedule_shape() {
        assert!((lr_at(1.0, 0, 100, 1000, 0.1) - 0.01).abs() < 1e-12);
        assert!((lr_at(1.0, 99, 100, 1000, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(1.0, 100, 100, 1000, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(1.0, 1000, 100, 1000, 0.1) - 0.1).abs() < 1e-12);
        let mid = lr_at(1.0, 550, 100, 1000, 0.1);
        assert!((mid - 0.55).abs() < 1e-12);
        assert_eq!(lr_at(2.0, 5, 0, 0, 0.0), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut h = vec![vec![0.3f64]];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0][0], 0.3);
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_descends() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap()).unwrap();
        let before = store.clone();
        let mut opt = AdamW::new(OptimConfig::default(), &store);
        let grads = vec![vec![0.5f32; 4], vec![-1.0; 2]];
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store, before);
        opt.step(&mut store, &grads, 0.1);
        assert!(store.get(w).data()[0] < 1.0);
        assert!(store.get(b).data()[0] > 0.1);

        let mut frozen = before.clone();
        let mut opt = AdamW::new(OptimConfig::default(), &frozen).with_trainable(vec![false, true]);
        opt.step(&mut frozen, &grads, 0.1);
        assert_eq!(frozen.get(w), before.get(w));
        assert_ne!(frozen.get(b), before.get(b));
    }

    #[test]
    fn decoupled_decay_skips_vectors() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[1, 1], &[2.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[vec![0.0], vec![0.0]], 0.1);
        assert!((store.get(w).data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(store.get(b).data()[0], 2.0);
    }

    #[test]
    fn accumulation_is_thread_count_invariant() {
        let mut store = ParamStore::<f32>::new();
        let w = store
            .add("w", Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        let f = |i: usize, g: &mut Graph<f32>| {
            let p = g.param(&store, w);
            let c = g.constant(Tensor::from_f64(&[3], &[i as f64 * 0.1, 1.0 / (i as f64 + 1.0), -0.3]).unwrap());
            let m = g.mul(p, c)?;
            let e = g.exp(m);
            Ok((g.sum_all(e), i))
        };
        let (a, sa) = accumulate_grads(&store, 13, 1, f).unwrap();
        let (b, sb) = accumulate_grads(&store, 13, 4, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, (0..13).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }
}
