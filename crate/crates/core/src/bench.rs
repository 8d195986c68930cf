//! Throughput microbenchmarks for the GDN scan and for exact attention.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{HadError, Result};
use crate::gdn::{scan_chunkwise, scan_recurrent, scan_sequential, GdnState, ScanData};
use crate::layers::attend;
use crate::numeric::{Graph, Tensor};
use crate::rng;

pub const WARMUPS: usize = 2;
pub const MIN_REPEATS: usize = 5;
/// Agreement required between a timed variant and the sequential scan.
pub const EQUIVALENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub variant: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub d: usize,
    pub chunk: usize,
    pub ns_per_token: f64,
    pub tokens_per_sec: f64,
}

pub const CSV_HEADER: &str = "variant,L,d,chunk,ns_per_token,tokens_per_sec";

pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.3},{:.1}", r.variant, r.len, r.d, r.chunk, r.ns_per_token, r.tokens_per_sec);
    }
    s
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median seconds of `repeats` timed runs after the warmups.
fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(median(times))
}

fn result(variant: &str, len: usize, d: usize, chunk: usize, secs: f64) -> BenchResult {
    BenchResult {
        variant: variant.into(),
        len,
        d,
        chunk,
        ns_per_token: secs * 1e9 / len as f64,
        tokens_per_sec: len as f64 / secs,
    }
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Times the chunkwise scan for every `(L, chunk)` pair in 32-bit floats.
/// Each configuration is first checked against the sequential scan; a
/// disagreement above [`EQUIVALENCE_TOL`] aborts the benchmark.
pub fn bench_gdn(lens: &[usize], d: usize, chunks: &[usize], repeats: usize) -> Result<Vec<BenchResult>> {
    let repeats = repeats.max(MIN_REPEATS);
    let mut out = Vec::with_capacity(lens.len() * chunks.len());
    for &len in lens {
        let data: ScanData<f32> = ScanData::random(len, d, d, &mut rng::indexed_stream(0, "bench", len as u64));
        let s0 = GdnState::zeros(d, d);
        let (reference, _) = scan_sequential(&data, &s0)?;
        for &chunk in chunks {
            let (o, _) = scan_chunkwise(&data, &s0, chunk)?;
            let diff = max_diff(&o, &reference);
            if !(diff <= EQUIVALENCE_TOL) {
                return Err(HadError::Config(format!(
                    "chunkwise scan (L={len}, d={d}, chunk={chunk}) differs from the sequential scan by {diff:e}"
                )));
            }
            let secs = time_median(repeats, || scan_chunkwise(&data, &s0, chunk).map(|_| ()))?;
            out.push(result("chunkwise", len, d, chunk, secs));
        }
    }
    Ok(out)
}

/// The rank-one recurrent scan, for reference (chunk column is 0).
pub fn bench_recurrent(lens: &[usize], d: usize, repeats: usize) -> Result<Vec<BenchResult>> {
    let repeats = repeats.max(MIN_REPEATS);
    lens.iter()
        .map(|&len| {
            let data: ScanData<f32> = ScanData::random(len, d, d, &mut rng::indexed_stream(0, "bench", len as u64));
            let s0 = GdnState::zeros(d, d);
            let (reference, _) = scan_sequential(&data, &s0)?;
            let (o, _) = scan_recurrent(&data, &s0)?;
            let diff = max_diff(&o, &reference);
            if !(diff <= EQUIVALENCE_TOL) {
                return Err(HadError::Config(format!("recurrent scan (L={len}) differs by {diff:e}")));
            }
            let secs = time_median(repeats, || scan_recurrent(&data, &s0).map(|_| ()))?;
            Ok(result("recurrent", len, d, 0, secs))
        })
        .collect()
}

/// Forward-only single-head exact attention over `L` tokens.
pub fn bench_attention(lens: &[usize], d: usize, repeats: usize) -> Result<Vec<BenchResult>> {
    let repeats = repeats.max(MIN_REPEATS);
    lens.iter()
        .map(|&len| {
            let mut r = rng::indexed_stream(0, "bench-attn", len as u64);
            let x: Tensor<f32> = {
                use rand_distr::{Distribution, StandardNormal};
                let v: Vec<f64> = (0..len * d).map(|_| StandardNormal.sample(&mut r)).collect();
                Tensor::from_f64(&[len, d], &v)?
            };
            let secs = time_median(repeats, || {
                let mut g = Graph::<f32>::frozen();
                let xv = g.constant(x.clone());
                attend(&mut g, xv, xv, xv, 1.0 / (d as f64).sqrt())?;
                Ok(())
            })?;
            Ok(result("attention", len, d, 0, secs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_and_csv() {
        let rows = bench_gdn(&[32, 48], 8, &[1, 4, 16], 5).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.ns_per_token > 0.0 && r.tokens_per_sec > 0.0));
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("chunkwise,32,8,1,"));
        assert_eq!(bench_recurrent(&[16], 4, 1).unwrap().len(), 1);
        assert_eq!(bench_attention(&[16, 32], 4, 1).unwrap()[1].len, 32);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
