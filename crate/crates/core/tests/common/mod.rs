//! Brute-force references and random fixtures shared by the integration tests.
#![allow(dead_code)]

use linearize_core::attention::{FeatureKind, FeatureMapParams, HybridAttnConfig, WindowMode};
use linearize_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

pub fn maps(
    rng: &mut impl Rng,
    kind: FeatureKind,
    heads: usize,
    d: usize,
) -> (FeatureMapParams<f64>, FeatureMapParams<f64>) {
    let f = kind.default_feature_dim(d);
    let one = |rng: &mut dyn rand::RngCore| {
        let w = Tensor::from_fn(vec![heads, d, f], |_| rng.random_range(-1.0..1.0));
        let b = kind
            .has_bias()
            .then(|| Tensor::from_fn(vec![heads, f], |_| rng.random_range(0.0..0.5)));
        FeatureMapParams::from_parts(kind, w, b).unwrap()
    };
    (one(rng), one(rng))
}

pub fn hybrid_cfg(
    rng: &mut impl Rng,
    kind: FeatureKind,
    heads: usize,
    d: usize,
    window: usize,
    mode: WindowMode,
) -> HybridAttnConfig<f64> {
    let (fq, fk) = maps(rng, kind, heads, d);
    let mut cfg = HybridAttnConfig::new(window, mode, fq, fk, 10_000.0);
    cfg.gamma_raw = (0..heads).map(|_| rng.random_range(-2.0..3.0)).collect();
    cfg
}

pub fn cast_maps(fm: &FeatureMapParams<f64>) -> FeatureMapParams<f32> {
    FeatureMapParams::from_parts(fm.kind(), fm.weight().cast(), fm.bias().map(|b| b.cast())).unwrap()
}

pub fn cast_cfg(cfg: &HybridAttnConfig<f64>) -> HybridAttnConfig<f32> {
    HybridAttnConfig {
        window_size: cfg.window_size,
        mode: cfg.mode,
        gamma_raw: cfg.gamma_raw.iter().map(|&g| g as f32).collect(),
        fq: cast_maps(&cfg.fq),
        fk: cast_maps(&cfg.fk),
        rope_base: cfg.rope_base,
    }
}

fn row<T: Scalar>(t: &Tensor<T>, bh: usize, i: usize) -> Vec<f64> {
    let [_, _, n, d] = dims(t);
    let at = (bh * n + i) * d;
    t.data()[at..at + d].iter().map(|x| x.as_f64()).collect()
}

pub fn dims<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn phi(fm: &FeatureMapParams<f64>, head: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; fm.output_dim()];
    fm.apply_row(head, x, &mut out);
    out
}

/// Causal softmax attention, evaluated term by term.
pub fn brute_softmax(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let [b, h, n, d] = dims(q);
    let mut out = Vec::with_capacity(b * h * n * d);
    for bh in 0..b * h {
        for i in 0..n {
            let qi = row(q, bh, i);
            let e: Vec<f64> = (0..=i)
                .map(|j| (dot(&qi, &row(k, bh, j)) / (d as f64).sqrt()).exp())
                .collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out.push((0..=i).map(|j| e[j] / z * row(v, bh, j)[c]).sum());
            }
        }
    }
    Tensor::new(vec![b, h, n, d], out).unwrap()
}

/// 1-based window membership written straight from the definition.
pub fn in_window(n: usize, j: usize, w: usize, mode: WindowMode) -> bool {
    match mode {
        WindowMode::Standard => j + w > n && j <= n,
        WindowMode::Terraced => j >= (n - 1) / w * w + 1 && j <= n,
    }
}

/// Hybrid window + linear attention, every sum written out.
pub fn brute_hybrid(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    cfg: &HybridAttnConfig<f64>,
    factors: &[f64],
) -> Tensor<f64> {
    let [b, h, n, d] = dims(q);
    let w = cfg.window_size;
    let mut out = Vec::with_capacity(b * h * n * d);
    for bh in 0..b * h {
        let head = bh % h;
        for i1 in 1..=n {
            let qi = row(q, bh, i1 - 1);
            let pq = phi(&cfg.fq, head, &qi);
            let logits: Vec<(usize, f64)> = (1..=i1)
                .filter(|&j| in_window(i1, j, w, cfg.mode))
                .map(|j| (j, dot(&qi, &row(k, bh, j - 1)) / (d as f64).sqrt()))
                .collect();
            let c = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for &(j, l) in &logits {
                let a = factors[head] * (l - c).exp();
                den += a;
                for (nc, vc) in num.iter_mut().zip(row(v, bh, j - 1)) {
                    *nc += a * vc;
                }
            }
            for j in (1..=i1).filter(|&j| !in_window(i1, j, w, cfg.mode)) {
                let a = dot(&pq, &phi(&cfg.fk, head, &row(k, bh, j - 1)));
                den += a;
                for (nc, vc) in num.iter_mut().zip(row(v, bh, j - 1)) {
                    *nc += a * vc;
                }
            }
            out.extend(num.iter().map(|x| x / (den + EPS)));
        }
    }
    Tensor::new(vec![b, h, n, d], out).unwrap()
}

/// Linear attention through the `(φq · Σ φk vᵀ) / (φq · Σ φk)` form.
pub fn brute_linear_right(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    fq: &FeatureMapParams<f64>,
    fk: &FeatureMapParams<f64>,
) -> Tensor<f64> {
    let [b, h, n, d] = dims(q);
    let f = fk.output_dim();
    let mut out = Vec::new();
    for bh in 0..b * h {
        let head = bh % h;
        for i in 0..n {
            let mut s = vec![vec![0.0; d]; f];
            let mut z = vec![0.0; f];
            for j in 0..=i {
                let pk = phi(fk, head, &row(k, bh, j));
                let vj = row(v, bh, j);
                for r in 0..f {
                    z[r] += pk[r];
                    for c in 0..d {
                        s[r][c] += pk[r] * vj[c];
                    }
                }
            }
            let pq = phi(fq, head, &row(q, bh, i));
            let den = dot(&pq, &z) + EPS;
            for c in 0..d {
                out.push((0..f).map(|r| pq[r] * s[r][c]).sum::<f64>() / den);
            }
        }
    }
    Tensor::new(vec![b, h, n, d], out).unwrap()
}

pub fn max_abs<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    a.max_abs_diff(b).unwrap()
}
