//! Greedy-generation throughput with instrumented state and cache sizes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{AttnPath, InferenceSession, Model, PrefillMode, BOS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// The model's own (linearized) attention.
    Hybrid,
    /// Softmax attention with a growing key/value cache.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    /// Ceiling on state plus cache bytes across the batch.
    pub memory_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            prompt_len: 128,
            gen_len: 512,
            memory_budget: 1 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub batch_size: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    /// Generated tokens times batch size over total time.
    pub tokens_per_sec: f64,
    pub peak_state_bytes: u64,
    pub peak_cache_bytes: u64,
    pub wall_time_secs: f64,
}

fn path(model: &Model, mode: BenchMode) -> Result<AttnPath> {
    match mode {
        BenchMode::Hybrid if !model.is_converted() => Err(Error::NotConverted),
        BenchMode::Hybrid => Ok(AttnPath::Native),
        BenchMode::Softmax => Ok(AttnPath::Softmax),
    }
}

/// Bytes the run would need at its longest, summed over the batch.
pub fn estimate_bytes(model: &Model, mode: BenchMode, cfg: &BenchConfig) -> Result<u64> {
    let path = path(model, mode)?;
    let c = model.config();
    let tokens = (cfg.prompt_len as u64)
        .checked_add(cfg.gen_len as u64)
        .ok_or(Error::Overflow("bench estimate"))?;
    let session = InferenceSession::new(model, path)?;
    let fixed = (session.state_bytes() + session.cache_bytes()) as u64;
    let softmax_layers = match path {
        AttnPath::Softmax => c.n_layers,
        AttnPath::Native => c.attention.iter().filter(|a| !matches!(a, crate::model::AttentionKind::Hybrid(_))).count(),
    } as u64;
    let per_token = softmax_layers * c.n_heads as u64 * 2 * c.head_dim as u64 * 4;
    per_token
        .checked_mul(tokens)
        .and_then(|v| v.checked_add(fixed))
        .and_then(|v| v.checked_mul(cfg.batch_size as u64))
        .ok_or(Error::Overflow("bench estimate"))
}

/// Deterministic prompt of `len` tokens.
pub fn bench_prompt(len: usize) -> Vec<u32> {
    (0..len)
        .map(|i| if i == 0 { BOS } else { b"the quick brown fox "[i % 20] as u32 })
        .collect()
}

struct Run {
    peak_state: usize,
    peak_cache: usize,
}

fn run_one(model: &Model, path: AttnPath, prompt: &[u32], gen_len: usize) -> Result<Run> {
    let mut s = InferenceSession::new(model, path)?;
    let mut logits = s.feed(prompt, PrefillMode::Chunked)?;
    let mut run = Run {
        peak_state: s.state_bytes(),
        peak_cache: s.cache_bytes(),
    };
    for _ in 0..gen_len {
        let next = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b }) as u32;
        logits = s.feed(&[next], PrefillMode::Chunked)?;
        run.peak_state = run.peak_state.max(s.state_bytes());
        run.peak_cache = run.peak_cache.max(s.cache_bytes());
    }
    Ok(run)
}

/// Generates `gen_len` tokens for each of `batch_size` sequences, one thread per sequence.
pub fn bench_generation(model: &Model, mode: BenchMode, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.gen_len == 0 || cfg.prompt_len == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size, prompt_len and gen_len must be positive".into()));
    }
    let path = path(model, mode)?;
    let needed = estimate_bytes(model, mode, cfg)?;
    if needed > cfg.memory_budget {
        return Err(Error::ConfigTooLarge {
            needed,
            budget: cfg.memory_budget,
        });
    }
    let prompt = bench_prompt(cfg.prompt_len);
    let start = Instant::now();
    let runs: Vec<Result<Run>> = if cfg.batch_size == 1 {
        vec![run_one(model, path, &prompt, cfg.gen_len)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.batch_size)
                .map(|_| scope.spawn(|| run_one(model, path, &prompt, cfg.gen_len)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        })
    };
    let wall = start.elapsed().as_secs_f64();
    let mut peak_state = 0u64;
    let mut peak_cache = 0u64;
    for r in runs {
        let r = r?;
        peak_state += r.peak_state as u64;
        peak_cache += r.peak_cache as u64;
    }
    Ok(BenchResult {
        mode,
        batch_size: cfg.batch_size,
        prompt_len: cfg.prompt_len,
        gen_len: cfg.gen_len,
        tokens_per_sec: (cfg.gen_len * cfg.batch_size) as f64 / wall.max(f64::MIN_POSITIVE),
        peak_state_bytes: peak_state,
        peak_cache_bytes: peak_cache,
        wall_time_secs: wall,
    })
}
