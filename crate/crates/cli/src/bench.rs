//! Per-step latency of incremental decoding with the two cache layouts.
//!
//! For every `(T, N)` both paths decode the same `T` input tokens against
//! the same weights and encoder memory: `ring_buffer` under `ngram(N)` with
//! a ring buffer of `N-1` rows, `full_cache` under the causal mask with an
//! append-only cache. Whole warmup decodes covering at least ten steps are
//! discarded, then each position is timed over `repetitions` decodes.
//!
//! Position rows (`bench_positions.csv`):
//! `t,n,path,position,attended_keys,cache_entries,stored_numbers,
//! attn_mean_ns,attn_median_ns,attn_stddev_ns,step_mean_ns,step_median_ns,step_stddev_ns`.
//! Summary rows (`bench_summary.csv`) add the peak cache size, the median
//! attention time at the reference position `min(16, T)` and at `T`, their
//! ratio, and speedups of the ring buffer over the full cache (1 on
//! `full_cache` rows). Timing columns end in `_ns`, `_growth` or `_speedup`.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use ngram_core::incremental::{CacheKind, DecodeState, KvCache};
use ngram_core::model::{
    encode, ModelConfig, ModelParams, TokenSequence, BOS, FIRST_CONTENT_TOKEN,
};
use ngram_core::{MaskSpec, SeededRng};

use crate::config::Settings;
use crate::error::CliError;
use crate::output::Staged;

pub const POSITIONS_FILE: &str = "bench_positions.csv";
pub const SUMMARY_FILE: &str = "bench_summary.csv";
pub const REFERENCE_POSITION: usize = 16;
const MIN_WARMUP_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePath {
    FullCache,
    RingBuffer,
}

impl CachePath {
    pub fn name(self) -> &'static str {
        match self {
            CachePath::FullCache => "full_cache",
            CachePath::RingBuffer => "ring_buffer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositionRow {
    pub t: usize,
    pub n: usize,
    pub path: &'static str,
    pub position: usize,
    pub attended_keys: usize,
    pub cache_entries: usize,
    pub stored_numbers: usize,
    pub attn_mean_ns: f64,
    pub attn_median_ns: f64,
    pub attn_stddev_ns: f64,
    pub step_mean_ns: f64,
    pub step_median_ns: f64,
    pub step_stddev_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub t: usize,
    pub n: usize,
    pub path: &'static str,
    pub repetitions: usize,
    pub warmup_repetitions: usize,
    pub peak_cache_entries: usize,
    pub peak_stored_numbers: usize,
    pub reference_position: usize,
    pub attn_median_ref_ns: f64,
    pub attn_median_last_ns: f64,
    pub attn_growth: f64,
    pub attn_mean_ns: f64,
    pub step_mean_ns: f64,
    pub attn_speedup: f64,
    pub step_speedup: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub positions: Vec<PositionRow>,
    pub summary: Vec<SummaryRow>,
}

impl BenchReport {
    pub fn rows(&self, t: usize, n: usize, path: CachePath) -> impl Iterator<Item = &PositionRow> {
        self.positions
            .iter()
            .filter(move |r| r.t == t && r.n == n && r.path == path.name())
    }

    pub fn summary_row(&self, t: usize, n: usize, path: CachePath) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.t == t && r.n == n && r.path == path.name())
    }
}

/// Mean, median and sample standard deviation.
pub fn stats(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, median, var.sqrt())
}

/// Per-position measurements of one path: `[position][repetition]`.
struct Samples {
    attn: Vec<Vec<f64>>,
    step: Vec<Vec<f64>>,
    attended: Vec<usize>,
    entries: Vec<usize>,
    stored: Vec<usize>,
}

impl Samples {
    fn new(t: usize, reps: usize) -> Self {
        Self {
            attn: vec![Vec::with_capacity(reps); t],
            step: vec![Vec::with_capacity(reps); t],
            attended: vec![0; t],
            entries: vec![0; t],
            stored: vec![0; t],
        }
    }
}

struct Lane {
    path: CachePath,
    config: ModelConfig,
    kind: CacheKind,
}

fn decode_once(
    p: &Lane,
    memory: &ngram_core::tensor::Tensor<f64>,
    params: &ModelParams<f64>,
    inputs: &[usize],
    record: Option<&mut Samples>,
) -> Result<(), CliError> {
    let mut state = DecodeState::with_cache(memory.clone(), params, &p.config, p.kind)?;
    let mut record = record;
    for (i, &tok) in inputs.iter().enumerate() {
        let started = Instant::now();
        let (_, profile) = state.step_profiled(tok, params, &p.config)?;
        let step_ns = started.elapsed().as_nanos() as f64;
        if let Some(s) = record.as_deref_mut() {
            s.attn[i].push(profile.self_attention.as_nanos() as f64);
            s.step[i].push(step_ns);
            s.attended[i] = profile.attended_keys;
            s.entries[i] = profile.cache_entries;
            s.stored[i] = state
                .caches()
                .iter()
                .map(|c| c.stored_numbers())
                .max()
                .unwrap_or(0);
        }
    }
    Ok(())
}

/// Measure every `(T, N)` in the settings.
pub fn run_bench(settings: &Settings) -> Result<BenchReport, CliError> {
    let b = &settings.bench;
    b.validate()?;
    let mut report = BenchReport::default();
    for &t in &b.lengths {
        for &n in &b.orders {
            let base = ModelConfig {
                max_positions: t.max(b.source_len),
                ..settings.model.clone()
            };
            let mut rng = SeededRng::new(settings.seed);
            let ring_cfg = base.clone().with_mask(MaskSpec::ngram(n)?);
            let full_cfg = base.with_mask(MaskSpec::Causal);
            let params = ModelParams::<f64>::init_random(&full_cfg, &mut rng.fork())?;
            let content = full_cfg.vocab_size - FIRST_CONTENT_TOKEN;
            let source: Vec<usize> = (0..b.source_len)
                .map(|_| FIRST_CONTENT_TOKEN + rng.below(content))
                .collect();
            let mut inputs = vec![BOS];
            inputs.extend((1..t).map(|_| FIRST_CONTENT_TOKEN + rng.below(content)));
            let memory = encode(&TokenSequence::source(source)?, &params, &full_cfg)?;

            let paths = [
                Lane {
                    path: CachePath::FullCache,
                    kind: CacheKind::Append,
                    config: full_cfg,
                },
                Lane {
                    path: CachePath::RingBuffer,
                    kind: CacheKind::for_mask(ring_cfg.mask)?,
                    config: ring_cfg,
                },
            ];
            let warmup = MIN_WARMUP_STEPS.div_ceil(t).max(1);
            for _ in 0..warmup {
                for p in &paths {
                    decode_once(p, &memory, &params, &inputs, None)?;
                }
            }
            let mut samples = [
                Samples::new(t, b.repetitions),
                Samples::new(t, b.repetitions),
            ];
            for _ in 0..b.repetitions {
                for (p, s) in paths.iter().zip(samples.iter_mut()) {
                    decode_once(p, &memory, &params, &inputs, Some(s))?;
                }
            }

            let mut attn_means = [0.0; 2];
            let mut step_means = [0.0; 2];
            let mut partial = Vec::new();
            for (k, (p, s)) in paths.iter().zip(&samples).enumerate() {
                let mut medians = Vec::with_capacity(t);
                for i in 0..t {
                    let (am, amed, asd) = stats(&s.attn[i]);
                    let (sm, smed, ssd) = stats(&s.step[i]);
                    medians.push(amed);
                    attn_means[k] += am / t as f64;
                    step_means[k] += sm / t as f64;
                    report.positions.push(PositionRow {
                        t,
                        n,
                        path: p.path.name(),
                        position: i + 1,
                        attended_keys: s.attended[i],
                        cache_entries: s.entries[i],
                        stored_numbers: s.stored[i],
                        attn_mean_ns: am,
                        attn_median_ns: amed,
                        attn_stddev_ns: asd,
                        step_mean_ns: sm,
                        step_median_ns: smed,
                        step_stddev_ns: ssd,
                    });
                }
                let reference = REFERENCE_POSITION.min(t);
                partial.push(SummaryRow {
                    t,
                    n,
                    path: p.path.name(),
                    repetitions: b.repetitions,
                    warmup_repetitions: warmup,
                    peak_cache_entries: *s.entries.iter().max().unwrap(),
                    peak_stored_numbers: *s.stored.iter().max().unwrap(),
                    reference_position: reference,
                    attn_median_ref_ns: medians[reference - 1],
                    attn_median_last_ns: medians[t - 1],
                    attn_growth: medians[t - 1] / medians[reference - 1],
                    attn_mean_ns: 0.0,
                    step_mean_ns: 0.0,
                    attn_speedup: 1.0,
                    step_speedup: 1.0,
                });
            }
            for (k, row) in partial.iter_mut().enumerate() {
                row.attn_mean_ns = attn_means[k];
                row.step_mean_ns = step_means[k];
            }
            partial[1].attn_speedup = attn_means[0] / attn_means[1];
            partial[1].step_speedup = step_means[0] / step_means[1];
            report.summary.extend(partial);
        }
    }
    Ok(report)
}

pub fn cmd_bench(settings: &Settings, out: &Path) -> Result<BenchReport, CliError> {
    let report = run_bench(settings)?;
    let mut staged = Staged::new();
    staged.csv(&out.join(POSITIONS_FILE), &report.positions)?;
    staged.csv(&out.join(SUMMARY_FILE), &report.summary)?;
    staged.commit()?;
    Ok(report)
}

/// Whether a CSV column holds a wall-clock measurement.
pub fn is_timing_column(name: &str) -> bool {
    name.ends_with("_ns") || name.ends_with("_growth") || name.ends_with("_speedup")
}
