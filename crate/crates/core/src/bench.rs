//! Wall-clock throughput of vanilla, sync and async decoding on one backbone.
//!
//! Repetitions interleave the three arms so slow drift of the host affects
//! all of them alike. Overheads compare median session wall times.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TokenId};
use crate::engine::{
    run_session, DecodeSession, EngineError, Method, PipelineMode, SessionConfig, StepTiming,
    TraceDetail,
};

/// Sessions shorter than this are lengthened before timing.
pub const MIN_TIMED_WALL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchArm {
    Vanilla,
    EsampSync,
    EsampAsync,
}

impl BenchArm {
    pub const ALL: [BenchArm; 3] = [BenchArm::Vanilla, BenchArm::EsampSync, BenchArm::EsampAsync];

    pub fn configure(self, base: &SessionConfig) -> SessionConfig {
        let mut c = base.clone();
        c.trace = TraceDetail::Basic;
        match self {
            BenchArm::Vanilla => {
                c.method = Method::Vanilla;
                c.pipeline = PipelineMode::Sync;
            }
            BenchArm::EsampSync => {
                c.method = Method::Esamp;
                c.pipeline = PipelineMode::Sync;
            }
            BenchArm::EsampAsync => {
                c.method = Method::Esamp;
                c.pipeline = PipelineMode::Async;
            }
        }
        c
    }
}

/// `[min, p10, p50, p90, max]` of a sample, nearest-rank.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: u64,
    pub p10: u64,
    pub p50: u64,
    pub p90: u64,
    pub max: u64,
}

impl Quantiles {
    pub fn of(values: &[u64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Self {
            min: v[0],
            p10: at(0.1),
            p50: at(0.5),
            p90: at(0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmThroughput {
    pub arm: BenchArm,
    pub tokens_per_run: usize,
    pub wall_ns: Vec<u64>,
    pub median_wall_ns: u64,
    pub tokens_per_sec: f64,
    pub phase1_ns: Quantiles,
    pub phase2_ns: Quantiles,
    pub fallbacks: u64,
    /// Fraction of timed steps whose predict interval met the deep layers.
    pub predict_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub max_new_tokens: usize,
    /// Requested horizon when the session had to be lengthened.
    pub lengthened_from: Option<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    pub available_cores: usize,
    pub arms: Vec<ArmThroughput>,
    /// `100·(median / vanilla median − 1)` per ESamp arm.
    pub sync_overhead_pct: f64,
    pub async_overhead_pct: f64,
}

impl ThroughputReport {
    pub fn arm(&self, arm: BenchArm) -> &ArmThroughput {
        self.arms
            .iter()
            .find(|a| a.arm == arm)
            .expect("every arm is measured")
    }
}

fn median(v: &[u64]) -> u64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2
    }
}

pub fn measure_throughput<B: Backbone>(
    backbone: &B,
    prompts: &[Vec<TokenId>],
    base: &SessionConfig,
    warmup: usize,
    repetitions: usize,
) -> Result<ThroughputReport, EngineError> {
    if repetitions == 0 {
        return Err(EngineError::Config(
            "need at least one timed repetition".into(),
        ));
    }
    let mut base = base.clone();
    let requested = base.max_new_tokens;
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let capacity = backbone.spec().max_context.saturating_sub(longest);
    let run =
        |c: &SessionConfig| run_session(&DecodeSession::new(backbone, prompts.to_vec(), c.clone()));

    // the timer must resolve a session comfortably
    loop {
        let out = run(&BenchArm::Vanilla.configure(&base))?;
        if out.wall >= MIN_TIMED_WALL
            || base.max_new_tokens == 0
            || base.max_new_tokens * 2 > capacity
        {
            break;
        }
        base.max_new_tokens *= 2;
    }
    let configs: Vec<SessionConfig> = BenchArm::ALL.iter().map(|a| a.configure(&base)).collect();
    for _ in 0..warmup {
        for c in &configs {
            run(c)?;
        }
    }
    let mut walls: Vec<Vec<u64>> = (0..3).map(|_| Vec::with_capacity(repetitions)).collect();
    let mut timings: Vec<Vec<StepTiming>> = vec![Vec::new(); 3];
    let mut fallbacks = [0u64; 3];
    let mut tokens = [0usize; 3];
    for _ in 0..repetitions {
        for (i, c) in configs.iter().enumerate() {
            let out = run(c)?;
            walls[i].push(out.wall.as_nanos() as u64);
            fallbacks[i] += out.stats.fallbacks;
            tokens[i] = out.traces.len();
            timings[i].extend(out.timings);
        }
    }
    let arms: Vec<ArmThroughput> = BenchArm::ALL
        .iter()
        .enumerate()
        .map(|(i, &arm)| {
            let med = median(&walls[i]);
            let t = &timings[i];
            let overlap = if t.is_empty() {
                0.0
            } else {
                t.iter().filter(|s| s.predict_overlaps_deep()).count() as f64 / t.len() as f64
            };
            ArmThroughput {
                arm,
                tokens_per_run: tokens[i],
                median_wall_ns: med,
                tokens_per_sec: tokens[i] as f64 / (med.max(1) as f64 * 1e-9),
                phase1_ns: Quantiles::of(&t.iter().map(|s| s.phase1_ns).collect::<Vec<_>>()),
                phase2_ns: Quantiles::of(&t.iter().map(|s| s.phase2_ns).collect::<Vec<_>>()),
                fallbacks: fallbacks[i],
                predict_overlap: overlap,
                wall_ns: walls[i].clone(),
            }
        })
        .collect();
    let pct = |i: usize| {
        100.0 * (arms[i].median_wall_ns as f64 / arms[0].median_wall_ns.max(1) as f64 - 1.0)
    };
    Ok(ThroughputReport {
        prompts: prompts.len(),
        samples_per_prompt: base.samples_per_prompt,
        max_new_tokens: base.max_new_tokens,
        lengthened_from: (base.max_new_tokens != requested).then_some(requested),
        warmup,
        repetitions,
        available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        sync_overhead_pct: pct(1),
        async_overhead_pct: pct(2),
        arms,
    })
}
