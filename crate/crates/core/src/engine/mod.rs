//! Decode orchestration over `P` prompts × `K` samples.
//!
//! Per step, for every live sequence:
//!
//! 1. layer 1 of the backbone gives `h¹`, parked in the ring;
//! 2. the distiller lane predicts `ĥ` for the step's rows while the decode
//!    thread runs layers 2..L;
//! 3. rendezvous, fusion and sampling use the distiller as it was before this
//!    step's update;
//! 4. the step's `(h¹, h^L)` rows are handed to the lane for one update per
//!    distiller, which lands before the next step's prediction.
//!
//! Prefill positions are dropped by [`guardrail_filter`] and never reach the
//! distiller.

mod lane;
pub mod ring;
pub mod rng;

use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, Phase, SequenceState, TokenId};
use crate::distiller::{DistillerBank, DistillerConfig, DistillerError, DistillerScope};
use crate::numerics::{log_sum_exp, AdamConfig, NumericsError};
use crate::sampler::{
    matched_noise_vector, sample_with_uniform, Ablation, FusionConfig, SamplerError,
};

pub use lane::LaneDelay;
use lane::{AsyncLane, Lane, LaneShared, Row, SyncLane, TrainOutcome};
use ring::RingBuffer;
use rng::{derived_seed, stream_rng, Stream};

/// Version tag written into every trace record.
pub const TRACE_VERSION: u32 = 1;

const DISTILLER_SEED_TAG: u64 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid session: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Distiller(#[from] DistillerError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("distiller lane: {0}")]
    Lane(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Sample from the filtered reference distribution; no distiller.
    Vanilla,
    #[default]
    Esamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    #[default]
    Sync,
    Async,
}

/// How much of each step goes into its trace record.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Default,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum TraceDetail {
    #[default]
    Basic,
    /// Adds `h^L`.
    Hidden,
    /// Adds `h^L`, the three logit vectors and the latent error used by fusion.
    Full,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub samples_per_prompt: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub method: Method,
    pub fusion: FusionConfig,
    pub scope: DistillerScope,
    pub distiller_inner: usize,
    pub adam: AdamConfig,
    /// Steps per distiller update.
    pub train_every: usize,
    pub pipeline: PipelineMode,
    pub rendezvous_timeout_ms: u64,
    pub trace: TraceDetail,
    #[doc(hidden)]
    #[serde(skip)]
    pub lane_delay: Option<LaneDelay>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            max_new_tokens: 32,
            seed: 0,
            method: Method::Esamp,
            fusion: FusionConfig::default(),
            scope: DistillerScope::Shared,
            distiller_inner: crate::distiller::DEFAULT_INNER_WIDTH,
            adam: AdamConfig::default(),
            train_every: 1,
            pipeline: PipelineMode::Sync,
            rendezvous_timeout_ms: 10_000,
            trace: TraceDetail::Basic,
            lane_delay: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_prompt == 0 {
            return Err(EngineError::Config(
                "need at least one sample per prompt".into(),
            ));
        }
        if self.train_every == 0 {
            return Err(EngineError::Config("train_every must be ≥ 1".into()));
        }
        if self.distiller_inner == 0 {
            return Err(EngineError::Config(
                "distiller width must be positive".into(),
            ));
        }
        self.fusion.validate()?;
        Ok(())
    }

    pub fn distiller_config(&self, hidden: usize) -> DistillerConfig {
        DistillerConfig {
            hidden,
            inner: self.distiller_inner,
            seed: derived_seed(self.seed, DISTILLER_SEED_TAG),
            adam: self.adam,
        }
    }
}

/// A backbone, its prompts and how to decode them.
#[derive(Debug, Clone)]
pub struct DecodeSession<'a, B: Backbone> {
    pub backbone: &'a B,
    pub prompts: Vec<Vec<TokenId>>,
    pub config: SessionConfig,
}

impl<'a, B: Backbone> DecodeSession<'a, B> {
    pub fn new(backbone: &'a B, prompts: Vec<Vec<TokenId>>, config: SessionConfig) -> Self {
        Self {
            backbone,
            prompts,
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.prompts.len() * self.config.samples_per_prompt
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.prompts.is_empty() {
            return Err(EngineError::Config("no prompts".into()));
        }
        if let Some(i) = self.prompts.iter().position(Vec::is_empty) {
            return Err(EngineError::Config(format!("prompt {i} is empty")));
        }
        Ok(())
    }
}

/// One decode step of one sequence.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepTrace {
    pub v: u32,
    pub step: usize,
    pub seq: usize,
    pub prompt: usize,
    pub sample: usize,
    pub token: TokenId,
    /// `log π_ref(token)` at temperature 1, no filter.
    pub logp_ref: f64,
    /// Log-probability of `token` under the distribution it was drawn from.
    pub logp_new: f64,
    /// Pre-update batch loss of the distiller update that consumed this row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// `‖h^L − ĥ‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novelty: Option<f64>,
    pub ablation: bool,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_ref: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_dist: Option<Vec<f64>>,
    /// Unfiltered fused logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_new: Option<Vec<f64>>,
    /// Latent error vector the fusion acted on (the noise vector under ablation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Vec<f64>>,
}

/// Wall-clock phases of one step, nanoseconds since session start.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub step_start_ns: u64,
    pub phase1_ns: u64,
    pub phase2_ns: u64,
    pub deep_start_ns: u64,
    pub deep_end_ns: u64,
    pub predict_start_ns: Option<u64>,
    pub predict_end_ns: Option<u64>,
    pub fallback: bool,
}

impl StepTiming {
    /// Whether the predict interval intersected the deep-layer interval.
    pub fn predict_overlaps_deep(&self) -> bool {
        match (self.predict_start_ns, self.predict_end_ns) {
            (Some(s), Some(e)) => s < self.deep_end_ns && e > self.deep_start_ns,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SequenceOutput {
    pub seq: usize,
    pub prompt: usize,
    pub sample: usize,
    pub tokens: Vec<TokenId>,
    /// Context overflow stopped this sequence early.
    pub truncated: bool,
    /// Mean of the decode-step `h^L`.
    pub mean_hidden: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SessionStats {
    pub steps: usize,
    pub decode_rows: usize,
    pub trained_rows: usize,
    /// Distiller updates per routing slot.
    pub updates: Vec<u64>,
    pub failed_updates: usize,
    pub fallbacks: u64,
    pub guardrail_dropped: usize,
    pub ring_capacity: usize,
    pub ring_blocked_claims: u64,
    pub ring_violations: u64,
    pub truncated: usize,
}

impl SessionStats {
    pub fn total_updates(&self) -> u64 {
        self.updates.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub sequences: Vec<SequenceOutput>,
    /// Ordered by step, then sequence id.
    pub traces: Vec<StepTrace>,
    pub timings: Vec<StepTiming>,
    pub stats: SessionStats,
    pub distillers: Option<DistillerBank>,
    pub wall: Duration,
}

impl SessionOutput {
    /// JSON Lines of every trace record.
    pub fn traces_jsonl(&self) -> String {
        let mut s = String::new();
        for t in &self.traces {
            s.push_str(&serde_json::to_string(t).expect("trace records serialise"));
            s.push('\n');
        }
        s
    }
}

/// A hidden-state row tagged with the phase that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRow<T> {
    pub phase: Phase,
    pub row: T,
}

/// Keeps decode rows only.
pub fn guardrail_filter<T>(rows: Vec<TaggedRow<T>>) -> Vec<TaggedRow<T>> {
    rows.into_iter()
        .filter(|r| r.phase == Phase::Decode)
        .collect()
}

/// Distiller slot serving a sequence of `prompt` out of `prompts`.
pub fn scope_route(scope: DistillerScope, prompt: usize, prompts: usize) -> Result<usize> {
    if prompt >= prompts {
        return Err(EngineError::Config(format!(
            "unknown prompt {prompt} of {prompts}"
        )));
    }
    Ok(scope.route(prompt))
}

struct Sequence<C> {
    id: usize,
    prompt: usize,
    sample: usize,
    state: SequenceState<C>,
    next: TokenId,
    tokens: Vec<TokenId>,
    hidden_sum: Vec<f64>,
    truncated: bool,
}

/// Runs the session in its configured pipeline mode.
pub fn run_session<B: Backbone>(session: &DecodeSession<'_, B>) -> Result<SessionOutput> {
    match session.config.pipeline {
        PipelineMode::Sync => run_session_sync(session),
        PipelineMode::Async => run_session_async(session),
    }
}

pub fn run_session_sync<B: Backbone>(session: &DecodeSession<'_, B>) -> Result<SessionOutput> {
    session.validate()?;
    let clock = Instant::now();
    let mut bank = make_bank(session)?;
    let ring = make_ring(session);
    let mut lane = SyncLane {
        bank: &mut bank,
        ring: &ring,
        clock,
        pending: None,
        outcomes: Vec::new(),
    };
    let partial = decode_loop(session, &ring, &mut lane, clock)?;
    let outcomes = lane.finish()?;
    Ok(partial.assemble(session, bank, outcomes, &ring, 0, clock))
}

pub fn run_session_async<B: Backbone>(session: &DecodeSession<'_, B>) -> Result<SessionOutput> {
    session.validate()?;
    let clock = Instant::now();
    let shared = LaneShared::new(make_bank(session)?);
    let ring = make_ring(session);
    let timeout = Duration::from_millis(session.config.rendezvous_timeout_ms);
    let delay = session.config.lane_delay;
    let (partial, outcomes, fallbacks) = std::thread::scope(|scope| -> Result<_> {
        let (mut lane, ends) = AsyncLane::new(&shared, &ring, clock, timeout);
        let (shared_ref, ring_ref) = (&shared, &ring);
        scope.spawn(move || ends.run(shared_ref, ring_ref, clock, delay));
        let partial = decode_loop(session, &ring, &mut lane, clock);
        let outcomes = lane.finish();
        let fallbacks = lane.fallbacks();
        drop(lane);
        Ok((partial?, outcomes?, fallbacks))
    })?;
    Ok(partial.assemble(
        session,
        shared.into_bank(),
        outcomes,
        &ring,
        fallbacks,
        clock,
    ))
}

fn make_bank<B: Backbone>(session: &DecodeSession<'_, B>) -> Result<DistillerBank> {
    let cfg = session
        .config
        .distiller_config(session.backbone.spec().hidden);
    Ok(DistillerBank::new(
        session.config.scope,
        cfg,
        session.prompts.len(),
    )?)
}

fn make_ring<B: Backbone>(session: &DecodeSession<'_, B>) -> RingBuffer {
    let rows = session.width();
    RingBuffer::new(
        (session.config.train_every + 1) * rows,
        session.backbone.spec().hidden,
    )
}

struct Partial<C> {
    sequences: Vec<Sequence<C>>,
    traces: Vec<StepTrace>,
    timings: Vec<StepTiming>,
    steps: usize,
    decode_rows: usize,
    guardrail_dropped: usize,
}

fn decode_loop<B: Backbone, L: Lane>(
    session: &DecodeSession<'_, B>,
    ring: &RingBuffer,
    lane: &mut L,
    clock: Instant,
) -> Result<Partial<B::Cache>> {
    let bb = session.backbone;
    let cfg = &session.config;
    let k = cfg.samples_per_prompt;
    let esamp = cfg.method == Method::Esamp;
    let head = bb.head();

    let mut sequences = Vec::with_capacity(session.width());
    let mut guardrail_dropped = 0;
    for (p, prompt) in session.prompts.iter().enumerate() {
        for s in 0..k {
            let (state, pairs) = bb.prefill(prompt)?;
            let tagged: Vec<_> = pairs
                .into_iter()
                .map(|row| TaggedRow {
                    phase: Phase::Prefill,
                    row,
                })
                .collect();
            let n = tagged.len();
            guardrail_dropped += n - guardrail_filter(tagged).len();
            sequences.push(Sequence {
                id: p * k + s,
                prompt: p,
                sample: s,
                state,
                next: *prompt.last().expect("prompts are non-empty"),
                tokens: Vec::with_capacity(cfg.max_new_tokens),
                hidden_sum: vec![0.0; bb.spec().hidden],
                truncated: false,
            });
        }
    }

    let mut traces = Vec::with_capacity(session.width() * cfg.max_new_tokens);
    let mut timings = Vec::with_capacity(cfg.max_new_tokens);
    let mut pending_train: Vec<Row> = Vec::new();
    let mut decode_rows = 0;
    let mut steps = 0;

    for step in 0..cfg.max_new_tokens {
        let step_start_ns = nanos(clock);
        let mut rows: Vec<TaggedRow<(usize, Row)>> = Vec::new();
        for (i, seq) in sequences.iter_mut().enumerate() {
            if seq.truncated {
                continue;
            }
            match bb.decode_shallow(&mut seq.state, seq.next) {
                Ok(h1) => {
                    let slot = scope_route(cfg.scope, seq.prompt, session.prompts.len())?;
                    let r = Row {
                        // vanilla rows never reach the distiller
                        ring: if esamp {
                            ring.claim(step, seq.id, &h1)
                        } else {
                            usize::MAX
                        },
                        step,
                        seq: seq.id,
                        slot,
                    };
                    rows.push(TaggedRow {
                        phase: seq.state.phase(),
                        row: (i, r),
                    });
                }
                Err(BackboneError::ContextOverflow { .. }) => seq.truncated = true,
                Err(e) => return Err(e.into()),
            }
        }
        if rows.is_empty() {
            break;
        }
        steps += 1;
        let rows = guardrail_filter(rows);
        let ring_rows: Vec<Row> = rows.iter().map(|r| r.row.1).collect();
        decode_rows += rows.len();
        if esamp {
            lane.predict(step, ring_rows.clone())?;
        }

        let deep_start_ns = nanos(clock);
        let mut outs = Vec::with_capacity(rows.len());
        for r in &rows {
            outs.push(bb.decode_deep(&mut sequences[r.row.0].state)?);
        }
        let deep_end_ns = nanos(clock);

        let predicted = if esamp {
            Some(lane.rendezvous(step)?)
        } else {
            None
        };

        let mut dist = vec![0.0; head.vocab_size()];
        for (r, out) in rows.iter().zip(&outs) {
            let (i, row) = r.row;
            let seq = &mut sequences[i];
            let mut u_rng = stream_rng(cfg.seed, seq.prompt, seq.sample, step, Stream::Sampling);
            let u: f64 = u_rng.random();
            let mut trace = StepTrace {
                v: TRACE_VERSION,
                step,
                seq: seq.id,
                prompt: seq.prompt,
                sample: seq.sample,
                token: 0,
                logp_ref: 0.0,
                logp_new: 0.0,
                loss: None,
                novelty: None,
                ablation: esamp && cfg.fusion.ablation == Ablation::MatchedNoise,
                beta: if esamp { cfg.fusion.beta } else { 0.0 },
                hidden: None,
                logits_ref: None,
                logits_dist: None,
                logits_new: None,
                error: None,
            };
            let final_logits = if esamp {
                ring.set_hl(row.ring, &out.hl);
                let pred = ring.with_slot(row.ring, |s| s.pred.clone());
                let e: Vec<f64> = out.hl.iter().zip(&pred).map(|(a, b)| a - b).collect();
                trace.novelty = Some(crate::numerics::norm2(&e));
                let used = match cfg.fusion.ablation {
                    Ablation::Off => e,
                    Ablation::MatchedNoise => {
                        let mut n_rng =
                            stream_rng(cfg.seed, seq.prompt, seq.sample, step, Stream::Noise);
                        matched_noise_vector(&e, &mut n_rng)
                    }
                };
                let hat: Vec<f64> = match cfg.fusion.ablation {
                    Ablation::Off => pred,
                    Ablation::MatchedNoise => {
                        out.hl.iter().zip(&used).map(|(h, n)| h - n).collect()
                    }
                };
                head.project_into(&hat, &mut dist)?;
                let logits = cfg.fusion.explore_logits(&out.logits_ref, &dist)?;
                if cfg.trace == TraceDetail::Full {
                    trace.logits_dist = Some(dist.clone());
                    trace.logits_new = Some(fused_unfiltered(&cfg.fusion, &out.logits_ref, &dist)?);
                    trace.error = Some(used);
                }
                logits
            } else {
                cfg.fusion.vanilla_logits(&out.logits_ref)?
            };
            let z = sample_with_uniform(&final_logits, cfg.fusion.temperature, u)?;
            trace.token = z;
            trace.logp_ref = out.logits_ref[z] - log_sum_exp(&out.logits_ref, 1.0)?;
            let t = cfg.fusion.temperature;
            trace.logp_new = final_logits[z] / t - log_sum_exp(&final_logits, t)?;
            if cfg.trace >= TraceDetail::Hidden {
                trace.hidden = Some(out.hl.clone());
            }
            if cfg.trace == TraceDetail::Full {
                trace.logits_ref = Some(out.logits_ref.clone());
            }
            for (a, b) in seq.hidden_sum.iter_mut().zip(&out.hl) {
                *a += b;
            }
            seq.tokens.push(z);
            seq.next = z;
            traces.push(trace);
        }
        let phase1_ns = nanos(clock) - step_start_ns;

        let mut phase2_ns = 0;
        if esamp {
            pending_train.extend(ring_rows);
            if (step + 1) % cfg.train_every == 0 {
                let t0 = nanos(clock);
                lane.train(std::mem::take(&mut pending_train))?;
                phase2_ns = nanos(clock) - t0;
            }
        }
        timings.push(StepTiming {
            step,
            step_start_ns,
            phase1_ns,
            phase2_ns,
            deep_start_ns,
            deep_end_ns,
            predict_start_ns: predicted.map(|p| p.start_ns),
            predict_end_ns: predicted.map(|p| p.end_ns),
            fallback: predicted.is_some_and(|p| p.fallback),
        });
    }
    if !pending_train.is_empty() {
        lane.train(pending_train)?;
    }
    Ok(Partial {
        sequences,
        traces,
        timings,
        steps,
        decode_rows,
        guardrail_dropped,
    })
}

fn fused_unfiltered(
    cfg: &FusionConfig,
    logits_ref: &[f64],
    logits_dist: &[f64],
) -> Result<Vec<f64>> {
    let unfiltered = FusionConfig {
        filter: crate::sampler::FilterPolicy::None,
        placement: crate::sampler::Placement::LatentMix,
        ..*cfg
    };
    Ok(unfiltered.explore_logits(logits_ref, logits_dist)?)
}

fn nanos(clock: Instant) -> u64 {
    clock.elapsed().as_nanos() as u64
}

impl<C> Partial<C> {
    fn assemble<B: Backbone>(
        self,
        session: &DecodeSession<'_, B>,
        bank: DistillerBank,
        outcomes: Vec<TrainOutcome>,
        ring: &RingBuffer,
        fallbacks: u64,
        clock: Instant,
    ) -> SessionOutput {
        let esamp = session.config.method == Method::Esamp;
        let mut traces = self.traces;
        let mut timings = self.timings;
        let mut trained_rows = 0;
        let mut failed_updates = 0;
        for o in &outcomes {
            match &o.report {
                Ok(rep) => {
                    trained_rows += o.rows.len();
                    for &(step, seq) in &o.rows {
                        if let Some(t) = trace_at(&mut traces, step, seq) {
                            t.loss = Some(rep.loss);
                        }
                    }
                }
                Err(_) => failed_updates += 1,
            }
            if let Some(&(step, _)) = o.rows.last() {
                if let Some(t) = timings.iter_mut().find(|t| t.step == step) {
                    t.phase2_ns = t.phase2_ns.max(o.end_ns.saturating_sub(o.start_ns));
                }
            }
        }
        let sequences = self
            .sequences
            .into_iter()
            .map(|s| {
                let n = s.tokens.len().max(1) as f64;
                SequenceOutput {
                    seq: s.id,
                    prompt: s.prompt,
                    sample: s.sample,
                    mean_hidden: s.hidden_sum.iter().map(|x| x / n).collect(),
                    truncated: s.truncated,
                    tokens: s.tokens,
                }
            })
            .collect::<Vec<_>>();
        let stats = SessionStats {
            steps: self.steps,
            decode_rows: self.decode_rows,
            trained_rows,
            updates: if esamp {
                bank.iter().map(|(_, d)| d.updates()).collect()
            } else {
                Vec::new()
            },
            failed_updates,
            fallbacks,
            guardrail_dropped: self.guardrail_dropped,
            ring_capacity: ring.capacity(),
            ring_blocked_claims: ring.blocked_claims(),
            ring_violations: ring.violations(),
            truncated: sequences.iter().filter(|s| s.truncated).count(),
        };
        SessionOutput {
            sequences,
            traces,
            timings,
            stats,
            distillers: esamp.then_some(bank),
            wall: clock.elapsed(),
        }
    }
}

fn trace_at(traces: &mut [StepTrace], step: usize, seq: usize) -> Option<&mut StepTrace> {
    let i = traces
        .binary_search_by_key(&(step, seq), |t| (t.step, t.seq))
        .ok()?;
    traces.get_mut(i)
}

#[cfg(test)]
mod tests;
