//! Paired-seed mode-coverage experiments on the synthetic branch model.
//!
//! Every seed runs vanilla sampling, matched-noise fusion and true-error
//! fusion. Sampling uniforms come from counter-based streams keyed by the
//! seed, so the three runs of one seed share their randomness and differ only
//! in the fused logits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::{SyntheticBranchModel, TokenId};
use crate::engine::{
    run_session, DecodeSession, EngineError, Method, SessionConfig, SessionOutput, TraceDetail,
};
use crate::metrics::{distinct_coverage, divergence_curve, states_by_sequence, MetricsError};
use crate::sampler::Ablation;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Vanilla,
    MatchedNoise,
    Esamp,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Vanilla, Arm::MatchedNoise, Arm::Esamp];

    /// `base` with the method and ablation of this arm.
    pub fn configure(self, base: &SessionConfig) -> SessionConfig {
        let mut c = base.clone();
        match self {
            Arm::Vanilla => c.method = Method::Vanilla,
            Arm::MatchedNoise => {
                c.method = Method::Esamp;
                c.fusion.ablation = Ablation::MatchedNoise;
            }
            Arm::Esamp => {
                c.method = Method::Esamp;
                c.fusion.ablation = Ablation::Off;
            }
        }
        c
    }
}

/// Outcome of one arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    /// Distinct modes per prompt, averaged over prompts.
    pub coverage: f64,
    /// Divergence curve averaged over prompts.
    pub divergence: Vec<f64>,
}

impl ArmOutcome {
    pub fn final_similarity(&self) -> Option<f64> {
        self.divergence.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTriple {
    pub seed: u64,
    pub vanilla: ArmOutcome,
    pub noise: ArmOutcome,
    pub esamp: ArmOutcome,
}

/// Mean of paired differences with a two-sided Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n: usize,
}

impl PairedDifference {
    pub fn from_pairs(a: &[f64], b: &[f64], level: f64) -> Result<Self> {
        if a.len() != b.len() || a.len() < 2 {
            return Err(ExperimentError::Contract(format!(
                "paired interval needs two equal samples of size >= 2, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let t = StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| ExperimentError::Contract(e.to_string()))?
            .inverse_cdf(0.5 + level / 2.0);
        let half = t * (var / n).sqrt();
        Ok(Self {
            mean,
            lower: mean - half,
            upper: mean + half,
            level,
            n: d.len(),
        })
    }

    /// The interval contains zero.
    pub fn indistinguishable_from_zero(&self) -> bool {
        self.lower <= 0.0 && self.upper >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples_per_prompt: usize,
    pub modes: usize,
    pub beta: f64,
    pub triples: Vec<SeedTriple>,
    pub mean_vanilla: f64,
    pub mean_noise: f64,
    pub mean_esamp: f64,
    /// `M·(1 − (1 − 1/M)^K)`: vanilla's expected coverage when every mode is
    /// equally likely.
    pub vanilla_expectation: f64,
    pub esamp_minus_vanilla: PairedDifference,
    pub noise_minus_vanilla: PairedDifference,
    pub esamp_minus_noise: PairedDifference,
    /// Seeds whose true-error final similarity is at most vanilla's.
    pub similarity_wins: usize,
}

/// Coverage of each prompt's samples, averaged over prompts.
pub fn mean_mode_coverage(model: &SyntheticBranchModel, out: &SessionOutput) -> f64 {
    let prompts = out
        .sequences
        .iter()
        .map(|s| s.prompt)
        .max()
        .map_or(0, |p| p + 1);
    let total: usize = (0..prompts)
        .map(|p| {
            let modes: Vec<Option<usize>> = out
                .sequences
                .iter()
                .filter(|s| s.prompt == p)
                .map(|s| model.mode_of(&s.tokens))
                .collect();
            distinct_coverage(&modes)
        })
        .sum();
    total as f64 / prompts.max(1) as f64
}

/// Divergence curve of each prompt's samples, averaged pointwise.
pub fn mean_divergence(out: &SessionOutput) -> Result<Vec<f64>> {
    let states = states_by_sequence(&out.traces);
    let prompts = out
        .sequences
        .iter()
        .map(|s| s.prompt)
        .max()
        .map_or(0, |p| p + 1);
    let mut curves = Vec::new();
    for p in 0..prompts {
        let per_seq: Vec<Vec<Vec<f64>>> = out
            .sequences
            .iter()
            .filter(|s| s.prompt == p)
            .filter_map(|s| states.get(&s.seq).cloned())
            .collect();
        if per_seq.len() >= 2 {
            curves.push(divergence_curve(&per_seq)?);
        }
    }
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    Ok((0..len)
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
        .collect())
}

pub fn run_arm(
    model: &SyntheticBranchModel,
    prompts: &[Vec<TokenId>],
    base: &SessionConfig,
    arm: Arm,
    seed: u64,
) -> Result<ArmOutcome> {
    let mut c = arm.configure(base);
    c.seed = seed;
    c.trace = TraceDetail::Hidden;
    let out = run_session(&DecodeSession::new(model, prompts.to_vec(), c))?;
    Ok(ArmOutcome {
        coverage: mean_mode_coverage(model, &out),
        divergence: mean_divergence(&out)?,
    })
}

/// Runs all three arms on every seed.
pub fn paired_coverage(
    model: &SyntheticBranchModel,
    prompts: &[Vec<TokenId>],
    base: &SessionConfig,
    seeds: &[u64],
) -> Result<CoverageReport> {
    let mut triples = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        triples.push(SeedTriple {
            seed,
            vanilla: run_arm(model, prompts, base, Arm::Vanilla, seed)?,
            noise: run_arm(model, prompts, base, Arm::MatchedNoise, seed)?,
            esamp: run_arm(model, prompts, base, Arm::Esamp, seed)?,
        });
    }
    let col = |f: fn(&SeedTriple) -> f64| triples.iter().map(f).collect::<Vec<_>>();
    let (v, n, e) = (
        col(|t| t.vanilla.coverage),
        col(|t| t.noise.coverage),
        col(|t| t.esamp.coverage),
    );
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let similarity_wins = triples
        .iter()
        .filter(
            |t| match (t.esamp.final_similarity(), t.vanilla.final_similarity()) {
                (Some(a), Some(b)) => a <= b,
                _ => false,
            },
        )
        .count();
    let m = model.config().modes as f64;
    let k = base.samples_per_prompt as f64;
    Ok(CoverageReport {
        samples_per_prompt: base.samples_per_prompt,
        modes: model.config().modes,
        beta: base.fusion.beta,
        mean_vanilla: mean(&v),
        mean_noise: mean(&n),
        mean_esamp: mean(&e),
        vanilla_expectation: m * (1.0 - (1.0 - 1.0 / m).powf(k)),
        esamp_minus_vanilla: PairedDifference::from_pairs(&e, &v, 0.95)?,
        noise_minus_vanilla: PairedDifference::from_pairs(&n, &v, 0.95)?,
        esamp_minus_noise: PairedDifference::from_pairs(&e, &n, 0.95)?,
        similarity_wins,
        triples,
    })
}
