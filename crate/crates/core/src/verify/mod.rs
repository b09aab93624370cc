//! Numerical checks of the decoding rule's derivations and of logged sessions.

pub mod audit;
pub mod kl;
pub mod mdp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Backbone;
use crate::engine::{run_session, DecodeSession, EngineError, TraceDetail};
use crate::numerics::NumericsError;
use crate::sampler::SamplerError;

pub use audit::{session_identity_audit, AuditReport, StepAudit, AUDIT_TOLERANCE};
pub use kl::{
    closed_form_policy, run_kl_suite, solve_kl_problem_numeric, KlSuiteReport, SimplexProblem,
};
pub use mdp::{check_q_equals_r, run_mdp_suite, MdpReport, MdpSuiteReport, RewardRule, ToyMdp};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// Runs `session` with full traces and audits every step.
pub fn audit_session<B: Backbone>(
    session: &DecodeSession<'_, B>,
    keep_steps: bool,
) -> Result<AuditReport> {
    let mut config = session.config.clone();
    config.trace = TraceDetail::Full;
    let s = DecodeSession::new(session.backbone, session.prompts.clone(), config);
    let out = run_session(&s)?;
    session_identity_audit(&out.traces, s.backbone.head(), keep_steps)
}

/// Everything `verify` checks, with one overall verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub kl: KlSuiteReport,
    pub mdp: MdpSuiteReport,
    pub audit: AuditReport,
    pub passed: bool,
}

impl VerifyReport {
    pub fn new(kl: KlSuiteReport, mdp: MdpSuiteReport, audit: AuditReport) -> Self {
        let passed = kl.passed && mdp.passed && audit.passed;
        Self {
            kl,
            mdp,
            audit,
            passed,
        }
    }
}
