//! Replays every logged fusion step three independent ways.
//!
//! * ratio: `π ∝ π_ref^{1+β} / q^β` from the two normalized distributions;
//! * logit: `softmax((1+β)·logits_ref − β·logits_dist)`;
//! * decomposition: `softmax(logits_ref + β·W_head e)`.
//!
//! A correct session has all three agree with each other and with the logged
//! fused logits. Any sign or scale error in the fusion shows up as a
//! deviation at the exact step it happened.

use serde::{Deserialize, Serialize};

use super::{Result, VerifyError};
use crate::backbone::LmHead;
use crate::engine::StepTrace;
use crate::numerics::{dot, log_softmax, softmax};
use crate::sampler::fuse_logits;

pub const AUDIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: usize,
    pub seq: usize,
    pub ratio_vs_logit: f64,
    pub decomposition_vs_logit: f64,
    pub logged_vs_logit: f64,
    /// Largest `|Δlogit_z − β⟨w_z, e⟩|` against the logged fused logits.
    pub logged_delta_residual: f64,
}

impl StepAudit {
    pub fn max_deviation(&self) -> f64 {
        self.ratio_vs_logit
            .max(self.decomposition_vs_logit)
            .max(self.logged_vs_logit)
            .max(self.logged_delta_residual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: usize,
    pub tolerance: f64,
    pub max_ratio_vs_logit: f64,
    pub max_decomposition_vs_logit: f64,
    pub max_logged_vs_logit: f64,
    pub max_logged_delta_residual: f64,
    pub max_deviation: f64,
    /// `(step, seq)` of every step above tolerance.
    pub flagged: Vec<(usize, usize)>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_step: Vec<StepAudit>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn field<'a>(t: &'a StepTrace, v: &'a Option<Vec<f64>>, name: &str) -> Result<&'a [f64]> {
    v.as_deref().ok_or_else(|| {
        VerifyError::Contract(format!(
            "trace step {} seq {} lacks {name}; audits need full trace detail",
            t.step, t.seq
        ))
    })
}

pub fn audit_step(t: &StepTrace, head: &LmHead) -> Result<StepAudit> {
    let lr = field(t, &t.logits_ref, "logits_ref")?;
    let ld = field(t, &t.logits_dist, "logits_dist")?;
    let ln = field(t, &t.logits_new, "logits_new")?;
    let e = field(t, &t.error, "error")?;
    let v = lr.len();
    if ld.len() != v || ln.len() != v || head.vocab_size() != v || head.width() != e.len() {
        return Err(VerifyError::Contract(format!(
            "trace step {} seq {}: logged shapes do not match the head",
            t.step, t.seq
        )));
    }
    let b = t.beta;

    let logit = softmax(&fuse_logits(lr, ld, b)?, 1.0)?;

    let log_ref = log_softmax(lr, 1.0)?;
    let log_q = log_softmax(ld, 1.0)?;
    let unnorm: Vec<f64> = log_ref
        .iter()
        .zip(&log_q)
        .map(|(p, q)| (1.0 + b) * p - b * q)
        .collect();
    let ratio = softmax(&unnorm, 1.0)?;

    let delta: Vec<f64> = (0..v).map(|z| b * dot(head.row(z), e)).collect();
    let decomposed_logits: Vec<f64> = lr.iter().zip(&delta).map(|(r, d)| r + d).collect();
    let decomposition = softmax(&decomposed_logits, 1.0)?;

    let logged = softmax(ln, 1.0)?;
    // the fused logits differ from ref by exactly Δ, up to round-off in the
    // logged magnitudes
    let scale = lr.iter().chain(ln).map(|x| x.abs()).fold(1.0, f64::max);
    let logged_delta_residual = (0..v)
        .map(|z| ((ln[z] - lr[z]) - delta[z]).abs() / scale)
        .fold(0.0, f64::max);

    Ok(StepAudit {
        step: t.step,
        seq: t.seq,
        ratio_vs_logit: max_abs_diff(&ratio, &logit),
        decomposition_vs_logit: max_abs_diff(&decomposition, &logit),
        logged_vs_logit: max_abs_diff(&logged, &logit),
        logged_delta_residual,
    })
}

/// Audits every step; `keep_steps` retains the per-step rows in the report.
pub fn session_identity_audit(
    traces: &[StepTrace],
    head: &LmHead,
    keep_steps: bool,
) -> Result<AuditReport> {
    if traces.is_empty() {
        return Err(VerifyError::Contract("no traces to audit".into()));
    }
    let rows = traces
        .iter()
        .map(|t| audit_step(t, head))
        .collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&StepAudit) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let flagged: Vec<(usize, usize)> = rows
        .iter()
        .filter(|r| {
            let d = r.max_deviation();
            d.is_nan() || d > AUDIT_TOLERANCE
        })
        .map(|r| (r.step, r.seq))
        .collect();
    Ok(AuditReport {
        steps: rows.len(),
        tolerance: AUDIT_TOLERANCE,
        max_ratio_vs_logit: max(|r| r.ratio_vs_logit),
        max_decomposition_vs_logit: max(|r| r.decomposition_vs_logit),
        max_logged_vs_logit: max(|r| r.logged_vs_logit),
        max_logged_delta_residual: max(|r| r.logged_delta_residual),
        max_deviation: max(StepAudit::max_deviation),
        passed: flagged.is_empty(),
        flagged,
        per_step: if keep_steps { rows } else { Vec::new() },
    })
}
