//! Exploration-biased token selection: logit fusion, intrinsic reward,
//! filtering, the latent-error decomposition, matched-noise ablation and
//! inverse-CDF sampling.
//!
//! Stage order for one row:
//!
//! ```text
//! latent-mix:   fuse(ref, dist) -> filter -> softmax(· / T) -> sample
//! post-filter:  filter(ref) -> fuse on survivors -> softmax(· / T) -> sample
//! ```
//!
//! Filters see untempered logits; temperature only enters the final softmax.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::backbone::LmHead;
use crate::numerics::{dot, log_softmax, masked_softmax, norm2, NumericsError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum FilterPolicy {
    #[default]
    None,
    TopK(usize),
    TopP(f64),
    MinP(f64),
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterPolicy::TopK(0) => Err(SamplerError::Config("top-k needs k ≥ 1".into())),
            FilterPolicy::TopP(p) | FilterPolicy::MinP(p) if !(p > 0.0 && p <= 1.0) => Err(
                SamplerError::Config(format!("filter probability {p} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// Where fusion happens relative to the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Fuse over the whole vocabulary, then filter.
    #[default]
    LatentMix,
    /// Filter the reference logits, then fuse on the survivors only.
    PostFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Off,
    /// Replace the latent error by Gaussian noise of the same norm.
    MatchedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionForm {
    /// `(1+β)·ref − β·dist`
    #[default]
    Standard,
    /// `ref − β·dist`
    Subtraction,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub beta: f64,
    pub temperature: f64,
    pub filter: FilterPolicy,
    pub placement: Placement,
    pub ablation: Ablation,
    pub form: FusionForm,
    /// Fault injection for audit self-tests: fuses with `−β`.
    #[doc(hidden)]
    #[serde(skip)]
    pub fault_flip_sign: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            temperature: 1.0,
            filter: FilterPolicy::None,
            placement: Placement::LatentMix,
            ablation: Ablation::Off,
            form: FusionForm::Standard,
            fault_flip_sign: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(SamplerError::Config(format!(
                "β must be finite and ≥ 0, got {}",
                self.beta
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(SamplerError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.filter.validate()
    }

    fn effective_beta(&self) -> f64 {
        if self.fault_flip_sign {
            -self.beta
        } else {
            self.beta
        }
    }

    fn fuse(&self, logits_ref: &[f64], logits_dist: &[f64]) -> Result<Vec<f64>> {
        let beta = self.effective_beta();
        match self.form {
            FusionForm::Standard => fuse_logits(logits_ref, logits_dist, beta),
            FusionForm::Subtraction => subtraction_fuse(logits_ref, logits_dist, beta),
        }
    }

    /// Final pre-temperature logits of one row. Non-candidates are `−∞`.
    pub fn explore_logits(&self, logits_ref: &[f64], logits_dist: &[f64]) -> Result<Vec<f64>> {
        match self.placement {
            Placement::LatentMix => apply_filter(&self.fuse(logits_ref, logits_dist)?, self.filter),
            Placement::PostFilter => {
                let masked = apply_filter(logits_ref, self.filter)?;
                let cands = candidates(&masked);
                let fused = self.fuse(logits_ref, logits_dist)?;
                restrict(&fused, &cands)
            }
        }
    }

    /// Pre-temperature logits of the unmodified sampler.
    pub fn vanilla_logits(&self, logits_ref: &[f64]) -> Result<Vec<f64>> {
        apply_filter(logits_ref, self.filter)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(SamplerError::Length(a.len(), b.len()));
    }
    Ok(())
}

/// `(1+β)·logits_ref − β·logits_dist`.
pub fn fuse_logits(logits_ref: &[f64], logits_dist: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_len(logits_ref, logits_dist)?;
    Ok(logits_ref
        .iter()
        .zip(logits_dist)
        .map(|(r, d)| (1.0 + beta) * r - beta * d)
        .collect())
}

/// `logits_ref − β·logits_dist`.
pub fn subtraction_fuse(logits_ref: &[f64], logits_dist: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_len(logits_ref, logits_dist)?;
    Ok(logits_ref
        .iter()
        .zip(logits_dist)
        .map(|(r, d)| r - beta * d)
        .collect())
}

/// `(1+β)·h^L − β·ĥ^L`.
pub fn fuse_latent(hl: &[f64], hl_hat: &[f64], beta: f64) -> Result<Vec<f64>> {
    fuse_logits(hl, hl_hat, beta)
}

/// `log π_ref(z) − log q_dist(z)` from logits, in log space.
pub fn intrinsic_reward(logits_ref: &[f64], logits_dist: &[f64], z: usize) -> Result<f64> {
    intrinsic_rewards(logits_ref, logits_dist)?
        .get(z)
        .copied()
        .ok_or_else(|| SamplerError::Contract(format!("token {z} outside vocabulary")))
}

/// Reward vector over the whole vocabulary.
pub fn intrinsic_rewards(logits_ref: &[f64], logits_dist: &[f64]) -> Result<Vec<f64>> {
    check_len(logits_ref, logits_dist)?;
    let a = log_softmax(logits_ref, 1.0)?;
    let b = log_softmax(logits_dist, 1.0)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Reward from explicit probabilities; zero mass at `z` is an error.
pub fn intrinsic_reward_probs(pi_ref: &[f64], q_dist: &[f64], z: usize) -> Result<f64> {
    check_len(pi_ref, q_dist)?;
    let (p, q) = match (pi_ref.get(z), q_dist.get(z)) {
        (Some(&p), Some(&q)) => (p, q),
        _ => {
            return Err(SamplerError::Contract(format!(
                "token {z} outside vocabulary"
            )))
        }
    };
    if !(p > 0.0 && q > 0.0) {
        return Err(SamplerError::Numerics(NumericsError::NonFinite(
            "log of zero probability",
        )));
    }
    Ok(p.ln() - q.ln())
}

/// Token ids sorted by descending logit, ties by ascending id.
fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

/// Masks every token outside the policy's candidate set with `−∞`.
pub fn apply_filter(logits: &[f64], policy: FilterPolicy) -> Result<Vec<f64>> {
    policy.validate()?;
    let keep: Vec<usize> = match policy {
        FilterPolicy::None => return Ok(logits.to_vec()),
        FilterPolicy::TopK(k) => ranked(logits).into_iter().take(k).collect(),
        FilterPolicy::TopP(p) => {
            let probs = masked_softmax(logits, 1.0)?;
            let mut keep = Vec::new();
            let mut mass = 0.0;
            for z in ranked(logits) {
                keep.push(z);
                mass += probs[z];
                if mass >= p {
                    break;
                }
            }
            keep
        }
        FilterPolicy::MinP(base) => {
            let probs = masked_softmax(logits, 1.0)?;
            let max = probs.iter().cloned().fold(0.0, f64::max);
            let threshold = base * max;
            (0..logits.len())
                .filter(|&z| probs[z] >= threshold)
                .collect()
        }
    };
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for z in keep {
        out[z] = logits[z];
    }
    Ok(out)
}

/// Ids with a finite logit, ascending.
pub fn candidates(masked: &[f64]) -> Vec<usize> {
    (0..masked.len())
        .filter(|&z| masked[z] > f64::NEG_INFINITY)
        .collect()
}

fn restrict(logits: &[f64], cands: &[usize]) -> Result<Vec<f64>> {
    if cands.is_empty() {
        return Err(SamplerError::Contract("empty candidate set".into()));
    }
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &z in cands {
        if z >= logits.len() {
            return Err(SamplerError::Contract(format!(
                "candidate {z} outside vocabulary"
            )));
        }
        out[z] = logits[z];
    }
    Ok(out)
}

/// Standard fusion on `candidates` only; everything else stays masked.
pub fn post_filter_intervene(
    logits_ref: &[f64],
    logits_dist: &[f64],
    candidates: &[usize],
    beta: f64,
) -> Result<Vec<f64>> {
    restrict(&fuse_logits(logits_ref, logits_dist, beta)?, candidates)
}

/// Standard normal vector rescaled to `‖e‖`.
pub fn matched_noise_vector<R: Rng + ?Sized>(e: &[f64], rng: &mut R) -> Vec<f64> {
    let target = norm2(e);
    if target == 0.0 {
        return vec![0.0; e.len()];
    }
    loop {
        let g: Vec<f64> = (0..e.len()).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&g);
        if n > 0.0 {
            let s = target / n;
            return g.into_iter().map(|x| x * s).collect();
        }
    }
}

/// Inverse-CDF draw from `softmax(logits / T)` using the uniform `u ∈ [0, 1)`.
pub fn sample_with_uniform(logits: &[f64], temperature: f64, u: f64) -> Result<usize> {
    if !logits.iter().any(|x| x.is_finite()) {
        return Err(SamplerError::Contract(
            "no finite logit to sample from".into(),
        ));
    }
    let probs = masked_softmax(logits, temperature)?;
    let mut cum = 0.0;
    let mut last = 0;
    for (z, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = z;
            if u < cum {
                return Ok(z);
            }
        }
    }
    // u within rounding of 1
    Ok(last)
}

/// Draws one uniform from `rng` and samples by inverse CDF.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    sample_with_uniform(logits, temperature, rng.random::<f64>())
}

/// Per-candidate split of the logit shift `Δ_z = β⟨w_z, e⟩` into magnitude
/// and direction terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoveltySignal {
    pub e: Vec<f64>,
    pub norm: f64,
    pub candidates: Vec<usize>,
    pub delta_logit: Vec<f64>,
    pub row_norm: Vec<f64>,
    pub cosine: Vec<f64>,
}

impl NoveltySignal {
    /// Largest `|Δ_z − β‖w_z‖‖e‖cos(w_z, e)|` over the candidates.
    pub fn identity_residual(&self, beta: f64) -> f64 {
        self.delta_logit
            .iter()
            .zip(&self.row_norm)
            .zip(&self.cosine)
            .map(|((d, w), c)| (d - beta * w * self.norm * c).abs())
            .fold(0.0, f64::max)
    }
}

pub fn novelty_decomposition(
    e: &[f64],
    head: &LmHead,
    candidates: &[usize],
    beta: f64,
) -> Result<NoveltySignal> {
    let mut out = NoveltySignal::default();
    novelty_decomposition_into(e, head, candidates, beta, &mut out)?;
    Ok(out)
}

/// Fills `out`, reusing its buffers.
pub fn novelty_decomposition_into(
    e: &[f64],
    head: &LmHead,
    candidates: &[usize],
    beta: f64,
    out: &mut NoveltySignal,
) -> Result<()> {
    if e.len() != head.width() {
        return Err(SamplerError::Length(e.len(), head.width()));
    }
    out.e.clear();
    out.e.extend_from_slice(e);
    out.norm = norm2(e);
    out.candidates.clear();
    out.delta_logit.clear();
    out.row_norm.clear();
    out.cosine.clear();
    for &z in candidates {
        if z >= head.vocab_size() {
            return Err(SamplerError::Contract(format!(
                "candidate {z} outside vocabulary"
            )));
        }
        let w = head.row(z);
        let ip = dot(w, e);
        let wn = norm2(w);
        let denom = wn * out.norm;
        out.candidates.push(z);
        out.delta_logit.push(beta * ip);
        out.row_norm.push(wn);
        out.cosine.push(if denom > 0.0 { ip / denom } else { 0.0 });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, r))
            .collect()
    }

    fn ratio_oracle(lr: &[f64], ld: &[f64], beta: f64, cands: Option<&[usize]>) -> Vec<f64> {
        let p = softmax(lr, 1.0).unwrap();
        let q = softmax(ld, 1.0).unwrap();
        let mut w: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(a, b)| a.powf(1.0 + beta) / b.powf(beta))
            .collect();
        if let Some(c) = cands {
            for (z, x) in w.iter_mut().enumerate() {
                if !c.contains(&z) {
                    *x = 0.0;
                }
            }
        }
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(
            fuse_logits(&[2.0, 0.0], &[1.0, 1.0], 0.25).unwrap(),
            vec![2.25, -0.25]
        );
        let r = [0.3, -1.2, 4.0];
        assert_eq!(fuse_logits(&r, &[9.0, 9.0, 9.0], 0.0).unwrap(), r.to_vec());
        for beta in [0.1, 0.25, 3.0] {
            let f = fuse_logits(&r, &r, beta).unwrap();
            for (a, b) in f.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(fuse_logits(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn softmax_of_fusion_is_the_ratio_policy() {
        let mut r = rng(1);
        for case in 0..200 {
            let n = 2 + case % 30;
            let lr = normal_vec(&mut r, n, 2.0);
            let ld = normal_vec(&mut r, n, 2.0);
            let beta = [0.0, 0.1, 0.25, 0.5, 1.0][case % 5];
            let got = softmax(&fuse_logits(&lr, &ld, beta).unwrap(), 1.0).unwrap();
            for (a, b) in got.iter().zip(ratio_oracle(&lr, &ld, beta, None)) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn constant_shift_distiller_changes_nothing() {
        let lr = [1.0, -0.5, 2.0, 0.1];
        let ld: Vec<f64> = lr.iter().map(|x| x + 3.7).collect();
        let a = softmax(&fuse_logits(&lr, &ld, 0.4).unwrap(), 1.0).unwrap();
        let b = softmax(&lr, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_fusion_commutes_with_head() {
        let mut r = rng(2);
        let w = Matrix::from_vec(10, 6, normal_vec(&mut r, 60, 1.0)).unwrap();
        let head = LmHead::new(w);
        for _ in 0..50 {
            let hl = normal_vec(&mut r, 6, 1.0);
            let hat = normal_vec(&mut r, 6, 1.0);
            let mix = fuse_latent(&hl, &hat, 0.25).unwrap();
            let via_latent = head.project(&mix).unwrap();
            let via_logits = fuse_logits(
                &head.project(&hl).unwrap(),
                &head.project(&hat).unwrap(),
                0.25,
            )
            .unwrap();
            for (a, b) in via_latent.iter().zip(&via_logits) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(
            fuse_latent(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn reward_examples() {
        let l = [0.2, 1.5, -0.3];
        assert!(intrinsic_rewards(&l, &l)
            .unwrap()
            .iter()
            .all(|x| x.abs() < 1e-12));
        let r = intrinsic_reward_probs(&[0.5, 0.5], &[0.25, 0.75], 0).unwrap();
        assert!((r - 2f64.ln()).abs() < 1e-15);
        assert!(intrinsic_reward_probs(&[0.0, 1.0], &[0.5, 0.5], 0).is_err());
        // far tails stay finite in logit space
        let r = intrinsic_reward(&[0.0, -800.0], &[0.0, -1000.0], 1).unwrap();
        assert!((r - 200.0).abs() < 1e-9);
    }

    #[test]
    fn reward_reweighting_equals_fusion() {
        let mut r = rng(3);
        for _ in 0..100 {
            let lr = normal_vec(&mut r, 12, 2.0);
            let ld = normal_vec(&mut r, 12, 2.0);
            let rew = intrinsic_rewards(&lr, &ld).unwrap();
            let shifted: Vec<f64> = lr.iter().zip(&rew).map(|(a, b)| a + 0.25 * b).collect();
            let a = softmax(&shifted, 1.0).unwrap();
            let b = softmax(&fuse_logits(&lr, &ld, 0.25).unwrap(), 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn filter_examples() {
        let l = [3.0, 1.0, 2.0];
        assert_eq!(apply_filter(&l, FilterPolicy::None).unwrap(), l.to_vec());
        assert_eq!(
            candidates(&apply_filter(&l, FilterPolicy::TopK(1)).unwrap()),
            vec![0]
        );
        let probs = [0.7f64, 0.2, 0.06, 0.04];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        assert_eq!(
            candidates(&apply_filter(&logits, FilterPolicy::MinP(0.1)).unwrap()),
            vec![0, 1]
        );
        assert_eq!(
            candidates(&apply_filter(&logits, FilterPolicy::TopP(0.85)).unwrap()),
            vec![0, 1]
        );
        assert_eq!(
            candidates(&apply_filter(&logits, FilterPolicy::TopP(0.91)).unwrap()),
            vec![0, 1, 2]
        );
        assert_eq!(
            candidates(&apply_filter(&logits, FilterPolicy::TopP(1.0)).unwrap()).len(),
            4
        );
    }

    #[test]
    fn filter_ties_prefer_lower_ids() {
        let l = [1.0, 2.0, 2.0, 2.0];
        assert_eq!(
            candidates(&apply_filter(&l, FilterPolicy::TopK(2)).unwrap()),
            vec![1, 2]
        );
    }

    #[test]
    fn filter_rejects_bad_policies() {
        assert!(apply_filter(&[1.0], FilterPolicy::TopK(0)).is_err());
        assert!(apply_filter(&[1.0], FilterPolicy::TopP(0.0)).is_err());
        assert!(apply_filter(&[1.0], FilterPolicy::MinP(1.5)).is_err());
    }

    #[test]
    fn post_filter_matches_restricted_ratio() {
        let mut r = rng(4);
        for _ in 0..100 {
            let lr = normal_vec(&mut r, 16, 2.0);
            let ld = normal_vec(&mut r, 16, 2.0);
            let cands = candidates(&apply_filter(&lr, FilterPolicy::TopK(4)).unwrap());
            let out = post_filter_intervene(&lr, &ld, &cands, 0.25).unwrap();
            let got = masked_softmax(&out, 1.0).unwrap();
            for (a, b) in got.iter().zip(ratio_oracle(&lr, &ld, 0.25, Some(&cands))) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn post_filter_reductions() {
        let lr = [0.5, 1.0, -1.0];
        let ld = [2.0, -1.0, 0.0];
        let all = post_filter_intervene(&lr, &ld, &[0, 1, 2], 0.3).unwrap();
        assert_eq!(all, fuse_logits(&lr, &ld, 0.3).unwrap());
        let one = post_filter_intervene(&lr, &ld, &[2], 5.0).unwrap();
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(sample_with_uniform(&one, 1.0, u).unwrap(), 2);
        }
        assert!(post_filter_intervene(&lr, &ld, &[], 0.3).is_err());
    }

    #[test]
    fn placements_order_fusion_and_filter() {
        let lr = [2.0, 1.9, -3.0];
        let ld = [6.0, -2.0, -9.0];
        let mut cfg = FusionConfig {
            beta: 1.0,
            filter: FilterPolicy::TopK(1),
            ..Default::default()
        };
        // fused logits are [-2, 5.8, 3]: top-1 after fusion is token 1
        assert_eq!(candidates(&cfg.explore_logits(&lr, &ld).unwrap()), vec![1]);
        cfg.placement = Placement::PostFilter;
        // top-1 of the reference is token 0, fusion cannot add candidates
        assert_eq!(candidates(&cfg.explore_logits(&lr, &ld).unwrap()), vec![0]);
    }

    #[test]
    fn zero_beta_explore_equals_vanilla_bitwise() {
        let mut r = rng(5);
        for placement in [Placement::LatentMix, Placement::PostFilter] {
            for form in [FusionForm::Standard, FusionForm::Subtraction] {
                let cfg = FusionConfig {
                    beta: 0.0,
                    placement,
                    form,
                    filter: FilterPolicy::TopP(0.9),
                    ..Default::default()
                };
                let lr = normal_vec(&mut r, 20, 3.0);
                let ld = normal_vec(&mut r, 20, 3.0);
                let a = cfg.explore_logits(&lr, &ld).unwrap();
                let b = cfg.vanilla_logits(&lr).unwrap();
                assert_eq!(
                    a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn subtraction_form() {
        let cfg = FusionConfig {
            form: FusionForm::Subtraction,
            beta: 0.5,
            ..Default::default()
        };
        assert_eq!(
            cfg.explore_logits(&[2.0, 0.0], &[1.0, 4.0]).unwrap(),
            vec![1.5, -2.0]
        );
    }

    #[test]
    fn inverse_cdf_walk() {
        assert_eq!(sample_with_uniform(&[0.0; 4], 1.0, 0.6).unwrap(), 2);
        assert_eq!(sample_with_uniform(&[0.0; 4], 1.0, 0.0).unwrap(), 0);
        assert_eq!(sample_with_uniform(&[0.0; 4], 1.0, 0.9999999).unwrap(), 3);
        let one = [f64::NEG_INFINITY, 0.3, f64::NEG_INFINITY];
        assert_eq!(sample_with_uniform(&one, 0.7, 0.99).unwrap(), 1);
        assert!(sample_with_uniform(&[f64::NEG_INFINITY; 3], 1.0, 0.5).is_err());
    }

    #[test]
    fn sampled_frequencies_match_softmax() {
        let logits = [0.5, -1.0, 1.5, 0.0, -0.3];
        let t = 0.8;
        let probs = masked_softmax(&logits, t).unwrap();
        let mut r = rng(6);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_token(&logits, t, &mut r).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1.0);
        }
    }

    #[test]
    fn matched_noise_has_error_norm() {
        let mut r = rng(7);
        assert_eq!(matched_noise_vector(&[0.0; 5], &mut r), vec![0.0; 5]);
        for _ in 0..100 {
            let e = normal_vec(&mut r, 16, 3.0);
            let n = matched_noise_vector(&e, &mut r);
            assert!((norm2(&n) - norm2(&e)).abs() < 1e-12 * norm2(&e).max(1.0));
        }
    }

    #[test]
    fn matched_noise_has_no_preferred_direction() {
        let d = 32;
        let mut r = rng(8);
        let e: Vec<f64> = (0..d).map(|i| if i == 0 { 2.0 } else { 0.0 }).collect();
        let fixed = normal_vec(&mut r, d, 1.0);
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| crate::numerics::cosine(&matched_noise_vector(&e, &mut r), &fixed))
            .sum::<f64>()
            / draws as f64;
        assert!(mean.abs() <= 3.0 / (d as f64).sqrt());
    }

    #[test]
    fn decomposition_identity() {
        let mut r = rng(9);
        let head = LmHead::new(Matrix::from_vec(12, 8, normal_vec(&mut r, 96, 1.0)).unwrap());
        let zero = novelty_decomposition(&[0.0; 8], &head, &[0, 3], 0.25).unwrap();
        assert!(zero.delta_logit.iter().all(|&x| x == 0.0));
        let w3 = head.row(3).to_vec();
        let unit: Vec<f64> = w3.iter().map(|x| x / norm2(&w3)).collect();
        let aligned = novelty_decomposition(&unit, &head, &[3], 0.25).unwrap();
        assert!((aligned.cosine[0] - 1.0).abs() < 1e-12);
        let mut sig = NoveltySignal::default();
        for _ in 0..100 {
            let hl = normal_vec(&mut r, 8, 1.0);
            let hat = normal_vec(&mut r, 8, 1.0);
            let e: Vec<f64> = hl.iter().zip(&hat).map(|(a, b)| a - b).collect();
            let cands: Vec<usize> = (0..12).collect();
            novelty_decomposition_into(&e, &head, &cands, 0.25, &mut sig).unwrap();
            assert!(sig.identity_residual(0.25) < 1e-9);
            let lr = head.project(&hl).unwrap();
            let fused = fuse_logits(&lr, &head.project(&hat).unwrap(), 0.25).unwrap();
            for (z, d) in sig.delta_logit.iter().enumerate() {
                assert!((fused[z] - lr[z] - d).abs() < 1e-9);
            }
        }
        assert!(novelty_decomposition(&[0.0; 3], &head, &[0], 0.25).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        assert!(FusionConfig {
            beta: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            beta: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn flipped_sign_fault_reverses_the_shift() {
        let cfg = FusionConfig {
            fault_flip_sign: true,
            ..Default::default()
        };
        assert_eq!(
            cfg.explore_logits(&[2.0, 0.0], &[1.0, 1.0]).unwrap(),
            vec![1.75, 0.25]
        );
    }

    proptest::proptest! {
        #[test]
        fn filtered_set_is_nonempty_and_contains_argmax(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..40),
            k in 1usize..10,
            p in 0.01f64..1.0,
        ) {
            let best = ranked(&logits)[0];
            for policy in [FilterPolicy::TopK(k), FilterPolicy::TopP(p), FilterPolicy::MinP(p)] {
                let c = candidates(&apply_filter(&logits, policy).unwrap());
                proptest::prop_assert!(c.contains(&best));
            }
        }

        #[test]
        fn sample_lands_on_a_candidate(
            logits in proptest::collection::vec(-10.0f64..10.0, 2..30),
            u in 0.0f64..1.0,
        ) {
            let masked = apply_filter(&logits, FilterPolicy::TopK(3)).unwrap();
            let z = sample_with_uniform(&masked, 0.7, u).unwrap();
            proptest::prop_assert!(masked[z].is_finite());
        }
    }
}
