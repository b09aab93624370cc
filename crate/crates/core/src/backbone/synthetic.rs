//! Analytic backbone with `M` continuation modes reached through a single
//! branch token each.
//!
//! Vocabulary: `F` filler tokens `0..F`, then `M` blocks of `C` tokens. The
//! first token of block `m` (id `F + m·C`) is the branch token of mode `m`.
//! A trajectory's mode is the block of its first generated non-filler token.
//!
//! Before branching, fillers carry logit 0 and the `M` branch tokens share one
//! logit, so every step that can branch gives each mode the same probability.
//! Branching is closed for the first `branch_start` generated tokens and
//! forced from `branch_deadline` on. Inside mode `m` only block `m` is live.
//!
//! Hidden states live in an orthonormal frame `Q` (`d > |V|`): the head is the
//! first `|V|` rows of `Q` and the remaining rows span its null space `N`.
//! `h¹` is a decayed embedding of the recent token window plus a prompt
//! summary, all inside `N`. With head rows of norm `g`,
//! `h^L = W_headᵀ ℓ / g² + N tanh(A Nᵀ h¹)`, so `W_head h^L = ℓ` and the
//! nonlinear part is invisible to the head.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Backbone, BackboneError, BackboneSpec, HiddenPair, LmHead, Result, SequenceState, StepOutput,
    TokenId,
};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub modes: usize,
    pub tokens_per_mode: usize,
    pub fillers: usize,
    pub hidden: usize,
    /// Number of most recent tokens embedded into `h¹`.
    pub window: usize,
    /// Per-position decay of the window embedding.
    pub decay: f64,
    pub prompt_scale: f64,
    /// Probability of branching at each open pre-branch step.
    pub hazard: f64,
    pub branch_start: usize,
    pub branch_deadline: usize,
    /// Logit of live tokens inside a mode.
    pub mode_logit: f64,
    /// Logit of dead tokens.
    pub floor: f64,
    /// Gain of the nonlinear null-space component of `h^L`.
    pub null_gain: f64,
    /// Norm of every head row; the head-space part of `h^L` shrinks by its
    /// inverse so logits stay as designed.
    pub head_gain: f64,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            modes: 4,
            tokens_per_mode: 4,
            fillers: 8,
            hidden: 64,
            window: 4,
            decay: 0.7,
            prompt_scale: 1.0,
            hazard: 0.25,
            branch_start: 2,
            branch_deadline: 12,
            mode_logit: 4.0,
            floor: -8.0,
            null_gain: 0.5,
            head_gain: 1.0,
            max_context: 512,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Horizon paired with [`SyntheticConfig::exploration`].
    pub const EXPLORATION_HORIZON: usize = 200;

    /// Slow, spread-out branching with sharp modes and a heavy head.
    ///
    /// Branching is open from the first token with a 5% hazard until step 80,
    /// so sequences of one prompt enter their modes at different times and a
    /// later sequence sees states the distiller already fitted. The head gain
    /// keeps `h^L` small enough for the distiller to track within a few
    /// updates. Over [`Self::EXPLORATION_HORIZON`] steps the mode phase
    /// dominates the running-mean hidden state.
    pub fn exploration() -> Self {
        Self {
            hazard: 0.05,
            branch_start: 0,
            branch_deadline: 80,
            mode_logit: 10.0,
            floor: -20.0,
            prompt_scale: 3.0,
            null_gain: 0.1,
            head_gain: 10.0,
            ..Self::default()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.fillers + self.modes * self.tokens_per_mode
    }

    pub fn branch_token(&self, mode: usize) -> TokenId {
        self.fillers + mode * self.tokens_per_mode
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        if self.modes < 2 {
            return Err(BackboneError::Spec(format!(
                "need at least 2 modes, got {}",
                self.modes
            )));
        }
        if self.modes > v {
            return Err(BackboneError::Spec(format!(
                "{} modes exceed vocabulary {v}",
                self.modes
            )));
        }
        if self.tokens_per_mode == 0 || self.fillers == 0 {
            return Err(BackboneError::Spec(
                "modes and fillers need at least one token".into(),
            ));
        }
        if self.hidden <= v {
            return Err(BackboneError::Spec(format!(
                "hidden width {} must exceed vocabulary {v}",
                self.hidden
            )));
        }
        if !(self.hazard > 0.0 && self.hazard < 1.0) {
            return Err(BackboneError::Spec(format!(
                "hazard {} outside (0, 1)",
                self.hazard
            )));
        }
        if self.branch_deadline < self.branch_start {
            return Err(BackboneError::Spec(
                "branch deadline precedes branch start".into(),
            ));
        }
        if !(self.head_gain.is_finite() && self.head_gain > 0.0) {
            return Err(BackboneError::Spec(format!(
                "head gain {} must be positive",
                self.head_gain
            )));
        }
        if self.window == 0 || self.max_context == 0 {
            return Err(BackboneError::Spec(
                "window and context must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBranchModel {
    config: SyntheticConfig,
    spec: BackboneSpec,
    head: LmHead,
    /// `d × (d − |V|)`, orthonormal columns spanning the head's null space.
    null: Matrix,
    tok_emb: Matrix,
    prompt_emb: Matrix,
    mix: Matrix,
    branch_logit: f64,
}

/// Recent-token window and mode bookkeeping of one synthetic sequence.
#[derive(Debug, Clone)]
pub struct SyntheticCache {
    window: VecDeque<TokenId>,
    prompt_code: Vec<f64>,
    len: usize,
    generated: usize,
    mode: Option<usize>,
    pending: Option<Vec<f64>>,
}

impl SyntheticCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Mode entered so far, if any.
    pub fn mode(&self) -> Option<usize> {
        self.mode
    }
}

fn orthonormal_frame(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        // two passes of Gram-Schmidt keep the frame orthonormal to rounding
        for _ in 0..2 {
            for r in &rows {
                let p = crate::numerics::dot(r, &v);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= p * ri;
                }
            }
        }
        let n = crate::numerics::norm2(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

impl SyntheticBranchModel {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let v = config.vocab_size();
        let d = config.hidden;
        let k = d - v;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let frame = orthonormal_frame(&mut rng, d);
        let head_rows = frame.as_slice()[..v * d]
            .iter()
            .map(|x| x * config.head_gain)
            .collect();
        let head = Matrix::from_vec(v, d, head_rows).unwrap();
        let null = Matrix::from_vec(k, d, frame.as_slice()[v * d..].to_vec())
            .unwrap()
            .transpose();
        let unit = Normal::new(0.0, 1.0 / (k as f64).sqrt()).unwrap();
        let mut gauss = |rows: usize, cols: usize| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| unit.sample(&mut rng)).collect(),
            )
            .unwrap()
        };
        let tok_emb = gauss(v, k);
        let prompt_emb = gauss(v, k);
        let mix = gauss(k, k);
        let spec = BackboneSpec {
            vocab_size: v,
            hidden: d,
            layers: 2,
            heads: 1,
            max_context: config.max_context,
            seed: config.seed,
        };
        Ok(Self {
            branch_logit: branch_logit(&config),
            config,
            spec,
            head: LmHead::new(head),
            null,
            tok_emb,
            prompt_emb,
            mix,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Mode of a generated continuation: block of its first non-filler token.
    pub fn mode_of(&self, generated: &[TokenId]) -> Option<usize> {
        let c = &self.config;
        generated
            .iter()
            .find(|&&t| t >= c.fillers && t < c.vocab_size())
            .map(|&t| (t - c.fillers) / c.tokens_per_mode)
    }

    /// Designed logits for a sequence that has generated `generated` tokens
    /// and is in `mode`.
    pub fn designed_logits(&self, generated: usize, mode: Option<usize>) -> Vec<f64> {
        let c = &self.config;
        let mut l = vec![c.floor; c.vocab_size()];
        match mode {
            Some(m) => {
                for t in 0..c.tokens_per_mode {
                    l[c.fillers + m * c.tokens_per_mode + t] = c.mode_logit;
                }
            }
            None if generated >= c.branch_deadline => {
                for m in 0..c.modes {
                    l[c.branch_token(m)] = 0.0;
                }
            }
            None => {
                l[..c.fillers].fill(0.0);
                if generated >= c.branch_start {
                    for m in 0..c.modes {
                        l[c.branch_token(m)] = self.branch_logit;
                    }
                }
            }
        }
        // logits are shift invariant; centring keeps h^L small
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        l.iter_mut().for_each(|x| *x -= mean);
        l
    }

    fn to_hidden(&self, coords: &[f64]) -> Vec<f64> {
        self.null.matvec(coords).expect("null basis shape")
    }

    fn shallow(&self, cache: &SyntheticCache) -> Vec<f64> {
        let c = &self.config;
        let mut u: Vec<f64> = cache
            .prompt_code
            .iter()
            .map(|x| x * c.prompt_scale)
            .collect();
        let mut w = 1.0;
        for &t in cache.window.iter().rev() {
            for (ui, e) in u.iter_mut().zip(self.tok_emb.row(t)) {
                *ui += w * e;
            }
            w *= c.decay;
        }
        u
    }

    fn deep(&self, u: &[f64], logits: &[f64]) -> Vec<f64> {
        let g = self.mix.matvec(u).expect("mix shape");
        let g: Vec<f64> = g.iter().map(|x| self.config.null_gain * x.tanh()).collect();
        let mut h = self.to_hidden(&g);
        // rows of the head are orthogonal with squared norm gain²
        let inv = 1.0 / (self.config.head_gain * self.config.head_gain);
        for (z, &lz) in logits.iter().enumerate() {
            for (hi, wi) in h.iter_mut().zip(self.head.row(z)) {
                *hi += lz * inv * wi;
            }
        }
        h
    }

    fn push(&self, cache: &mut SyntheticCache, token: TokenId) {
        cache.window.push_back(token);
        if cache.window.len() > self.config.window {
            cache.window.pop_front();
        }
    }

    /// Probability of the branch tokens at one open pre-branch step.
    pub fn branch_step_mass(&self) -> f64 {
        let l = self.designed_logits(self.config.branch_start, None);
        let probs = crate::numerics::softmax(&l, 1.0).expect("finite logits");
        (0..self.config.modes)
            .map(|m| probs[self.config.branch_token(m)])
            .sum()
    }
}

/// Shared branch-token logit that gives total branch probability `hazard`
/// against `F` fillers at 0 and the remaining tokens at the floor.
fn branch_logit(c: &SyntheticConfig) -> f64 {
    let rest = (c.modes * (c.tokens_per_mode - 1)) as f64 * c.floor.exp();
    (c.hazard * (c.fillers as f64 + rest) / (c.modes as f64 * (1.0 - c.hazard))).ln()
}

impl Backbone for SyntheticBranchModel {
    type Cache = SyntheticCache;

    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn head(&self) -> &LmHead {
        &self.head
    }

    fn prefill(
        &self,
        prompt: &[TokenId],
    ) -> Result<(SequenceState<SyntheticCache>, Vec<HiddenPair>)> {
        for &t in prompt {
            self.check_token(t)?;
        }
        if prompt.len() > self.spec.max_context {
            return Err(BackboneError::ContextOverflow {
                capacity: self.spec.max_context,
            });
        }
        let k = self.null.cols();
        let mut code = vec![0.0; k];
        for &t in prompt {
            for (ci, e) in code.iter_mut().zip(self.prompt_emb.row(t)) {
                *ci += e;
            }
        }
        if !prompt.is_empty() {
            let n = prompt.len() as f64;
            code.iter_mut().for_each(|x| *x /= n.sqrt());
        }
        let cache = SyntheticCache {
            window: VecDeque::with_capacity(self.config.window + 1),
            prompt_code: code,
            len: 0,
            generated: 0,
            mode: None,
            pending: None,
        };
        let mut state = SequenceState::new(cache);
        let ingest = prompt.len().saturating_sub(1);
        let mut pairs = Vec::with_capacity(ingest);
        for &t in &prompt[..ingest] {
            state.push_prompt_token(t);
            self.push(&mut state.cache, t);
            state.cache.len += 1;
            let u = self.shallow(&state.cache);
            let l = self.designed_logits(0, None);
            pairs.push(HiddenPair {
                h1: self.to_hidden(&u),
                hl: self.deep(&u, &l),
            });
        }
        state.finish_prefill(prompt.len());
        Ok((state, pairs))
    }

    fn decode_shallow(
        &self,
        state: &mut SequenceState<SyntheticCache>,
        token: TokenId,
    ) -> Result<Vec<f64>> {
        self.check_token(token)?;
        if state.cache.len >= self.spec.max_context {
            return Err(BackboneError::ContextOverflow {
                capacity: self.spec.max_context,
            });
        }
        state.begin_decode(token)?;
        // the first decode step re-feeds the prompt tail; later inputs were generated
        let generated_input = state.tokens().len() > state.prompt_len();
        let cache = &mut state.cache;
        self.push(cache, token);
        cache.len += 1;
        if generated_input {
            cache.generated += 1;
            if cache.mode.is_none() {
                cache.mode = self.mode_of(&[token]);
            }
        }
        let u = self.shallow(cache);
        let h1 = self.to_hidden(&u);
        cache.pending = Some(u);
        Ok(h1)
    }

    fn decode_deep(&self, state: &mut SequenceState<SyntheticCache>) -> Result<StepOutput> {
        state.end_decode()?;
        let cache = &mut state.cache;
        let u = cache
            .pending
            .take()
            .ok_or_else(|| BackboneError::Contract("no pending shallow state".into()))?;
        let l = self.designed_logits(cache.generated, cache.mode);
        let hl = self.deep(&u, &l);
        let logits_ref = self.head.project(&hl)?;
        Ok(StepOutput {
            h1: self.to_hidden(&u),
            hl,
            logits_ref,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn model(modes: usize) -> SyntheticBranchModel {
        SyntheticBranchModel::new(SyntheticConfig {
            modes,
            ..Default::default()
        })
        .unwrap()
    }

    fn branch_probs(m: &SyntheticBranchModel, logits: &[f64]) -> Vec<f64> {
        let p = softmax(logits, 1.0).unwrap();
        let c = m.config();
        let b: Vec<f64> = (0..c.modes).map(|k| p[c.branch_token(k)]).collect();
        let s: f64 = b.iter().sum();
        b.iter().map(|x| x / s).collect()
    }

    #[test]
    fn two_modes_split_evenly_at_branch_step() {
        let m = model(2);
        let (mut st, _) = m.prefill(&[0, 1]).unwrap();
        let mut tok = 1;
        for _ in 0..m.config().branch_start {
            m.decode_step(&mut st, tok).unwrap();
            tok = 0;
        }
        let out = m.decode_step(&mut st, tok).unwrap();
        let b = branch_probs(&m, &out.logits_ref);
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn open_step_has_designed_hazard() {
        let m = model(4);
        assert!((m.branch_step_mass() - m.config().hazard).abs() < 1e-12);
    }

    #[test]
    fn deadline_forces_branching() {
        let m = model(4);
        let l = m.designed_logits(m.config().branch_deadline, None);
        let p = softmax(&l, 1.0).unwrap();
        let mass: f64 = (0..4).map(|k| p[m.config().branch_token(k)]).sum();
        assert!(mass > 0.99);
    }

    #[test]
    fn logits_are_head_projection_of_deep_state() {
        let m = model(4);
        let (mut st, _) = m.prefill(&[3, 4, 5]).unwrap();
        for t in [5, 1, 2, m.config().branch_token(2), 17, 18] {
            let out = m.decode_step(&mut st, t).unwrap();
            let again = m.lm_head(&out.hl).unwrap();
            let designed = m.designed_logits(st.cache().generated, st.cache().mode());
            for ((a, b), c) in out.logits_ref.iter().zip(&again).zip(&designed) {
                assert!((a - b).abs() < 1e-12);
                assert!((a - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shallow_state_is_invisible_to_head() {
        let m = model(4);
        let (mut st, _) = m.prefill(&[1]).unwrap();
        let h1 = m.decode_shallow(&mut st, 1).unwrap();
        assert!(m.lm_head(&h1).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn forced_branch_token_sets_mode() {
        let m = model(4);
        for mode in 0..4 {
            let (mut st, _) = m.prefill(&[0]).unwrap();
            m.decode_step(&mut st, 0).unwrap();
            let b = m.config().branch_token(mode);
            m.decode_step(&mut st, b).unwrap();
            assert_eq!(st.cache().mode(), Some(mode));
            assert_eq!(m.mode_of(&st.tokens()[st.prompt_len()..]), Some(mode));
            let out = m.decode_step(&mut st, b + 1).unwrap();
            let p = softmax(&out.logits_ref, 1.0).unwrap();
            let inside: f64 = (0..4).map(|j| p[b + j]).sum();
            assert!(inside > 0.999);
        }
    }

    #[test]
    fn prompt_mode_tokens_do_not_set_mode() {
        let m = model(4);
        let (mut st, _) = m.prefill(&[12, 13]).unwrap();
        m.decode_step(&mut st, 13).unwrap();
        assert_eq!(st.cache().mode(), None);
    }

    #[test]
    fn exploration_preset_branches_from_the_first_token() {
        let m = SyntheticBranchModel::new(SyntheticConfig::exploration()).unwrap();
        let c = m.config();
        assert!((m.branch_step_mass() - c.hazard).abs() < 1e-12);
        let l = m.designed_logits(0, None);
        assert!(l[c.branch_token(0)] > c.floor - 1.0);
        assert!(c.branch_deadline < SyntheticConfig::EXPLORATION_HORIZON);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |c: SyntheticConfig| SyntheticBranchModel::new(c).is_err();
        assert!(bad(SyntheticConfig {
            modes: 1,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            hidden: 24,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            hazard: 1.0,
            ..Default::default()
        }));
        assert!(bad(SyntheticConfig {
            modes: 30,
            tokens_per_mode: 1,
            fillers: 1,
            hidden: 8,
            ..Default::default()
        }));
    }
}
