//! Pre-norm decoder-only transformer with learned absolute positions and
//! gated-SwiGLU feed-forward blocks.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Backbone, BackboneError, BackboneSpec, HiddenPair, LmHead, Result, SequenceState, StepOutput,
    TokenId,
};
use crate::numerics::{dot, gated_swiglu_apply, Matrix, SwiGluParams};
use crate::tensorfile::{FileKind, TensorFile};

/// Where the shallow state `h¹` is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShallowCapture {
    /// Residual stream right after block 1.
    PostBlock,
    /// Residual stream after block 1, RMS-normalised (unit gain).
    PostNorm,
}

pub const DEFAULT_SHALLOW_CAPTURE: ShallowCapture = ShallowCapture::PostBlock;

/// Feed-forward width as a multiple of the hidden width.
pub const FFN_MULT: usize = 4;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    attn_norm: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ffn_norm: Vec<f64>,
    ffn: SwiGluParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    spec: BackboneSpec,
    tok_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<Layer>,
    final_norm: Vec<f64>,
    head: LmHead,
    shallow_capture: ShallowCapture,
}

/// Per-layer key/value cache plus the residual of a pending decode step.
#[derive(Debug, Clone)]
pub struct TransformerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    pending: Option<Vec<f64>>,
}

impl TransformerCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Raw cached keys of one layer, `len × d` row-major.
    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn row_times(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng)).collect(),
    )
    .unwrap()
}

impl TinyTransformer {
    /// Builds a transformer with weights drawn from a ChaCha stream seeded by `spec.seed`.
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.hidden;
        let f = FFN_MULT * d;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let tok_emb = gaussian(&mut rng, spec.vocab_size, d, 1.0);
        let pos_emb = gaussian(&mut rng, spec.max_context, d, 0.5);
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * spec.layers as f64).sqrt();
        let layers = (0..spec.layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                wq: gaussian(&mut rng, d, d, proj_std),
                wk: gaussian(&mut rng, d, d, proj_std),
                wv: gaussian(&mut rng, d, d, proj_std),
                wo: gaussian(&mut rng, d, d, out_std),
                ffn_norm: vec![1.0; d],
                ffn: SwiGluParams {
                    gate: gaussian(&mut rng, d, f, proj_std),
                    up: gaussian(&mut rng, d, f, proj_std),
                    down: gaussian(
                        &mut rng,
                        f,
                        d,
                        1.0 / (f as f64).sqrt() / (2.0 * spec.layers as f64).sqrt(),
                    ),
                    version: 0,
                },
            })
            .collect();
        let head = LmHead::new(gaussian(&mut rng, spec.vocab_size, d, proj_std));
        Ok(Self {
            spec,
            tok_emb,
            pos_emb,
            layers,
            final_norm: vec![1.0; d],
            head,
            shallow_capture: DEFAULT_SHALLOW_CAPTURE,
        })
    }

    pub fn with_shallow_capture(mut self, capture: ShallowCapture) -> Self {
        self.shallow_capture = capture;
        self
    }

    pub fn shallow_capture(&self) -> ShallowCapture {
        self.shallow_capture
    }

    /// Closed-form parameter count: `2·V·d + C·d + L·(16d² + 2d) + d`
    /// (token embedding, untied head, positions, per-layer attention and
    /// 4d-wide SwiGLU plus two norm gains, final norm gain).
    pub fn param_count_formula(spec: &BackboneSpec) -> usize {
        let (v, d, c, l) = (spec.vocab_size, spec.hidden, spec.max_context, spec.layers);
        2 * v * d + c * d + l * (16 * d * d + 2 * d) + d
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice(), self.pos_emb.as_slice()];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.ffn_norm.as_slice(),
                l.ffn.gate.as_slice(),
                l.ffn.up.as_slice(),
                l.ffn.down.as_slice(),
            ]);
        }
        out.push(self.final_norm.as_slice());
        out.push(self.head.weight().as_slice());
        out
    }

    /// Writes the checkpoint. Fields: vocab, hidden, layers, heads,
    /// max_context, seed. Tensors: token embedding, positions, then per layer
    /// attn_norm, wq, wk, wv, wo, ffn_norm, gate, up, down, then final norm
    /// and head.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.spec;
        let file = TensorFile {
            kind: FileKind::TinyTransformer,
            fields: vec![
                s.vocab_size as u64,
                s.hidden as u64,
                s.layers as u64,
                s.heads as u64,
                s.max_context as u64,
                s.seed,
            ],
            tensors: self.tensors().into_iter().map(<[f64]>::to_vec).collect(),
        };
        file.write_to(w)
            .map_err(|e| BackboneError::Checkpoint(e.into()))
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let file = TensorFile::read_from(r, FileKind::TinyTransformer)?;
        if file.fields.len() != 6 {
            return Err(BackboneError::Spec(format!(
                "checkpoint has {} header fields, expected 6",
                file.fields.len()
            )));
        }
        let f = &file.fields;
        let spec = BackboneSpec {
            vocab_size: f[0] as usize,
            hidden: f[1] as usize,
            layers: f[2] as usize,
            heads: f[3] as usize,
            max_context: f[4] as usize,
            seed: f[5],
        };
        spec.validate()?;
        let mut model = Self::new(spec)?;
        let expected = 2 + 9 * spec.layers + 2;
        if file.tensors.len() != expected {
            return Err(BackboneError::Spec(format!(
                "checkpoint has {} tensors, expected {expected}",
                file.tensors.len()
            )));
        }
        let mut it = file.tensors.into_iter();
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let t = it.next().expect("count checked");
            if t.len() != dst.len() {
                return Err(BackboneError::Spec(format!(
                    "tensor has {} elements, expected {}",
                    t.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&t);
            Ok(())
        };
        take(model.tok_emb.as_mut_slice())?;
        take(model.pos_emb.as_mut_slice())?;
        for l in &mut model.layers {
            take(&mut l.attn_norm)?;
            take(l.wq.as_mut_slice())?;
            take(l.wk.as_mut_slice())?;
            take(l.wv.as_mut_slice())?;
            take(l.wo.as_mut_slice())?;
            take(&mut l.ffn_norm)?;
            take(l.ffn.gate.as_mut_slice())?;
            take(l.ffn.up.as_mut_slice())?;
            take(l.ffn.down.as_mut_slice())?;
        }
        take(&mut model.final_norm)?;
        let mut head = model.head.weight().clone();
        take(head.as_mut_slice())?;
        model.head = LmHead::new(head);
        Ok(model)
    }

    fn new_cache(&self) -> TransformerCache {
        let cap = self.spec.max_context * self.spec.hidden;
        TransformerCache {
            keys: (0..self.spec.layers)
                .map(|_| Vec::with_capacity(cap))
                .collect(),
            values: (0..self.spec.layers)
                .map(|_| Vec::with_capacity(cap))
                .collect(),
            len: 0,
            pending: None,
        }
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f64> {
        self.tok_emb
            .row(token)
            .iter()
            .zip(self.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Applies block `li` to the residual `x` at the cache's next position.
    fn block(&self, li: usize, x: &mut [f64], cache: &mut TransformerCache) {
        let layer = &self.layers[li];
        let d = self.spec.hidden;
        let heads = self.spec.heads;
        let dh = d / heads;
        let xn = rms_norm(x, &layer.attn_norm);
        let q = row_times(&xn, &layer.wq);
        let k = row_times(&xn, &layer.wk);
        let v = row_times(&xn, &layer.wv);
        cache.keys[li].extend_from_slice(&k);
        cache.values[li].extend_from_slice(&v);
        let n = cache.keys[li].len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut max = f64::NEG_INFINITY;
            for (p, s) in scores.iter_mut().enumerate() {
                let kp = &cache.keys[li][p * d + h * dh..p * d + (h + 1) * dh];
                *s = dot(qh, kp) * scale;
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let out = &mut attn[h * dh..(h + 1) * dh];
            for (p, s) in scores.iter().enumerate() {
                let w = s / z;
                let vp = &cache.values[li][p * d + h * dh..p * d + (h + 1) * dh];
                for (o, vv) in out.iter_mut().zip(vp) {
                    *o += w * vv;
                }
            }
        }
        let o = row_times(&attn, &layer.wo);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let hn = rms_norm(x, &layer.ffn_norm);
        let f = gated_swiglu_apply(&hn, &layer.ffn).expect("shapes fixed at construction");
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
    }

    fn capture(&self, x: &[f64]) -> Vec<f64> {
        match self.shallow_capture {
            ShallowCapture::PostBlock => x.to_vec(),
            ShallowCapture::PostNorm => rms_norm(x, &vec![1.0; x.len()]),
        }
    }

    /// Full forward of one position, returning (h¹, h^L).
    fn forward_position(&self, token: TokenId, cache: &mut TransformerCache) -> HiddenPair {
        let mut x = self.embed(token, cache.len);
        self.block(0, &mut x, cache);
        let h1 = self.capture(&x);
        for li in 1..self.spec.layers {
            self.block(li, &mut x, cache);
        }
        cache.len += 1;
        HiddenPair {
            h1,
            hl: rms_norm(&x, &self.final_norm),
        }
    }
}

impl Backbone for TinyTransformer {
    type Cache = TransformerCache;

    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn head(&self) -> &LmHead {
        &self.head
    }

    fn prefill(
        &self,
        prompt: &[TokenId],
    ) -> Result<(SequenceState<TransformerCache>, Vec<HiddenPair>)> {
        for &t in prompt {
            self.check_token(t)?;
        }
        if prompt.len() > self.spec.max_context {
            return Err(BackboneError::ContextOverflow {
                capacity: self.spec.max_context,
            });
        }
        let mut state = SequenceState::new(self.new_cache());
        let ingest = prompt.len().saturating_sub(1);
        let mut pairs = Vec::with_capacity(ingest);
        for &t in &prompt[..ingest] {
            state.push_prompt_token(t);
            pairs.push(self.forward_position(t, &mut state.cache));
        }
        state.finish_prefill(prompt.len());
        Ok((state, pairs))
    }

    fn decode_shallow(
        &self,
        state: &mut SequenceState<TransformerCache>,
        token: TokenId,
    ) -> Result<Vec<f64>> {
        self.check_token(token)?;
        if state.cache.len >= self.spec.max_context {
            return Err(BackboneError::ContextOverflow {
                capacity: self.spec.max_context,
            });
        }
        state.begin_decode(token)?;
        let mut x = self.embed(token, state.cache.len);
        self.block(0, &mut x, &mut state.cache);
        let h1 = self.capture(&x);
        state.cache.pending = Some(x);
        Ok(h1)
    }

    fn decode_deep(&self, state: &mut SequenceState<TransformerCache>) -> Result<StepOutput> {
        state.end_decode()?;
        let mut x = state
            .cache
            .pending
            .take()
            .ok_or_else(|| BackboneError::Contract("no pending residual".into()))?;
        let h1 = self.capture(&x);
        for li in 1..self.spec.layers {
            self.block(li, &mut x, &mut state.cache);
        }
        state.cache.len += 1;
        let hl = rms_norm(&x, &self.final_norm);
        let logits_ref = self.head.project(&hl)?;
        Ok(StepOutput { h1, hl, logits_ref })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyTransformer {
        TinyTransformer::new(BackboneSpec {
            vocab_size: 16,
            hidden: 8,
            layers: 3,
            heads: 2,
            max_context: 12,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(small(), small());
        let other = TinyTransformer::new(BackboneSpec {
            seed: 8,
            ..*small().spec()
        })
        .unwrap();
        assert_ne!(small(), other);
    }

    #[test]
    fn default_param_count_matches_formula() {
        let m = TinyTransformer::new(BackboneSpec::default()).unwrap();
        // 2·64·64 + 256·64 + 4·(16·64² + 2·64) + 64
        assert_eq!(TinyTransformer::param_count_formula(m.spec()), 287_296);
        assert_eq!(m.param_count(), 287_296);
    }

    #[test]
    fn empty_prompt_starts_at_zero() {
        let m = small();
        let (st, pairs) = m.prefill(&[]).unwrap();
        assert_eq!(st.cache().len(), 0);
        assert!(pairs.is_empty());
    }

    #[test]
    fn prompt_caches_all_but_last_position() {
        let m = small();
        let (mut st, pairs) = m.prefill(&[1, 2, 3, 4]).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(st.cache().len(), 3);
        m.decode_step(&mut st, 4).unwrap();
        // the first decode step attended over all four prompt positions
        assert_eq!(st.cache().len(), 4);
        assert_eq!(st.cache().keys(0).len(), 4 * 8);
    }

    #[test]
    fn prefill_rejects_bad_tokens() {
        let m = small();
        assert!(matches!(
            m.prefill(&[1, 99]),
            Err(BackboneError::InvalidToken {
                token: 99,
                vocab: 16
            })
        ));
    }

    #[test]
    fn decode_matches_prefill_states() {
        // prefill positions and decode positions run the same forward
        let m = small();
        let (_, pairs) = m.prefill(&[3, 5, 7, 2]).unwrap();
        let (mut st, _) = m.prefill(&[3]).unwrap();
        let mut outs = vec![m.decode_step(&mut st, 3).unwrap()];
        outs.push(m.decode_step(&mut st, 5).unwrap());
        outs.push(m.decode_step(&mut st, 7).unwrap());
        for (p, o) in pairs.iter().zip(&outs) {
            assert_eq!(p.h1, o.h1);
            assert_eq!(p.hl, o.hl);
        }
    }

    #[test]
    fn logits_equal_head_projection() {
        let m = small();
        let (mut st, _) = m.prefill(&[1, 2]).unwrap();
        for t in [2, 9, 4, 11] {
            let out = m.decode_step(&mut st, t).unwrap();
            let again = m.lm_head(&out.hl).unwrap();
            for (a, b) in out.logits_ref.iter().zip(&again) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(out.logits_ref.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn context_overflow() {
        let m = small();
        let (mut st, _) = m.prefill(&[0]).unwrap();
        for _ in 0..12 {
            m.decode_step(&mut st, 1).unwrap();
        }
        assert!(matches!(
            m.decode_step(&mut st, 1),
            Err(BackboneError::ContextOverflow { capacity: 12 })
        ));
    }

    #[test]
    fn determinism_across_states() {
        let m = small();
        let (mut a, _) = m.prefill(&[1, 2, 3]).unwrap();
        let (mut b, _) = m.prefill(&[1, 2, 3]).unwrap();
        assert_eq!(
            m.decode_step(&mut a, 3).unwrap(),
            m.decode_step(&mut b, 3).unwrap()
        );
    }

    #[test]
    fn post_norm_capture_has_unit_rms() {
        let m = small().with_shallow_capture(ShallowCapture::PostNorm);
        let (mut st, _) = m.prefill(&[1]).unwrap();
        let out = m.decode_step(&mut st, 1).unwrap();
        let rms = (dot(&out.h1, &out.h1) / out.h1.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = small();
        let mut bytes = Vec::new();
        m.save(&mut bytes).unwrap();
        let back = TinyTransformer::load(&mut &bytes[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(bytes, again);
    }
}
