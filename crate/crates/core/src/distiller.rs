//! Online latent distiller: two residual gated-SwiGLU blocks mapping the
//! shallow hidden state `h¹` to a prediction of the deep state `h^L`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::{
    adam_step, gated_swiglu_apply, gated_swiglu_backward, gated_swiglu_forward, norm2, AdamConfig,
    AdamState, Matrix, NumericsError, SwiGluParams,
};
use crate::tensorfile::{FileKind, TensorFile, TensorFileError};

pub const BLOCKS: usize = 2;
pub const DEFAULT_INNER_WIDTH: usize = 384;

/// Rows per batch above which prediction fans out over threads.
const PAR_ROWS: usize = 4;

#[derive(Debug, Error)]
pub enum DistillerError {
    #[error("invalid distiller config: {0}")]
    Config(String),
    #[error("batch width {got} does not match distiller width {expected}")]
    Width { expected: usize, got: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("non-finite {0}; update skipped")]
    NonFinite(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Snapshot(#[from] TensorFileError),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DistillerError>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistillerConfig {
    pub hidden: usize,
    pub inner: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl DistillerConfig {
    pub fn new(hidden: usize, seed: u64) -> Self {
        Self {
            hidden,
            inner: DEFAULT_INNER_WIDTH,
            seed,
            adam: AdamConfig::default(),
        }
    }

    /// `BLOCKS · 3 · d · w`.
    pub fn param_count(&self) -> usize {
        BLOCKS * 3 * self.hidden * self.inner
    }
}

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    /// Batch-mean squared error before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillerState {
    config: DistillerConfig,
    blocks: Vec<SwiGluParams>,
    adam: AdamState,
    updates: u64,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
    .unwrap()
}

impl DistillerState {
    /// Seeded init: every matrix uniform in `±1/√fan_in`, Adam moments zero.
    pub fn new(config: DistillerConfig) -> Result<Self> {
        if config.hidden == 0 || config.inner == 0 {
            return Err(DistillerError::Config(format!(
                "widths must be positive, got d={} w={}",
                config.hidden, config.inner
            )));
        }
        let (d, w) = (config.hidden, config.inner);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..BLOCKS)
            .map(|_| SwiGluParams {
                gate: uniform_matrix(&mut rng, d, w),
                up: uniform_matrix(&mut rng, d, w),
                down: uniform_matrix(&mut rng, w, d),
                version: 0,
            })
            .collect();
        Ok(Self::from_blocks(config, blocks))
    }

    /// All-zero parameters: the distiller is the identity map.
    pub fn zeros(config: DistillerConfig) -> Self {
        let blocks = (0..BLOCKS)
            .map(|_| SwiGluParams::zeros(config.hidden, config.inner))
            .collect();
        Self::from_blocks(config, blocks)
    }

    fn from_blocks(config: DistillerConfig, blocks: Vec<SwiGluParams>) -> Self {
        let shapes: Vec<usize> = blocks
            .iter()
            .flat_map(|b: &SwiGluParams| {
                [
                    b.gate.as_slice().len(),
                    b.up.as_slice().len(),
                    b.down.as_slice().len(),
                ]
            })
            .collect();
        Self {
            adam: AdamState::new(config.adam, &shapes),
            config,
            blocks,
            updates: 0,
        }
    }

    pub fn config(&self) -> &DistillerConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(SwiGluParams::param_count).sum()
    }

    /// Parameter tensors in the fixed order gate, up, down per block.
    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| [b.gate.as_slice(), b.up.as_slice(), b.down.as_slice()])
            .collect()
    }

    /// Mutable parameter tensors, same order as [`DistillerState::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                b.version += 1;
                [
                    b.gate.as_mut_slice(),
                    b.up.as_mut_slice(),
                    b.down.as_mut_slice(),
                ]
            })
            .collect()
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.config.hidden {
            return Err(DistillerError::Width {
                expected: self.config.hidden,
                got,
            });
        }
        Ok(())
    }

    /// `f(h¹)` for one row.
    pub fn predict_row(&self, h1: &[f64]) -> Result<Vec<f64>> {
        self.check_width(h1.len())?;
        let mut x = h1.to_vec();
        for b in &self.blocks {
            let y = gated_swiglu_apply(&x, b)?;
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
        }
        Ok(x)
    }

    /// Rowwise `f(h¹)`; every row is bit-identical to [`DistillerState::predict_row`].
    pub fn predict(&self, h1: &Matrix) -> Result<Matrix> {
        self.check_width(h1.cols())?;
        let rows: Vec<usize> = (0..h1.rows()).collect();
        let out: Vec<Vec<f64>> = if h1.rows() >= PAR_ROWS {
            rows.par_iter()
                .map(|&r| self.predict_row(h1.row(r)))
                .collect::<Result<_>>()?
        } else {
            rows.iter()
                .map(|&r| self.predict_row(h1.row(r)))
                .collect::<Result<_>>()?
        };
        Ok(Matrix::from_vec(h1.rows(), h1.cols(), out.concat())?)
    }

    /// `(e, ‖e‖)` with `e = h^L − f(h¹)`.
    pub fn novelty_error(&self, h1: &[f64], hl: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_width(hl.len())?;
        let pred = self.predict_row(h1)?;
        let e: Vec<f64> = hl.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let n = norm2(&e);
        Ok((e, n))
    }

    fn check_batch(&self, h1: &Matrix, hl: &Matrix) -> Result<()> {
        self.check_width(h1.cols())?;
        self.check_width(hl.cols())?;
        if h1.rows() == 0 {
            return Err(DistillerError::EmptyBatch);
        }
        if hl.rows() != h1.rows() {
            return Err(DistillerError::Numerics(NumericsError::Shape(format!(
                "{} shallow rows but {} deep rows",
                h1.rows(),
                hl.rows()
            ))));
        }
        if !h1.is_finite() {
            return Err(DistillerError::NonFinite("shallow hidden states"));
        }
        if !hl.is_finite() {
            return Err(DistillerError::NonFinite("deep hidden states"));
        }
        Ok(())
    }

    /// Batch-mean squared error `(1/B) Σ ‖h^L_i − f(h¹_i)‖²`.
    pub fn loss(&self, h1: &Matrix, hl: &Matrix) -> Result<f64> {
        self.check_batch(h1, hl)?;
        let pred = self.predict(h1)?;
        let sq: f64 = pred
            .as_slice()
            .iter()
            .zip(hl.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(sq / h1.rows() as f64)
    }

    /// Loss and its exact gradient with respect to every parameter tensor.
    pub fn loss_and_grads(&self, h1: &Matrix, hl: &Matrix) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_batch(h1, hl)?;
        let b = h1.rows() as f64;
        let mut caches = Vec::with_capacity(BLOCKS);
        let mut x = h1.clone();
        for p in &self.blocks {
            let (y, cache) = gated_swiglu_forward(&x, p)?;
            for (xi, yi) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *xi += yi;
            }
            caches.push(cache);
        }
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        for ((g, p), t) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(x.as_slice())
            .zip(hl.as_slice())
        {
            let r = p - t;
            loss += r * r;
            *g = 2.0 * r / b;
        }
        let mut grads = vec![Vec::new(); 3 * BLOCKS];
        for (i, (p, cache)) in self.blocks.iter().zip(&caches).enumerate().rev() {
            let (gx, gp) = gated_swiglu_backward(&grad, cache, p)?;
            // residual: d(x + f(x))/dx passes the incoming gradient through
            for (g, d) in grad.as_mut_slice().iter_mut().zip(gx.as_slice()) {
                *g += d;
            }
            grads[3 * i] = gp.gate.into_vec();
            grads[3 * i + 1] = gp.up.into_vec();
            grads[3 * i + 2] = gp.down.into_vec();
        }
        Ok((loss / b, grads))
    }

    /// One clipped Adam update on the batch. The reported loss is measured
    /// before the update. Non-finite inputs or gradients skip the update.
    pub fn train_step(&mut self, h1: &Matrix, hl: &Matrix) -> Result<TrainReport> {
        let (loss, grads) = self.loss_and_grads(h1, hl)?;
        if !loss.is_finite() {
            return Err(DistillerError::NonFinite("loss"));
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [f64]> = self
            .blocks
            .iter_mut()
            .flat_map(|b| {
                b.version += 1;
                [
                    b.gate.as_mut_slice(),
                    b.up.as_mut_slice(),
                    b.down.as_mut_slice(),
                ]
            })
            .collect();
        let report = adam_step(&mut params, &grad_refs, &mut self.adam).map_err(|e| match e {
            NumericsError::NonFinite(_) => DistillerError::NonFinite("gradients"),
            other => other.into(),
        })?;
        self.updates += 1;
        Ok(TrainReport {
            loss,
            grad_norm: report.grad_norm,
            clip_scale: report.clip_scale,
        })
    }

    /// Snapshot fields: hidden, inner, blocks, seed, updates, adam step, then
    /// lr, eps, clip, β1, β2 as f64 bit patterns. Tensors: the six parameter
    /// tensors, then their first moments, then their second moments.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        let a = &c.adam;
        let mut tensors: Vec<Vec<f64>> = self.params().into_iter().map(<[f64]>::to_vec).collect();
        tensors.extend(self.adam.m.iter().cloned());
        tensors.extend(self.adam.v.iter().cloned());
        TensorFile {
            kind: FileKind::Distiller,
            fields: vec![
                c.hidden as u64,
                c.inner as u64,
                BLOCKS as u64,
                c.seed,
                self.updates,
                self.adam.t,
                a.lr.to_bits(),
                a.eps.to_bits(),
                a.clip_norm.to_bits(),
                a.beta1.to_bits(),
                a.beta2.to_bits(),
            ],
            tensors,
        }
        .write_to(w)
        .map_err(|e| DistillerError::Snapshot(e.into()))
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let file = TensorFile::read_from(r, FileKind::Distiller)?;
        let f = &file.fields;
        if f.len() != 11 {
            return Err(DistillerError::Malformed(format!(
                "{} header fields, expected 11",
                f.len()
            )));
        }
        if f[2] != BLOCKS as u64 {
            return Err(DistillerError::Malformed(format!(
                "{} blocks, expected {BLOCKS}",
                f[2]
            )));
        }
        let config = DistillerConfig {
            hidden: f[0] as usize,
            inner: f[1] as usize,
            seed: f[3],
            adam: AdamConfig {
                lr: f64::from_bits(f[6]),
                eps: f64::from_bits(f[7]),
                clip_norm: f64::from_bits(f[8]),
                beta1: f64::from_bits(f[9]),
                beta2: f64::from_bits(f[10]),
            },
        };
        let mut state = Self::zeros(config);
        let n = 3 * BLOCKS;
        if file.tensors.len() != 3 * n {
            return Err(DistillerError::Malformed(format!(
                "{} tensors, expected {}",
                file.tensors.len(),
                3 * n
            )));
        }
        let mut tensors = file.tensors.into_iter();
        for dst in state.params_mut() {
            let t = tensors.next().expect("count checked");
            if t.len() != dst.len() {
                return Err(DistillerError::Malformed("parameter tensor size".into()));
            }
            dst.copy_from_slice(&t);
        }
        for b in &mut state.blocks {
            b.version = 0;
        }
        let m: Vec<Vec<f64>> = tensors.by_ref().take(n).collect();
        let v: Vec<Vec<f64>> = tensors.collect();
        if m.iter()
            .chain(&v)
            .zip(state.adam.m.iter().chain(&state.adam.v))
            .any(|(a, b)| a.len() != b.len())
        {
            return Err(DistillerError::Malformed("moment tensor size".into()));
        }
        state.adam.m = m;
        state.adam.v = v;
        state.adam.t = f[5];
        state.updates = f[4];
        Ok(state)
    }
}

/// How distillers are shared among the sequences of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillerScope {
    /// One distiller for every sequence of the session.
    #[default]
    Shared,
    /// One distiller per prompt, shared by that prompt's samples.
    PerPrompt,
}

impl DistillerScope {
    /// Slot serving sequences of `prompt`.
    pub fn route(self, prompt: usize) -> usize {
        match self {
            DistillerScope::Shared => 0,
            DistillerScope::PerPrompt => prompt,
        }
    }
}

/// The distillers of one session, keyed by routing slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillerBank {
    scope: DistillerScope,
    states: BTreeMap<usize, DistillerState>,
}

impl DistillerBank {
    /// Every distiller of the bank starts from the same seeded init.
    pub fn new(scope: DistillerScope, config: DistillerConfig, prompts: usize) -> Result<Self> {
        let slots = match scope {
            DistillerScope::Shared => 1,
            DistillerScope::PerPrompt => prompts.max(1),
        };
        let init = DistillerState::new(config)?;
        Ok(Self {
            scope,
            states: (0..slots).map(|s| (s, init.clone())).collect(),
        })
    }

    pub fn scope(&self) -> DistillerScope {
        self.scope
    }

    /// Slot serving `prompt`.
    pub fn route(&self, prompt: usize) -> usize {
        self.scope.route(prompt)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&DistillerState> {
        self.states.get(&slot)
    }

    pub fn get_mut(&mut self, slot: usize) -> Option<&mut DistillerState> {
        self.states.get_mut(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DistillerState)> {
        self.states.iter().map(|(k, v)| (*k, v))
    }
}
