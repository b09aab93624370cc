//! Diversity and coverage metrics over finished generations.
//!
//! Embeddings are the backbone's own final-layer states, mean-pooled over
//! generated tokens and L2-normalized. Values are comparable between runs of
//! this engine only, never with numbers produced by an external embedder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{SequenceOutput, StepTrace};
use crate::numerics::{self, dot, norm2, Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Normalized mean final-layer state of one finished sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEmbedding {
    pub seq: usize,
    pub prompt: usize,
    /// Unit norm, or all zeros when the generation was empty.
    pub vector: Vec<f64>,
}

impl GenerationEmbedding {
    /// `mean` is the mean of the decode-step states; `len` the token count.
    pub fn from_mean(seq: usize, prompt: usize, mean: &[f64], len: usize) -> Result<Self> {
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite("embedding"));
        }
        let n = norm2(mean);
        let vector = if len == 0 || n == 0.0 {
            vec![0.0; mean.len()]
        } else {
            mean.iter().map(|x| x / n).collect()
        };
        Ok(Self {
            seq,
            prompt,
            vector,
        })
    }

    pub fn from_sequence(s: &SequenceOutput) -> Result<Self> {
        Self::from_mean(s.seq, s.prompt, &s.mean_hidden, s.tokens.len())
    }

    /// Empty generations are excluded from pairwise statistics.
    pub fn is_empty(&self) -> bool {
        self.vector.iter().all(|&x| x == 0.0)
    }
}

fn unit_rows(embeddings: &[Vec<f64>], what: &'static str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(embeddings.len());
    let d = embeddings.first().map_or(0, Vec::len);
    for e in embeddings {
        if e.len() != d {
            return Err(MetricsError::Contract(format!(
                "{what}: mixed embedding dimensions"
            )));
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite(what));
        }
        let n = norm2(e);
        if n > 0.0 {
            out.push(e.iter().map(|x| x / n).collect());
        }
    }
    Ok(out)
}

/// Mean cosine similarity over all unordered pairs; zero vectors are excluded.
pub fn pairwise_cosine_mean(embeddings: &[Vec<f64>]) -> Result<f64> {
    let u = unit_rows(embeddings, "pairwise similarity")?;
    if u.len() < 2 {
        return Err(MetricsError::Contract(format!(
            "pairwise similarity needs at least 2 non-empty embeddings, got {}",
            u.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            sum += dot(&u[i], &u[j]);
            pairs += 1;
        }
    }
    Ok((sum / pairs as f64).clamp(-1.0, 1.0))
}

/// Cosine kernel with unit diagonal over the non-empty embeddings.
pub fn cosine_kernel(embeddings: &[Vec<f64>]) -> Result<Matrix> {
    let u = unit_rows(embeddings, "kernel")?;
    let n = u.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, 1.0);
        for j in i + 1..n {
            let c = dot(&u[i], &u[j]);
            k.set(i, j, c);
            k.set(j, i, c);
        }
    }
    Ok(k)
}

/// Exponential of the entropy of an eigenvalue spectrum; `0 ln 0 = 0` and
/// round-off negatives count as zero.
pub fn spectrum_exp_entropy(eigenvalues: &[f64]) -> f64 {
    let h: f64 = eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| -l * l.ln())
        .sum();
    h.exp()
}

/// Effective number of distinct embeddings, in `[1, n]`.
pub fn vendi_score(embeddings: &[Vec<f64>]) -> Result<f64> {
    let k = cosine_kernel(embeddings)?;
    let n = k.rows();
    if n == 0 {
        return Err(MetricsError::Contract(
            "vendi score needs at least 1 non-empty embedding".into(),
        ));
    }
    let mut scaled = k;
    for x in scaled.as_mut_slice() {
        *x /= n as f64;
    }
    let eig = numerics::sym_eigenvalues(&scaled)?;
    Ok(spectrum_exp_entropy(&eig).clamp(1.0, n as f64))
}

/// Unbiased probability that a size-`k` subset of `n` samples with `c`
/// correct contains a correct one: `1 − C(n−c, k)/C(n, k)` as a product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(MetricsError::Contract(format!(
            "pass@k needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if c > n {
        return Err(MetricsError::Contract(format!(
            "pass@k needs c <= n, got c={c}, n={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in n - c + 1..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Per-sequence correctness for a task with a programmatic checker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessVector(pub Vec<bool>);

impl CorrectnessVector {
    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn c(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `pass@k` for every `k` in `1..=n`.
    pub fn pass_at_k_grid(&self) -> Result<Vec<f64>> {
        (1..=self.n())
            .map(|k| pass_at_k(self.n(), self.c(), k))
            .collect()
    }
}

/// Pairwise similarity of running-mean prefix embeddings, one value per step.
///
/// `per_step[s][t]` is the final-layer state of sequence `s` at step `t`.
/// Step `t` uses every sequence that reached it; the curve ends at the first
/// step fewer than two sequences reached.
pub fn divergence_curve(per_step: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if per_step.len() < 2 {
        return Err(MetricsError::Contract(format!(
            "divergence curve needs at least 2 sequences, got {}",
            per_step.len()
        )));
    }
    let mut sums: Vec<Vec<f64>> = per_step
        .iter()
        .map(|s| vec![0.0; s.first().map_or(0, Vec::len)])
        .collect();
    let mut curve = Vec::new();
    for t in 0.. {
        let mut prefixes = Vec::new();
        for (s, sum) in per_step.iter().zip(sums.iter_mut()) {
            if let Some(h) = s.get(t) {
                if h.len() != sum.len() {
                    return Err(MetricsError::Contract(
                        "divergence curve: mixed state dimensions".into(),
                    ));
                }
                for (a, b) in sum.iter_mut().zip(h) {
                    *a += b;
                }
                // normalization makes the running mean and running sum equivalent
                prefixes.push(sum.clone());
            }
        }
        if prefixes.len() < 2 {
            break;
        }
        curve.push(pairwise_cosine_mean(&prefixes)?);
    }
    Ok(curve)
}

/// Number of distinct labels among the labelled samples.
pub fn distinct_coverage<T: Ord>(labels: &[Option<T>]) -> usize {
    let mut seen: Vec<&T> = labels.iter().flatten().collect();
    seen.sort();
    seen.dedup();
    seen.len()
}

/// Mean `−log π_ref` per generated token; a self-likelihood diagnostic that is
/// not comparable with externally judged perplexity.
pub fn self_nll_per_token(traces: &[StepTrace]) -> Option<f64> {
    if traces.is_empty() {
        return None;
    }
    Some(-traces.iter().map(|t| t.logp_ref).sum::<f64>() / traces.len() as f64)
}

/// Final-layer states per sequence, in step order, from hidden-detail traces.
pub fn states_by_sequence(traces: &[StepTrace]) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut rows: BTreeMap<usize, Vec<(usize, &Vec<f64>)>> = BTreeMap::new();
    for t in traces {
        if let Some(h) = &t.hidden {
            rows.entry(t.seq).or_default().push((t.step, h));
        }
    }
    rows.into_iter()
        .map(|(seq, mut v)| {
            v.sort_by_key(|(step, _)| *step);
            (seq, v.into_iter().map(|(_, h)| h.clone()).collect())
        })
        .collect()
}

/// Metrics of one prompt's sample group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub prompt: usize,
    pub sequences: usize,
    pub pairwise_similarity: Option<f64>,
    pub vendi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_curve: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_at_k: Option<Vec<f64>>,
}

/// Report keyed by metric name; the CLI adds seeds and the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: Vec<GroupMetrics>,
    /// Mean over groups that have the metric.
    pub pairwise_similarity: Option<f64>,
    pub vendi: Option<f64>,
    /// Labelled non-comparable: scored by the generating backbone itself.
    pub self_nll_per_token_noncomparable: Option<f64>,
    pub notices: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups sequences by prompt and computes every metric that applies.
///
/// `correct` marks sequences that pass the task checker, when one exists.
pub fn report(
    sequences: &[SequenceOutput],
    traces: &[StepTrace],
    correct: Option<&dyn Fn(&SequenceOutput) -> bool>,
) -> Result<MetricsReport> {
    let mut by_prompt: BTreeMap<usize, Vec<&SequenceOutput>> = BTreeMap::new();
    for s in sequences {
        by_prompt.entry(s.prompt).or_default().push(s);
    }
    let states = states_by_sequence(traces);
    let mut notices = Vec::new();
    let mut groups = Vec::new();
    for (prompt, seqs) in by_prompt {
        let emb = seqs
            .iter()
            .map(|s| GenerationEmbedding::from_sequence(s).map(|e| e.vector))
            .collect::<Result<Vec<_>>>()?;
        let non_empty = emb.iter().filter(|e| norm2(e) > 0.0).count();
        let (pairwise_similarity, vendi) = if non_empty < 2 {
            notices.push(format!(
                "prompt {prompt}: {non_empty} non-empty generation(s), pairwise metrics skipped"
            ));
            (None, if non_empty == 1 { Some(1.0) } else { None })
        } else {
            (Some(pairwise_cosine_mean(&emb)?), Some(vendi_score(&emb)?))
        };
        let per_step: Vec<Vec<Vec<f64>>> = seqs
            .iter()
            .filter_map(|s| states.get(&s.seq).cloned())
            .collect();
        let divergence_curve = if per_step.len() >= 2 && per_step.len() == seqs.len() {
            Some(divergence_curve(&per_step)?)
        } else {
            None
        };
        let pass_at_k = match correct {
            Some(f) => {
                Some(CorrectnessVector(seqs.iter().map(|s| f(s)).collect()).pass_at_k_grid()?)
            }
            None => None,
        };
        groups.push(GroupMetrics {
            prompt,
            sequences: seqs.len(),
            pairwise_similarity,
            vendi,
            divergence_curve,
            pass_at_k,
        });
    }
    if !traces.iter().any(|t| t.hidden.is_some()) {
        notices.push("traces carry no hidden states, divergence curves skipped".into());
    }
    Ok(MetricsReport {
        pairwise_similarity: mean(groups.iter().filter_map(|g| g.pairwise_similarity)),
        vendi: mean(groups.iter().filter_map(|g| g.vendi)),
        self_nll_per_token_noncomparable: self_nll_per_token(traces),
        groups,
        notices,
    })
}
