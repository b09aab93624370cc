//! Run configuration: flat `key = value` text or a flat JSON object, with
//! command-line overrides applied last.
//!
//! Every key has a default; [`RunConfig::pairs`] lists the resolved value of
//! every key in a fixed order, and the config hash is taken over that listing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use esamp_core::backbone::{BackboneSpec, SyntheticConfig, TokenId};
use esamp_core::distiller::DistillerScope;
use esamp_core::engine::{Method, PipelineMode, SessionConfig, TraceDetail};
use esamp_core::sampler::{Ablation, FilterPolicy, FusionForm, Placement};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Tiny,
    Synthetic,
    /// Synthetic model with the slow-branching exploration preset.
    SyntheticExploration,
}

impl BackboneKind {
    fn name(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Synthetic => "synthetic",
            BackboneKind::SyntheticExploration => "synthetic-exploration",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != BackboneKind::Tiny
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub checkpoint: Option<PathBuf>,
    pub model: BackboneSpec,
    pub synthetic: SyntheticConfig,
    pub prompts: usize,
    pub prompt_len: usize,
    pub prompt_tokens: Option<Vec<Vec<TokenId>>>,
    /// `None` picks the backbone's natural horizon.
    pub horizon: Option<usize>,
    pub session: SessionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            checkpoint: None,
            // room for a 256-token horizon after the prompt
            model: BackboneSpec {
                max_context: 512,
                ..BackboneSpec::default()
            },
            synthetic: SyntheticConfig::default(),
            prompts: 1,
            prompt_len: 4,
            prompt_tokens: None,
            horizon: None,
            session: SessionConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse::<T>()
        .map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> std::result::Result<T, String> {
    options
        .iter()
        .find(|(n, _)| *n == v.trim())
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}, got {v:?}", names.join(" | "))
        })
}

const BACKBONES: &[(&str, BackboneKind)] = &[
    ("tiny", BackboneKind::Tiny),
    ("synthetic", BackboneKind::Synthetic),
    ("synthetic-exploration", BackboneKind::SyntheticExploration),
];
const METHODS: &[(&str, Method)] = &[("esamp", Method::Esamp), ("vanilla", Method::Vanilla)];
const PIPELINES: &[(&str, PipelineMode)] =
    &[("sync", PipelineMode::Sync), ("async", PipelineMode::Async)];
const SCOPES: &[(&str, DistillerScope)] = &[
    ("shared", DistillerScope::Shared),
    ("per-prompt", DistillerScope::PerPrompt),
];
const TRACES: &[(&str, TraceDetail)] = &[
    ("basic", TraceDetail::Basic),
    ("hidden", TraceDetail::Hidden),
    ("full", TraceDetail::Full),
];
const PLACEMENTS: &[(&str, Placement)] = &[
    ("latent-mix", Placement::LatentMix),
    ("post-filter", Placement::PostFilter),
];
const ABLATIONS: &[(&str, Ablation)] = &[
    ("off", Ablation::Off),
    ("matched-noise", Ablation::MatchedNoise),
];
const FORMS: &[(&str, FusionForm)] = &[
    ("standard", FusionForm::Standard),
    ("subtraction", FusionForm::Subtraction),
];

fn name_of<T: Copy + PartialEq>(options: &[(&'static str, T)], t: T) -> &'static str {
    options
        .iter()
        .find(|(_, x)| *x == t)
        .map(|(n, _)| *n)
        .expect("every variant is named")
}

fn parse_filter(v: &str) -> std::result::Result<FilterPolicy, String> {
    let v = v.trim();
    if v == "none" {
        return Ok(FilterPolicy::None);
    }
    let (kind, arg) = v
        .split_once(':')
        .ok_or_else(|| format!("expected none | top-k:N | top-p:X | min-p:X, got {v:?}"))?;
    let f = match kind {
        "top-k" => FilterPolicy::TopK(parse(arg)?),
        "top-p" => FilterPolicy::TopP(parse(arg)?),
        "min-p" => FilterPolicy::MinP(parse(arg)?),
        _ => return Err(format!("unknown filter {kind:?}")),
    };
    f.validate().map_err(|e| e.to_string())?;
    Ok(f)
}

fn filter_name(f: FilterPolicy) -> String {
    match f {
        FilterPolicy::None => "none".into(),
        FilterPolicy::TopK(k) => format!("top-k:{k}"),
        FilterPolicy::TopP(p) => format!("top-p:{p}"),
        FilterPolicy::MinP(p) => format!("min-p:{p}"),
    }
}

/// `"1 2 3; 4 5"`: prompts separated by `;`, tokens by spaces or commas.
fn parse_prompts(v: &str) -> std::result::Result<Vec<Vec<TokenId>>, String> {
    let prompts: Vec<Vec<TokenId>> = v
        .split(';')
        .map(|p| {
            p.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(parse)
                .collect()
        })
        .collect::<std::result::Result<_, _>>()?;
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err("every prompt needs at least one token".into());
    }
    Ok(prompts)
}

fn prompts_name(p: &[Vec<TokenId>]) -> String {
    p.iter()
        .map(|t| {
            t.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub const KEYS: &[&str] = &[
    "backbone",
    "checkpoint",
    "model.vocab",
    "model.hidden",
    "model.layers",
    "model.heads",
    "model.context",
    "model.seed",
    "synthetic.modes",
    "synthetic.tokens_per_mode",
    "synthetic.fillers",
    "synthetic.hidden",
    "synthetic.window",
    "synthetic.decay",
    "synthetic.prompt_scale",
    "synthetic.hazard",
    "synthetic.branch_start",
    "synthetic.branch_deadline",
    "synthetic.mode_logit",
    "synthetic.floor",
    "synthetic.null_gain",
    "synthetic.head_gain",
    "synthetic.seed",
    "prompts",
    "prompt_len",
    "prompt_tokens",
    "k",
    "t",
    "seed",
    "method",
    "beta",
    "temperature",
    "filter",
    "placement",
    "ablation",
    "fusion_form",
    "scope",
    "distiller_inner",
    "lr",
    "eps",
    "clip",
    "train_every",
    "pipeline",
    "rendezvous_timeout_ms",
    "trace",
];

impl RunConfig {
    /// Sets one key. Choosing `backbone = synthetic-exploration` loads the
    /// preset into `synthetic.*`, so later `synthetic.*` keys refine it.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let s = &mut self.session;
        let y = &mut self.synthetic;
        let m = &mut self.model;
        match key {
            "backbone" => {
                self.backbone = choice(value, BACKBONES)?;
                if self.backbone == BackboneKind::SyntheticExploration {
                    *y = SyntheticConfig {
                        seed: y.seed,
                        ..SyntheticConfig::exploration()
                    };
                }
            }
            "checkpoint" => {
                let v = value.trim();
                self.checkpoint = (!v.is_empty() && v != "none").then(|| PathBuf::from(v));
            }
            "model.vocab" => m.vocab_size = parse(value)?,
            "model.hidden" => m.hidden = parse(value)?,
            "model.layers" => m.layers = parse(value)?,
            "model.heads" => m.heads = parse(value)?,
            "model.context" => m.max_context = parse(value)?,
            "model.seed" => m.seed = parse(value)?,
            "synthetic.modes" => y.modes = parse(value)?,
            "synthetic.tokens_per_mode" => y.tokens_per_mode = parse(value)?,
            "synthetic.fillers" => y.fillers = parse(value)?,
            "synthetic.hidden" => y.hidden = parse(value)?,
            "synthetic.window" => y.window = parse(value)?,
            "synthetic.decay" => y.decay = parse(value)?,
            "synthetic.prompt_scale" => y.prompt_scale = parse(value)?,
            "synthetic.hazard" => y.hazard = parse(value)?,
            "synthetic.branch_start" => y.branch_start = parse(value)?,
            "synthetic.branch_deadline" => y.branch_deadline = parse(value)?,
            "synthetic.mode_logit" => y.mode_logit = parse(value)?,
            "synthetic.floor" => y.floor = parse(value)?,
            "synthetic.null_gain" => y.null_gain = parse(value)?,
            "synthetic.head_gain" => y.head_gain = parse(value)?,
            "synthetic.seed" => y.seed = parse(value)?,
            "prompts" => self.prompts = parse(value)?,
            "prompt_len" => self.prompt_len = parse(value)?,
            "prompt_tokens" => {
                let v = value.trim();
                self.prompt_tokens = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse_prompts(v)?)
                };
            }
            "k" => s.samples_per_prompt = parse(value)?,
            "t" => {
                let v = value.trim();
                self.horizon = if v == "auto" { None } else { Some(parse(v)?) };
            }
            "seed" => s.seed = parse(value)?,
            "method" => s.method = choice(value, METHODS)?,
            "beta" => s.fusion.beta = parse(value)?,
            "temperature" => s.fusion.temperature = parse(value)?,
            "filter" => s.fusion.filter = parse_filter(value)?,
            "placement" => s.fusion.placement = choice(value, PLACEMENTS)?,
            "ablation" => s.fusion.ablation = choice(value, ABLATIONS)?,
            "fusion_form" => s.fusion.form = choice(value, FORMS)?,
            "scope" => s.scope = choice(value, SCOPES)?,
            "distiller_inner" => s.distiller_inner = parse(value)?,
            "lr" => s.adam.lr = parse(value)?,
            "eps" => s.adam.eps = parse(value)?,
            "clip" => s.adam.clip_norm = parse(value)?,
            "train_every" => s.train_every = parse(value)?,
            "pipeline" => s.pipeline = choice(value, PIPELINES)?,
            "rendezvous_timeout_ms" => s.rendezvous_timeout_ms = parse(value)?,
            "trace" => s.trace = choice(value, TRACES)?,
            _ => return Err(format!("unknown key (known keys: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies a config file. JSON is recognised by a leading `{`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut errors = Vec::new();
        if text.trim_start().starts_with('{') {
            let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)
                .with_context(|| format!("config {} is not a flat JSON object", path.display()))?;
            for (k, v) in map {
                let value = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    other => {
                        errors.push(format!("{k}: expected a scalar, got {other}"));
                        continue;
                    }
                };
                if let Err(e) = self.set(&k, &value) {
                    errors.push(format!("{k}: {e}"));
                }
            }
        } else {
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => {
                        if let Err(e) = self.set(k.trim(), v.trim()) {
                            errors.push(format!("line {}: {}: {e}", i + 1, k.trim()));
                        }
                    }
                    None => errors.push(format!("line {}: expected `key = value`", i + 1)),
                }
            }
        }
        if !errors.is_empty() {
            bail!(
                "invalid config {}:\n  {}",
                path.display(),
                errors.join("\n  ")
            );
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let errors: Vec<String> = overrides
            .iter()
            .filter_map(|(k, v)| self.set(k, v).err().map(|e| format!("{k}: {e}")))
            .collect();
        if !errors.is_empty() {
            bail!("invalid option(s):\n  {}", errors.join("\n  "));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        if self.backbone.is_synthetic() {
            self.synthetic.vocab_size()
        } else {
            self.model.vocab_size
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.backbone {
            BackboneKind::SyntheticExploration => SyntheticConfig::EXPLORATION_HORIZON,
            _ => 32,
        })
    }

    /// Session settings with the resolved horizon.
    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            max_new_tokens: self.horizon(),
            ..self.session.clone()
        }
    }

    /// Explicit prompts, or `prompts` deterministic prompts of `prompt_len`
    /// tokens spread over the vocabulary.
    pub fn prompt_list(&self) -> Result<Vec<Vec<TokenId>>> {
        if let Some(p) = &self.prompt_tokens {
            return Ok(p.clone());
        }
        if self.prompts == 0 || self.prompt_len == 0 {
            bail!("prompts and prompt_len must be positive");
        }
        let v = self.vocab_size();
        Ok((0..self.prompts)
            .map(|i| {
                (0..self.prompt_len)
                    .map(|j| (1 + 3 * i + 7 * j) % v)
                    .collect()
            })
            .collect())
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = self.session();
        let y = &self.synthetic;
        let m = &self.model;
        let prompt_tokens = self
            .prompt_tokens
            .as_deref()
            .map_or("none".into(), prompts_name);
        let values: Vec<String> = vec![
            self.backbone.name().into(),
            self.checkpoint
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            m.vocab_size.to_string(),
            m.hidden.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.max_context.to_string(),
            m.seed.to_string(),
            y.modes.to_string(),
            y.tokens_per_mode.to_string(),
            y.fillers.to_string(),
            y.hidden.to_string(),
            y.window.to_string(),
            y.decay.to_string(),
            y.prompt_scale.to_string(),
            y.hazard.to_string(),
            y.branch_start.to_string(),
            y.branch_deadline.to_string(),
            y.mode_logit.to_string(),
            y.floor.to_string(),
            y.null_gain.to_string(),
            y.head_gain.to_string(),
            y.seed.to_string(),
            self.prompts.to_string(),
            self.prompt_len.to_string(),
            prompt_tokens,
            s.samples_per_prompt.to_string(),
            s.max_new_tokens.to_string(),
            s.seed.to_string(),
            name_of(METHODS, s.method).into(),
            s.fusion.beta.to_string(),
            s.fusion.temperature.to_string(),
            filter_name(s.fusion.filter),
            name_of(PLACEMENTS, s.fusion.placement).into(),
            name_of(ABLATIONS, s.fusion.ablation).into(),
            name_of(FORMS, s.fusion.form).into(),
            name_of(SCOPES, s.scope).into(),
            s.distiller_inner.to_string(),
            s.adam.lr.to_string(),
            s.adam.eps.to_string(),
            s.adam.clip_norm.to_string(),
            s.train_every.to_string(),
            name_of(PIPELINES, s.pipeline).into(),
            s.rendezvous_timeout_ms.to_string(),
            name_of(TRACES, s.trace).into(),
        ];
        let mut pairs: Vec<(String, String)> =
            KEYS.iter().map(|k| k.to_string()).zip(values).collect();
        // fault injection never hides in a hash collision with a clean run
        if s.fusion.fault_flip_sign {
            pairs.push(("fault_flip_sign".into(), "true".into()));
        }
        pairs
    }

    /// Resolved config as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn hash(&self) -> String {
        hash_hex(self.render().as_bytes())
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
