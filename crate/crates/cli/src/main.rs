//! `esamp`: decode, benchmark, ablate, verify and score exploratory sampling
//! runs. Every command writes its outputs and a `manifest.json` into one
//! directory.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use esamp_core::backbone::{Backbone, BackboneSpec, SyntheticBranchModel, TinyTransformer};
use esamp_core::bench::{measure_throughput, BenchArm};
use esamp_core::engine::{run_session, DecodeSession, SequenceOutput, StepTrace, TraceDetail};
use esamp_core::experiment::paired_coverage;
use esamp_core::metrics::{self, MetricsReport};
use esamp_core::verify::{audit_session, run_kl_suite, run_mdp_suite, VerifyReport};
use serde::Serialize;

use config::{hash_hex, RunConfig};
use manifest::RunDir;

#[derive(Parser)]
#[command(
    name = "esamp",
    version,
    about = "Exploratory sampling with an online latent distiller"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a session and write traces, timings, generations and a manifest.
    Decode(RunArgs),
    /// Time vanilla, sync and async decoding of the configured session.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Timed repetitions per arm.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Untimed repetitions per arm.
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Paired-seed mode coverage of vanilla, matched-noise and true-error
    /// fusion on a synthetic backbone.
    AblateNoise {
        #[command(flatten)]
        run: RunArgs,
        /// Number of paired seeds, starting at the configured seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Check the closed-form policy, the toy-MDP value identity and the
    /// fusion identities of an audited session. Exits 1 on any failure.
    Verify(VerifyArgs),
    /// Similarity, Vendi, Pass@k and divergence curves of decoded runs.
    Metrics(MetricsArgs),
}

/// Config file plus overrides; overrides win over the file.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// `key = value` file or flat JSON object.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// tiny | synthetic | synthetic-exploration
    #[arg(long)]
    backbone: Option<String>,
    /// esamp | vanilla
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    /// Samples per prompt.
    #[arg(long)]
    k: Option<String>,
    /// New tokens per sequence, or `auto`.
    #[arg(long)]
    t: Option<String>,
    /// Number of generated prompts.
    #[arg(long)]
    prompts: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// sync | async
    #[arg(long)]
    pipeline: Option<String>,
    /// shared | per-prompt
    #[arg(long)]
    scope: Option<String>,
    /// basic | hidden | full
    #[arg(long)]
    trace: Option<String>,
    /// Output directory; defaults to `esamp-runs/<command>-<hash>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let mut o: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            o.push((k.trim().into(), v.trim().into()));
        }
        let named = [
            ("backbone", &self.backbone),
            ("method", &self.method),
            ("beta", &self.beta),
            ("k", &self.k),
            ("t", &self.t),
            ("prompts", &self.prompts),
            ("seed", &self.seed),
            ("pipeline", &self.pipeline),
            ("scope", &self.scope),
            ("trace", &self.trace),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                o.push((k.into(), v.clone()));
            }
        }
        c.apply_overrides(&o)?;
        Ok(c)
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Random simplex problems for the closed-form check.
    #[arg(long, default_value_t = 200)]
    kl_problems: usize,
    /// Random perturbations per problem for the local-optimality check.
    #[arg(long, default_value_t = 32)]
    perturbations: usize,
    /// Toy MDPs per rule and discount.
    #[arg(long, default_value_t = 50)]
    mdp_per_gamma: usize,
    /// Decode steps per sequence of the audited session (two sequences).
    #[arg(long, default_value_t = 250)]
    audit_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Flips the sign of β in fusion so the audit must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// `traces.jsonl` files or run directories containing one.
    #[arg(required = true, value_name = "TRACES")]
    traces: Vec<PathBuf>,
    /// A generation is correct when it contains this token.
    #[arg(long)]
    correct_token: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

enum Model {
    Tiny(TinyTransformer),
    Synthetic(SyntheticBranchModel),
}

/// Runs `$body` with `$b` bound to the concrete backbone.
macro_rules! with_model {
    ($m:expr, $b:ident => $body:expr) => {
        match $m {
            Model::Tiny($b) => $body,
            Model::Synthetic($b) => $body,
        }
    };
}

/// Builds the backbone; a checkpoint replaces the `model.*` keys.
fn load_model(cfg: &mut RunConfig) -> Result<(Model, Option<String>)> {
    if cfg.backbone.is_synthetic() {
        return Ok((
            Model::Synthetic(SyntheticBranchModel::new(cfg.synthetic)?),
            None,
        ));
    }
    match &cfg.checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let m = TinyTransformer::load(&mut bytes.as_slice())
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            cfg.model = *m.spec();
            Ok((Model::Tiny(m), Some(hash_hex(&bytes))))
        }
        None => Ok((Model::Tiny(TinyTransformer::new(cfg.model)?), None)),
    }
}

fn out_dir(out: &Option<PathBuf>, command: &str, hash: &str) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from("esamp-runs").join(format!("{command}-{}", &hash[..12])))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn cmd_decode(args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = args.resolve()?;
    let (model, checkpoint_hash) = load_model(&mut cfg)?;
    let prompts = cfg.prompt_list()?;
    let session = cfg.session();
    let hash = cfg.hash();
    let mut run = RunDir::create(
        &out_dir(&args.out, "decode", &hash),
        "decode",
        cfg.pairs(),
        hash,
        session.seed,
    )?;
    let out = with_model!(&model, b => run_session(&DecodeSession::new(b, prompts.clone(), session.clone())))?;
    run.write("traces.jsonl", out.traces_jsonl())?;
    run.write("timings.jsonl", jsonl(&out.timings)?)?;
    run.write("generations.jsonl", jsonl(&out.sequences)?)?;
    run.write_json("stats.json", &out.stats)?;
    let states = out.distillers.as_ref().map_or(0, |b| b.len());
    let summary = serde_json::json!({
        "prompts": prompts.len(),
        "sequences": out.sequences.len(),
        "distiller_states": states,
        "steps": out.stats.steps,
        "distiller_updates": out.stats.total_updates(),
        "fallbacks": out.stats.fallbacks,
        "truncated": out.stats.truncated,
        "wall_ms": out.wall.as_secs_f64() * 1e3,
        "checkpoint_sha256": checkpoint_hash,
    });
    let dir = run.path().to_path_buf();
    run.finish(summary)?;
    println!(
        "decoded {} sequences x {} steps ({} distiller state(s), {} updates) in {:.1} ms -> {}",
        out.sequences.len(),
        out.stats.steps,
        states,
        out.stats.total_updates(),
        out.wall.as_secs_f64() * 1e3,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &RunArgs, reps: usize, warmup: usize) -> Result<ExitCode> {
    let mut cfg = args.resolve()?;
    let (model, _) = load_model(&mut cfg)?;
    let prompts = cfg.prompt_list()?;
    let session = cfg.session();
    let hash = cfg.hash();
    let mut run = RunDir::create(
        &out_dir(&args.out, "bench", &hash),
        "bench",
        cfg.pairs(),
        hash,
        session.seed,
    )?;
    let r = with_model!(&model, b => measure_throughput(b, &prompts, &session, warmup, reps))?;
    run.write_json("bench.json", &r)?;
    if let Some(from) = r.lengthened_from {
        println!(
            "sessions of {from} tokens were too short to time; lengthened to {}",
            r.max_new_tokens
        );
    }
    println!("arm          median ms   tokens/s   overlap");
    for a in &r.arms {
        println!(
            "{:<12} {:>9.2} {:>10.0} {:>9.3}",
            serde_json::to_value(a.arm)?.as_str().unwrap_or_default(),
            a.median_wall_ns as f64 * 1e-6,
            a.tokens_per_sec,
            a.predict_overlap
        );
    }
    println!(
        "overhead vs vanilla: sync {:+.1}%  async {:+.1}%  ({} core(s))",
        r.sync_overhead_pct, r.async_overhead_pct, r.available_cores
    );
    run.finish(serde_json::json!({
        "sync_overhead_pct": r.sync_overhead_pct,
        "async_overhead_pct": r.async_overhead_pct,
        "async_tokens_per_sec": r.arm(BenchArm::EsampAsync).tokens_per_sec,
        "max_new_tokens": r.max_new_tokens,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: &RunArgs, seeds: u64) -> Result<ExitCode> {
    let mut cfg = args.resolve()?;
    if !cfg.backbone.is_synthetic() {
        bail!("ablate-noise needs a synthetic backbone (backbone = synthetic | synthetic-exploration): modes must be checkable");
    }
    if seeds < 2 {
        bail!("ablate-noise needs at least 2 seeds for a paired interval");
    }
    let (model, _) = load_model(&mut cfg)?;
    let Model::Synthetic(model) = model else {
        unreachable!("checked above")
    };
    let prompts = cfg.prompt_list()?;
    let session = cfg.session();
    let hash = cfg.hash();
    let mut run = RunDir::create(
        &out_dir(&args.out, "ablate-noise", &hash),
        "ablate-noise",
        cfg.pairs(),
        hash,
        session.seed,
    )?;
    let seed_list: Vec<u64> = (session.seed..session.seed + seeds).collect();
    let r = paired_coverage(&model, &prompts, &session, &seed_list)?;
    run.write_json("ablation.json", &r)?;

    let mut cov = String::from(
        "seed,vanilla,noise,esamp,vanilla_similarity,noise_similarity,esamp_similarity\n",
    );
    for t in &r.triples {
        let sim = |o: &esamp_core::experiment::ArmOutcome| {
            o.final_similarity()
                .map_or(String::new(), |x| x.to_string())
        };
        writeln!(
            cov,
            "{},{},{},{},{},{},{}",
            t.seed,
            t.vanilla.coverage,
            t.noise.coverage,
            t.esamp.coverage,
            sim(&t.vanilla),
            sim(&t.noise),
            sim(&t.esamp)
        )?;
    }
    run.write("coverage.csv", cov)?;
    let mut div = String::from("step,vanilla,noise,esamp\n");
    let curve = |f: fn(&esamp_core::experiment::SeedTriple) -> &Vec<f64>| {
        let len = r.triples.iter().map(|t| f(t).len()).min().unwrap_or(0);
        (0..len)
            .map(|i| r.triples.iter().map(|t| f(t)[i]).sum::<f64>() / r.triples.len() as f64)
            .collect::<Vec<_>>()
    };
    let (v, n, e) = (
        curve(|t| &t.vanilla.divergence),
        curve(|t| &t.noise.divergence),
        curve(|t| &t.esamp.divergence),
    );
    for i in 0..v.len().min(n.len()).min(e.len()) {
        writeln!(div, "{i},{},{},{}", v[i], n[i], e[i])?;
    }
    run.write("divergence.csv", div)?;

    let ci = |d: &esamp_core::experiment::PairedDifference| {
        format!("{:+.3} [{:+.3}, {:+.3}]", d.mean, d.lower, d.upper)
    };
    println!(
        "mean coverage over {} seeds: vanilla {:.3} (uniform expectation {:.3}), noise {:.3}, esamp {:.3}",
        r.triples.len(),
        r.mean_vanilla,
        r.vanilla_expectation,
        r.mean_noise,
        r.mean_esamp
    );
    println!("esamp - vanilla {}", ci(&r.esamp_minus_vanilla));
    println!("noise - vanilla {}", ci(&r.noise_minus_vanilla));
    println!("esamp - noise   {}", ci(&r.esamp_minus_noise));
    println!(
        "esamp final similarity <= vanilla in {}/{} seeds",
        r.similarity_wins,
        r.triples.len()
    );
    run.finish(serde_json::json!({
        "mean_vanilla": r.mean_vanilla,
        "mean_noise": r.mean_noise,
        "mean_esamp": r.mean_esamp,
        "similarity_wins": r.similarity_wins,
        "seeds": r.triples.len(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

/// Tiny transformer and session audited by `verify`.
fn audit_setup(args: &VerifyArgs) -> (BackboneSpec, esamp_core::engine::SessionConfig) {
    let spec = BackboneSpec {
        vocab_size: 48,
        hidden: 24,
        layers: 2,
        heads: 2,
        max_context: args.audit_steps + 8,
        seed: args.seed,
    };
    let mut session = esamp_core::engine::SessionConfig {
        samples_per_prompt: 2,
        max_new_tokens: args.audit_steps,
        seed: args.seed,
        distiller_inner: 64,
        trace: TraceDetail::Full,
        ..Default::default()
    };
    session.fusion.fault_flip_sign = args.inject_fault;
    (spec, session)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let config = vec![
        ("kl_problems".to_string(), args.kl_problems.to_string()),
        ("perturbations".into(), args.perturbations.to_string()),
        ("mdp_per_gamma".into(), args.mdp_per_gamma.to_string()),
        ("audit_steps".into(), args.audit_steps.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("inject_fault".into(), args.inject_fault.to_string()),
    ];
    let hash = hash_hex(
        config
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect::<String>()
            .as_bytes(),
    );
    let mut run = RunDir::create(
        &out_dir(&args.out, "verify", &hash),
        "verify",
        config,
        hash,
        args.seed,
    )?;

    let kl = run_kl_suite(args.kl_problems, args.seed, args.perturbations)?;
    let mdp = run_mdp_suite(args.mdp_per_gamma, args.seed)?;
    let (spec, session) = audit_setup(args);
    let model = TinyTransformer::new(spec)?;
    let audit = audit_session(
        &DecodeSession::new(&model, vec![vec![1, 2, 3, 4]], session),
        false,
    )?;
    let report = VerifyReport::new(kl, mdp, audit);
    run.write_json("verify.json", &report)?;

    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} closed-form policy: {} problems, max TV {:.2e}, max stationarity spread {:.2e}, {} unconverged",
        mark(report.kl.passed),
        report.kl.problems,
        report.kl.max_tv_numeric,
        report.kl.max_stationarity_spread,
        report.kl.unconverged
    );
    println!(
        "{} toy MDPs: Q* = r on {}/{} vanishing-redundancy cases, violated on {}/{} controls",
        mark(report.mdp.passed),
        report.mdp.vanishing_exact,
        report.mdp.vanishing,
        report.mdp.controls_violated,
        report.mdp.controls
    );
    println!(
        "{} fusion audit: {} steps, max deviation {:.2e}, {} flagged",
        mark(report.audit.passed),
        report.audit.steps,
        report.audit.max_deviation,
        report.audit.flagged.len()
    );
    if let Some((step, seq)) = report.audit.flagged.first() {
        println!("  first flagged step {step} of sequence {seq}");
    }
    run.finish(serde_json::json!({ "passed": report.passed }))?;
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn traces_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("traces.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &str,
) -> Result<(Vec<T>, Vec<u8>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    let mut bytes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line =
            line.with_context(|| format!("{}:{}: unreadable line", path.display(), i + 1))?;
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).with_context(|| {
                format!("{}:{}: malformed {what} record", path.display(), i + 1)
            })?,
        );
    }
    Ok((rows, bytes))
}

/// Rebuilds generations from traces when no generations file sits beside them.
fn sequences_from_traces(traces: &[StepTrace]) -> Vec<SequenceOutput> {
    let mut by_seq: BTreeMap<usize, Vec<&StepTrace>> = BTreeMap::new();
    for t in traces {
        by_seq.entry(t.seq).or_default().push(t);
    }
    by_seq
        .into_iter()
        .map(|(seq, mut rows)| {
            rows.sort_by_key(|t| t.step);
            let hidden: Vec<&Vec<f64>> = rows.iter().filter_map(|t| t.hidden.as_ref()).collect();
            let mean_hidden = if hidden.len() == rows.len() && !hidden.is_empty() {
                let mut m = vec![0.0; hidden[0].len()];
                for h in &hidden {
                    m.iter_mut().zip(h.iter()).for_each(|(a, b)| *a += b);
                }
                m.iter_mut().for_each(|a| *a /= hidden.len() as f64);
                m
            } else {
                Vec::new()
            };
            SequenceOutput {
                seq,
                prompt: rows[0].prompt,
                sample: rows[0].sample,
                tokens: rows.iter().map(|t| t.token).collect(),
                truncated: false,
                mean_hidden,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SourceReport {
    source: String,
    report: MetricsReport,
}

fn cmd_metrics(args: &MetricsArgs) -> Result<ExitCode> {
    let mut reports = Vec::new();
    let mut digest = String::new();
    for p in &args.traces {
        let tp = traces_path(p);
        let (traces, bytes): (Vec<StepTrace>, _) = read_jsonl(&tp, "trace")?;
        writeln!(digest, "{} {}", tp.display(), hash_hex(&bytes))?;
        let gp = tp.with_file_name("generations.jsonl");
        let sequences = if gp.exists() {
            let (s, bytes) = read_jsonl(&gp, "generation")?;
            writeln!(digest, "{} {}", gp.display(), hash_hex(&bytes))?;
            s
        } else {
            sequences_from_traces(&traces)
        };
        let checker = args
            .correct_token
            .map(|tok| move |s: &SequenceOutput| s.tokens.contains(&tok));
        let report = metrics::report(
            &sequences,
            &traces,
            checker
                .as_ref()
                .map(|f| f as &dyn Fn(&SequenceOutput) -> bool),
        )?;
        reports.push(SourceReport {
            source: tp.display().to_string(),
            report,
        });
    }
    let config = vec![
        ("inputs".to_string(), digest.clone()),
        (
            "correct_token".into(),
            args.correct_token.map_or("none".into(), |t| t.to_string()),
        ),
    ];
    let hash = hash_hex(format!("{digest}{:?}", args.correct_token).as_bytes());
    let mut run = RunDir::create(
        &out_dir(&args.out, "metrics", &hash),
        "metrics",
        config,
        hash,
        0,
    )?;
    run.write_json("metrics.json", &reports)?;

    let mut div = String::from("source,prompt,step,similarity\n");
    let mut pass = String::from("source,prompt,k,pass_at_k\n");
    for (i, r) in reports.iter().enumerate() {
        for g in &r.report.groups {
            for (step, v) in g.divergence_curve.iter().flatten().enumerate() {
                writeln!(div, "{i},{},{step},{v}", g.prompt)?;
            }
            for (k, v) in g.pass_at_k.iter().flatten().enumerate() {
                writeln!(pass, "{i},{},{},{v}", g.prompt, k + 1)?;
            }
        }
        let fmt = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.4}"));
        println!(
            "{}: pairwise similarity {}, Vendi {}, self NLL/token {} (non-comparable)",
            r.source,
            fmt(r.report.pairwise_similarity),
            fmt(r.report.vendi),
            fmt(r.report.self_nll_per_token_noncomparable)
        );
        for n in &r.report.notices {
            println!("  notice: {n}");
        }
    }
    run.write("divergence.csv", div)?;
    if args.correct_token.is_some() {
        run.write("pass_at_k.csv", pass)?;
    }
    run.finish(serde_json::json!({ "sources": reports.len() }))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decode(a) => cmd_decode(a),
        Command::Bench { run, reps, warmup } => cmd_bench(run, *reps, *warmup),
        Command::AblateNoise { run, seeds } => cmd_ablate(run, *seeds),
        Command::Verify(a) => cmd_verify(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
