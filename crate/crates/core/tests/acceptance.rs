//! Release acceptance: one PASS/FAIL line per criterion, written straight to
//! stderr so it shows even when the harness captures test output. The test
//! fails when any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use esamp_core::backbone::{
    Backbone, BackboneSpec, SyntheticBranchModel, SyntheticConfig, TinyTransformer,
};
use esamp_core::bench::{measure_throughput, BenchArm};
use esamp_core::distiller::{DistillerConfig, DistillerState};
use esamp_core::engine::{
    run_session_async, run_session_sync, DecodeSession, Method, PipelineMode, SessionConfig,
    TraceDetail,
};
use esamp_core::experiment::paired_coverage;
use esamp_core::metrics::{pairwise_cosine_mean, pass_at_k, vendi_score};
use esamp_core::numerics::{softmax, Matrix};
use esamp_core::sampler::{fuse_logits, novelty_decomposition, FilterPolicy};
use esamp_core::verify::{audit_session, run_kl_suite, run_mdp_suite, RewardRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let g = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| g.sample(rng)).collect()
}

fn tiny(seed: u64, context: usize) -> TinyTransformer {
    TinyTransformer::new(BackboneSpec {
        max_context: context,
        seed,
        ..BackboneSpec::default()
    })
    .unwrap()
}

/// Softmax of the fused logits against the normalized probability ratio
/// `π_ref^{1+β} / q^β`, built from probabilities only.
fn closed_form_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let betas = [0.0, 0.1, 0.25, 0.5, 1.0];
    let mut worst = 0.0f64;
    let cases = 250;
    for i in 0..cases {
        let v = rng.random_range(2..=128);
        let lr = gaussian_vec(&mut rng, v, 3.0);
        let ld = gaussian_vec(&mut rng, v, 3.0);
        let beta = if i < 200 {
            betas[i % betas.len()]
        } else {
            rng.random_range(0.0..2.0)
        };
        let fused = softmax(&fuse_logits(&lr, &ld, beta).unwrap(), 1.0).unwrap();
        let p = softmax(&lr, 1.0).unwrap();
        let q = softmax(&ld, 1.0).unwrap();
        let un: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(a, b)| a.powf(1.0 + beta) / b.powf(beta))
            .collect();
        let z: f64 = un.iter().sum();
        let d = fused
            .iter()
            .zip(&un)
            .map(|(a, b)| (a - b / z).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-10 && t < Duration::from_secs(5),
        format!("{cases} cases, max-abs {worst:.2e} (tol 1e-10), {t:.2?} (limit 5 s)"),
    )
}

/// Every step of a 500-step audited session: the logged shift equals
/// `β⟨w_z, e⟩` and its magnitude/direction split.
fn decomposition_identity() -> Outcome {
    let start = Instant::now();
    let m = tiny(3, 520);
    let config = SessionConfig {
        samples_per_prompt: 1,
        max_new_tokens: 500,
        seed: 5,
        trace: TraceDetail::Full,
        ..Default::default()
    };
    let session = DecodeSession::new(&m, vec![vec![1, 2, 3]], config.clone());
    let audit = audit_session(&session, false).unwrap();
    let traces = run_session_sync(&DecodeSession::new(&m, vec![vec![1, 2, 3]], config))
        .unwrap()
        .traces;
    let all: Vec<usize> = (0..m.head().vocab_size()).collect();
    let mut worst = 0.0f64;
    for t in &traces {
        let e = t.error.as_ref().unwrap();
        let sig = novelty_decomposition(e, m.head(), &all, t.beta).unwrap();
        let (lr, ln) = (
            t.logits_ref.as_ref().unwrap(),
            t.logits_new.as_ref().unwrap(),
        );
        for (i, &z) in sig.candidates.iter().enumerate() {
            let logged = ln[z] - lr[z];
            let polar = t.beta * sig.row_norm[i] * sig.norm * sig.cosine[i];
            worst = worst
                .max((logged - sig.delta_logit[i]).abs())
                .max((logged - polar).abs());
        }
    }
    let t = start.elapsed();
    outcome(
        traces.len() == 500 && audit.steps == 500 && audit.passed && worst <= 1e-9 && t < Duration::from_secs(30),
        format!(
            "{} steps, max |Δ − β⟨w,e⟩| and polar form {worst:.2e}, audit max {:.2e} (tol 1e-9), {t:.2?} (limit 30 s)",
            traces.len(),
            audit.max_deviation
        ),
    )
}

fn zero_beta_degeneration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let filters = [
        FilterPolicy::None,
        FilterPolicy::TopK(5),
        FilterPolicy::TopP(0.8),
        FilterPolicy::MinP(0.05),
    ];
    let sessions = 12;
    let mut identical = 0;
    for i in 0..sessions {
        let m = tiny(rng.random(), 128);
        let prompts: Vec<Vec<usize>> = (0..rng.random_range(1..=3))
            .map(|_| {
                (0..rng.random_range(1..=6))
                    .map(|_| rng.random_range(0..64))
                    .collect()
            })
            .collect();
        let mut esamp = SessionConfig {
            samples_per_prompt: rng.random_range(1..=4),
            max_new_tokens: rng.random_range(4..=40),
            seed: rng.random(),
            distiller_inner: 64,
            pipeline: if i % 2 == 0 {
                PipelineMode::Sync
            } else {
                PipelineMode::Async
            },
            ..Default::default()
        };
        esamp.fusion.beta = 0.0;
        esamp.fusion.filter = filters[i % filters.len()];
        esamp.fusion.temperature = rng.random_range(0.5..1.5);
        let vanilla = SessionConfig {
            method: Method::Vanilla,
            pipeline: PipelineMode::Sync,
            ..esamp.clone()
        };
        let run = |c: SessionConfig| {
            let s = DecodeSession::new(&m, prompts.clone(), c);
            let out = esamp_core::engine::run_session(&s).unwrap();
            out.sequences
                .into_iter()
                .map(|s| s.tokens)
                .collect::<Vec<_>>()
        };
        if run(esamp) == run(vanilla) {
            identical += 1;
        }
    }
    outcome(
        identical == sessions,
        format!("{identical}/{sessions} randomized sessions byte-identical"),
    )
}

fn gradient_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let configs = 24;
    for case in 0..configs {
        let d = rng.random_range(2..=12);
        let w = rng.random_range(2..=24);
        let b = rng.random_range(1..=4);
        let mut s = DistillerState::new(DistillerConfig {
            inner: w,
            ..DistillerConfig::new(d, case)
        })
        .unwrap();
        // a few updates move the parameters away from their initial draw
        let warm1 = Matrix::from_vec(b, d, gaussian_vec(&mut rng, b * d, 1.0)).unwrap();
        let warm2 = Matrix::from_vec(b, d, gaussian_vec(&mut rng, b * d, 1.0)).unwrap();
        for _ in 0..3 {
            s.train_step(&warm1, &warm2).unwrap();
        }
        let h1 = Matrix::from_vec(b, d, gaussian_vec(&mut rng, b * d, 1.0)).unwrap();
        let hl = Matrix::from_vec(b, d, gaussian_vec(&mut rng, b * d, 1.0)).unwrap();
        let (_, grads) = s.loss_and_grads(&h1, &hl).unwrap();
        for _ in 0..10 {
            let t = rng.random_range(0..grads.len());
            let j = rng.random_range(0..grads[t].len());
            let orig = s.params()[t][j];
            s.params_mut()[t][j] = orig + h;
            let up = s.loss(&h1, &hl).unwrap();
            s.params_mut()[t][j] = orig - h;
            let down = s.loss(&h1, &hl).unwrap();
            s.params_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[t][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(
        checked >= 200 && worst <= 1e-5,
        format!("{checked} coordinates over {configs} configurations, max relative error {worst:.2e} (tol 1e-5)"),
    )
}

fn kl_derivation() -> Outcome {
    let r = run_kl_suite(200, 17, 32).unwrap();
    outcome(
        r.passed && r.problems == 200 && r.max_tv_numeric <= 1e-5 && r.max_stationarity_spread <= 1e-8,
        format!(
            "{} problems, max TV {:.2e} (tol 1e-5), stationarity spread {:.2e} (tol 1e-8), grid TV {:.2e} on {} cases, {} unconverged",
            r.problems, r.max_tv_numeric, r.max_stationarity_spread, r.max_tv_grid, r.grid_cases, r.unconverged
        ),
    )
}

fn toy_mdp() -> Outcome {
    let start = Instant::now();
    let r = run_mdp_suite(50, 19).unwrap();
    let t = start.elapsed();
    let sized = r.reports.iter().all(|m| m.regions <= 8 && m.horizon <= 10);
    let vanishing_all = r
        .reports
        .iter()
        .filter(|m| m.rule == RewardRule::VanishingRedundancy)
        .all(|m| m.mismatches == 0 && m.definition_holds);
    let controls_all = r
        .reports
        .iter()
        .filter(|m| m.rule == RewardRule::Rearming)
        .all(|m| m.mismatches > 0);
    outcome(
        r.passed && sized && vanishing_all && controls_all && t < Duration::from_secs(60),
        format!(
            "Q* = r on {}/{} vanishing-redundancy MDPs, violated on {}/{} re-arming controls, γ ∈ {:?}, {t:.2?} (limit 60 s)",
            r.vanishing_exact, r.vanishing, r.controls_violated, r.controls, r.gammas
        ),
    )
}

fn rapid_fitting() -> Outcome {
    let m = tiny(23, 64);
    let (mut st, _) = m.prefill(&[4, 5, 6]).unwrap();
    let out = m.decode_step(&mut st, 6).unwrap();
    let d = m.spec().hidden;
    let h1 = Matrix::from_vec(1, d, out.h1).unwrap();
    let hl = Matrix::from_vec(1, d, out.hl).unwrap();
    let cfg = DistillerConfig::new(d, 0);
    let constants = cfg.inner == 384
        && cfg.adam.lr == 4e-4
        && cfg.adam.eps == 1e-4
        && cfg.adam.clip_norm == 0.5;
    let mut s = DistillerState::new(cfg).unwrap();
    let first = s.loss(&h1, &hl).unwrap();
    for _ in 0..50 {
        s.train_step(&h1, &hl).unwrap();
    }
    let last = s.loss(&h1, &hl).unwrap();
    let drop = 1.0 - last / first;
    outcome(
        constants && drop >= 0.9,
        format!(
            "loss {first:.4e} -> {last:.4e} after 50 updates, drop {:.1}% (need 90%)",
            100.0 * drop
        ),
    )
}

fn coverage_criteria() -> (Outcome, Outcome) {
    let model = SyntheticBranchModel::new(SyntheticConfig::exploration()).unwrap();
    let base = SessionConfig {
        samples_per_prompt: 4,
        max_new_tokens: SyntheticConfig::EXPLORATION_HORIZON,
        ..Default::default()
    };
    assert_eq!((model.config().modes, base.fusion.beta), (4, 0.25));
    let seeds: Vec<u64> = (0..20).collect();
    let r = paired_coverage(&model, &[vec![0, 1]], &base, &seeds).unwrap();
    let c8 = outcome(
        r.mean_esamp > r.mean_vanilla && r.similarity_wins >= 15,
        format!(
            "coverage esamp {:.3} vs vanilla {:.3} (uniform expectation {:.3}), paired diff {:+.3} [{:+.3}, {:+.3}]; final similarity esamp <= vanilla in {}/20 seeds (need 15)",
            r.mean_esamp,
            r.mean_vanilla,
            r.vanilla_expectation,
            r.esamp_minus_vanilla.mean,
            r.esamp_minus_vanilla.lower,
            r.esamp_minus_vanilla.upper,
            r.similarity_wins
        ),
    );
    let lo = r.mean_vanilla.min(r.mean_esamp);
    let hi = r.mean_vanilla.max(r.mean_esamp);
    let between = r.mean_noise >= lo && r.mean_noise <= hi;
    let indistinguishable = r.noise_minus_vanilla.indistinguishable_from_zero();
    let c9 = outcome(
        (between || indistinguishable) && r.mean_esamp > r.mean_noise,
        format!(
            "noise {:.3} (between: {between}); noise - vanilla {:+.3} [{:+.3}, {:+.3}] (contains 0: {indistinguishable}); esamp {:.3} > noise",
            r.mean_noise,
            r.noise_minus_vanilla.mean,
            r.noise_minus_vanilla.lower,
            r.noise_minus_vanilla.upper,
            r.mean_esamp
        ),
    );
    (c8, c9)
}

fn determinism_gate() -> Outcome {
    let tiny_model = tiny(29, 128);
    let synth = SyntheticBranchModel::new(SyntheticConfig::default()).unwrap();
    let mut sessions = 0;
    let mut identical = 0;
    let mut steps = 0;
    let mut overlapped = 0;
    let mut check = |a: esamp_core::engine::SessionOutput, b: esamp_core::engine::SessionOutput| {
        sessions += 1;
        if a.sequences == b.sequences && a.traces == b.traces {
            identical += 1;
        }
        steps += b.timings.len();
        overlapped += b
            .timings
            .iter()
            .filter(|t| t.predict_overlaps_deep())
            .count();
    };
    for (i, scope) in [
        esamp_core::distiller::DistillerScope::Shared,
        esamp_core::distiller::DistillerScope::PerPrompt,
    ]
    .into_iter()
    .enumerate()
    {
        for (j, filter) in [FilterPolicy::None, FilterPolicy::TopP(0.9)]
            .into_iter()
            .enumerate()
        {
            let mut c = SessionConfig {
                samples_per_prompt: 3,
                max_new_tokens: 40,
                seed: (10 * i + j) as u64,
                scope,
                distiller_inner: 96,
                trace: TraceDetail::Full,
                train_every: 1 + j,
                ..Default::default()
            };
            c.fusion.filter = filter;
            let prompts = vec![vec![1, 2, 3], vec![9, 8]];
            let sync =
                run_session_sync(&DecodeSession::new(&tiny_model, prompts.clone(), c.clone()))
                    .unwrap();
            let asyn =
                run_session_async(&DecodeSession::new(&tiny_model, prompts.clone(), c.clone()))
                    .unwrap();
            check(sync, asyn);
            let sync =
                run_session_sync(&DecodeSession::new(&synth, prompts.clone(), c.clone())).unwrap();
            let asyn = run_session_async(&DecodeSession::new(&synth, prompts, c)).unwrap();
            check(sync, asyn);
        }
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let fraction = overlapped as f64 / steps.max(1) as f64;
    let overlap_ok = cores < 4 || fraction >= 0.95;
    let overlap_note = if cores < 4 {
        format!("overlap {:.1}% measured, not assessed: host has {cores} core(s), the overlap clause applies to >= 4", 100.0 * fraction)
    } else {
        format!(
            "overlap {:.1}% of steps (need 95%) on {cores} cores",
            100.0 * fraction
        )
    };
    outcome(
        identical == sessions && overlap_ok,
        format!("{identical}/{sessions} sessions byte-identical sync vs async; {overlap_note}"),
    )
}

fn throughput() -> Outcome {
    let start = Instant::now();
    let m = tiny(31, 512);
    let base = SessionConfig {
        samples_per_prompt: 16,
        max_new_tokens: 256,
        ..Default::default()
    };
    let r = measure_throughput(&m, &[vec![1, 2, 3, 4]], &base, 1, 5).unwrap();
    let t = start.elapsed();
    let cores = r.available_cores;
    outcome(
        r.max_new_tokens == 256 && r.async_overhead_pct <= 15.0 && t < Duration::from_secs(300),
        format!(
            "P=1 K=16 T={} median of 5: vanilla {:.0} tok/s, async {:.0} tok/s, async overhead {:+.1}% (limit 15%), sync {:+.1}%, {cores} core(s), {t:.1?} (limit 5 min)",
            r.max_new_tokens,
            r.arm(BenchArm::Vanilla).tokens_per_sec,
            r.arm(BenchArm::EsampAsync).tokens_per_sec,
            r.async_overhead_pct,
            r.sync_overhead_pct
        ),
    )
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn metrics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    // Vendi against an independent symmetric eigensolver
    let mut vendi_worst = 0.0f64;
    for _ in 0..30 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=10);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
        let unit: Vec<Vec<f64>> = emb
            .iter()
            .map(|e| {
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                e.iter().map(|x| x / norm).collect()
            })
            .collect();
        let k = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        });
        let eig = nalgebra::SymmetricEigen::new(k).eigenvalues;
        let entropy: f64 = eig.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum();
        let oracle = entropy.exp();
        vendi_worst = vendi_worst.max((vendi_score(&emb).unwrap() - oracle).abs());
    }
    // Pass@k against subset enumeration
    let mut pass_worst = 0.0f64;
    let mut pass_cases = 0;
    for n in 1..=12usize {
        for c in 0..=n {
            let correct_mask: u32 = (1u32 << c) - 1;
            for k in 1..=n {
                let mut hit = 0u64;
                let mut total = 0u64;
                for subset in 0u32..(1 << n) {
                    if subset.count_ones() as usize == k {
                        total += 1;
                        if subset & correct_mask != 0 {
                            hit += 1;
                        }
                    }
                }
                assert_eq!(total as f64, binomial(n, k));
                let oracle = hit as f64 / total as f64;
                pass_worst = pass_worst.max((pass_at_k(n, c, k).unwrap() - oracle).abs());
                pass_cases += 1;
            }
        }
    }
    // pairwise similarity against a double loop
    let mut sim_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=9);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d, 2.0)).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dot: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
                let ni = emb[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                let nj = emb[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                sum += dot / (ni * nj);
                pairs += 1;
            }
        }
        sim_worst = sim_worst.max((pairwise_cosine_mean(&emb).unwrap() - sum / pairs as f64).abs());
    }
    outcome(
        vendi_worst <= 1e-8 && pass_worst <= 1e-12 && sim_worst <= 1e-12,
        format!(
            "Vendi vs eigen-oracle {vendi_worst:.2e} (tol 1e-8); Pass@k vs enumeration {pass_worst:.2e} over {pass_cases} (n<=12, c, k); similarity vs double loop {sim_worst:.2e} (tol 1e-12)"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    std::io::stderr()
        .write_all(b"\nacceptance criteria\n")
        .unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        let line = format!(
            "{} criterion {n:>2} {name}: {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        results.push((n, name, o));
    };
    report(1, "closed-form equivalence", closed_form_equivalence());
    report(2, "decomposition identity", decomposition_identity());
    report(3, "zero-beta degeneration", zero_beta_degeneration());
    report(4, "gradient exactness", gradient_exactness());
    report(5, "KL-regularized optimum", kl_derivation());
    report(6, "toy MDP value identity", toy_mdp());
    report(7, "rapid fitting", rapid_fitting());
    let (c8, c9) = coverage_criteria();
    report(8, "collaborative exploration", c8);
    report(9, "noise ablation", c9);
    report(10, "determinism gate", determinism_gate());
    report(11, "throughput sanity", throughput());
    report(12, "metrics oracles", metrics_oracles());
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| !o.passed)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
