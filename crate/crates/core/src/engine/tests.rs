use super::*;
use crate::backbone::{BackboneSpec, SyntheticBranchModel, SyntheticConfig, TinyTransformer};
use crate::sampler::{FilterPolicy, Placement};

fn tiny() -> TinyTransformer {
    TinyTransformer::new(BackboneSpec {
        vocab_size: 32,
        hidden: 16,
        layers: 3,
        heads: 2,
        max_context: 64,
        seed: 3,
    })
    .unwrap()
}

fn config(k: usize, t: usize, seed: u64) -> SessionConfig {
    SessionConfig {
        samples_per_prompt: k,
        max_new_tokens: t,
        seed,
        distiller_inner: 32,
        ..Default::default()
    }
}

fn tokens(out: &SessionOutput) -> Vec<Vec<TokenId>> {
    out.sequences.iter().map(|s| s.tokens.clone()).collect()
}

#[test]
fn empty_session_does_nothing() {
    let m = tiny();
    let out = run_session(&DecodeSession::new(&m, vec![vec![1, 2]], config(1, 0, 0))).unwrap();
    assert!(out.sequences[0].tokens.is_empty());
    assert!(out.traces.is_empty());
    assert_eq!(out.stats.total_updates(), 0);
}

#[test]
fn rejects_invalid_sessions() {
    let m = tiny();
    assert!(run_session(&DecodeSession::new(&m, vec![vec![]], config(1, 3, 0))).is_err());
    assert!(run_session(&DecodeSession::new(&m, vec![], config(1, 3, 0))).is_err());
    assert!(run_session(&DecodeSession::new(&m, vec![vec![1]], config(0, 3, 0))).is_err());
    let mut c = config(1, 3, 0);
    c.fusion.beta = -1.0;
    assert!(run_session(&DecodeSession::new(&m, vec![vec![1]], c)).is_err());
}

#[test]
fn zero_beta_matches_vanilla_tokens() {
    let m = tiny();
    for seed in 0..4 {
        let mut esamp = config(3, 12, seed);
        esamp.fusion.beta = 0.0;
        esamp.fusion.filter = FilterPolicy::TopP(0.9);
        let vanilla = SessionConfig {
            method: Method::Vanilla,
            ..esamp.clone()
        };
        let prompts = vec![vec![1, 5, 9], vec![4]];
        let a = run_session(&DecodeSession::new(&m, prompts.clone(), esamp)).unwrap();
        let b = run_session(&DecodeSession::new(&m, prompts, vanilla)).unwrap();
        assert_eq!(tokens(&a), tokens(&b));
        assert!(a.stats.total_updates() > 0);
        assert_eq!(b.stats.total_updates(), 0);
    }
}

#[test]
fn async_traces_are_byte_identical_to_sync() {
    let m = tiny();
    for (scope, placement) in [
        (DistillerScope::Shared, Placement::LatentMix),
        (DistillerScope::PerPrompt, Placement::PostFilter),
    ] {
        let mut c = config(3, 10, 7);
        c.scope = scope;
        c.fusion.placement = placement;
        c.fusion.filter = FilterPolicy::TopK(8);
        c.trace = TraceDetail::Full;
        let prompts = vec![vec![2, 3], vec![7, 7, 1]];
        let sync = run_session_sync(&DecodeSession::new(&m, prompts.clone(), c.clone())).unwrap();
        let asy = run_session_async(&DecodeSession::new(&m, prompts, c)).unwrap();
        assert_eq!(sync.traces_jsonl(), asy.traces_jsonl());
        assert_eq!(tokens(&sync), tokens(&asy));
        assert_eq!(sync.stats.updates, asy.stats.updates);
        assert_eq!(asy.stats.ring_violations, 0);
        assert_eq!(asy.stats.fallbacks, 0);
    }
}

#[test]
fn rendezvous_timeout_falls_back_without_changing_results() {
    let m = tiny();
    let mut c = config(2, 6, 1);
    c.rendezvous_timeout_ms = 1;
    c.lane_delay = Some(LaneDelay {
        step: 3,
        delay: Duration::from_millis(200),
    });
    let prompts = vec![vec![1, 2, 3]];
    let sync = run_session_sync(&DecodeSession::new(&m, prompts.clone(), c.clone())).unwrap();
    let asy = run_session_async(&DecodeSession::new(&m, prompts, c)).unwrap();
    assert!(asy.stats.fallbacks >= 1);
    assert!(asy.timings[3].fallback);
    assert_eq!(sync.traces_jsonl(), asy.traces_jsonl());
}

#[test]
fn update_accounting_per_token() {
    let m = TinyTransformer::new(BackboneSpec {
        max_context: 256,
        hidden: 16,
        vocab_size: 32,
        layers: 2,
        heads: 2,
        seed: 0,
    })
    .unwrap();
    let long: Vec<TokenId> = (0..100).map(|i| i % 32).collect();
    let mut c = config(1, 50, 2);
    c.scope = DistillerScope::PerPrompt;
    let out = run_session(&DecodeSession::new(&m, vec![long.clone(), long], c)).unwrap();
    assert_eq!(out.stats.updates, vec![50, 50]);
    assert_eq!(out.stats.trained_rows, 100);
    assert_eq!(out.stats.guardrail_dropped, 2 * 99);
    assert!(out.traces.iter().all(|t| t.loss.is_some_and(|l| l >= 0.0)));
}

#[test]
fn shared_scope_trains_once_per_step_on_all_rows() {
    let m = tiny();
    let out = run_session(&DecodeSession::new(
        &m,
        vec![vec![1], vec![2]],
        config(3, 8, 0),
    ))
    .unwrap();
    assert_eq!(out.stats.updates, vec![8]);
    assert_eq!(out.stats.trained_rows, 48);
    assert_eq!(out.stats.decode_rows, 48);
}

#[test]
fn slower_cadence_batches_steps() {
    let m = tiny();
    let mut c = config(2, 7, 0);
    c.train_every = 3;
    let out = run_session(&DecodeSession::new(&m, vec![vec![1]], c.clone())).unwrap();
    assert_eq!(out.stats.updates, vec![3]);
    assert_eq!(out.stats.trained_rows, 14);
    let asy = run_session_async(&DecodeSession::new(&m, vec![vec![1]], c)).unwrap();
    assert_eq!(out.traces_jsonl(), asy.traces_jsonl());
}

#[test]
fn logged_reference_matches_a_vanilla_replay() {
    let m = tiny();
    let mut c = config(2, 15, 4);
    c.fusion.beta = 1.0;
    let prompt = vec![3, 1, 4];
    let out = run_session(&DecodeSession::new(&m, vec![prompt.clone()], c)).unwrap();
    for s in &out.sequences {
        let (mut st, _) = m.prefill(&prompt).unwrap();
        let mut input = *prompt.last().unwrap();
        for (step, &z) in s.tokens.iter().enumerate() {
            let o = m.decode_step(&mut st, input).unwrap();
            let lp = crate::numerics::log_softmax(&o.logits_ref, 1.0).unwrap()[z];
            let t = out
                .traces
                .iter()
                .find(|t| t.step == step && t.seq == s.seq)
                .unwrap();
            assert!((t.logp_ref - lp).abs() <= 1e-10);
            input = z;
        }
    }
}

#[test]
fn context_overflow_truncates_and_continues() {
    let m = tiny();
    let short = vec![1; 60];
    let out = run_session(&DecodeSession::new(
        &m,
        vec![short, vec![2]],
        config(1, 10, 0),
    ))
    .unwrap();
    assert!(out.sequences[0].truncated);
    assert_eq!(out.sequences[0].tokens.len(), 5);
    assert!(!out.sequences[1].truncated);
    assert_eq!(out.sequences[1].tokens.len(), 10);
    assert_eq!(out.stats.truncated, 1);
    assert_eq!(out.stats.trained_rows, 15);
}

#[test]
fn guardrail_keeps_decode_rows_only() {
    let rows = vec![
        TaggedRow {
            phase: Phase::Prefill,
            row: 0,
        },
        TaggedRow {
            phase: Phase::Decode,
            row: 1,
        },
        TaggedRow {
            phase: Phase::Prefill,
            row: 2,
        },
    ];
    let kept = guardrail_filter(rows);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].row, 1);
    let none: Vec<TaggedRow<u8>> = vec![TaggedRow {
        phase: Phase::Prefill,
        row: 0,
    }];
    assert!(guardrail_filter(none).is_empty());
}

#[test]
fn all_prefill_session_leaves_distiller_untouched() {
    let m = tiny();
    let out = run_session(&DecodeSession::new(
        &m,
        vec![vec![1, 2, 3, 4]],
        config(2, 0, 0),
    ))
    .unwrap();
    assert_eq!(out.stats.guardrail_dropped, 6);
    assert_eq!(out.distillers.unwrap().get(0).unwrap().updates(), 0);
}

#[test]
fn routing_by_scope() {
    assert_eq!(scope_route(DistillerScope::Shared, 0, 3).unwrap(), 0);
    assert_eq!(scope_route(DistillerScope::Shared, 2, 3).unwrap(), 0);
    assert_eq!(scope_route(DistillerScope::PerPrompt, 0, 3).unwrap(), 0);
    assert_eq!(scope_route(DistillerScope::PerPrompt, 2, 3).unwrap(), 2);
    assert!(scope_route(DistillerScope::PerPrompt, 3, 3).is_err());
}

#[test]
fn reruns_are_deterministic_and_seeds_matter() {
    let m = tiny();
    let run = |seed| {
        run_session(&DecodeSession::new(
            &m,
            vec![vec![5, 6]],
            config(4, 12, seed),
        ))
        .unwrap()
    };
    assert_eq!(run(1).traces_jsonl(), run(1).traces_jsonl());
    assert_ne!(tokens(&run(1)), tokens(&run(2)));
}

#[test]
fn full_traces_satisfy_the_fusion_identities() {
    let m = tiny();
    let mut c = config(2, 8, 9);
    c.trace = TraceDetail::Full;
    let out = run_session(&DecodeSession::new(&m, vec![vec![1, 2]], c)).unwrap();
    for t in &out.traces {
        let lr = t.logits_ref.as_ref().unwrap();
        let ld = t.logits_dist.as_ref().unwrap();
        let ln = t.logits_new.as_ref().unwrap();
        let e = t.error.as_ref().unwrap();
        let expect = crate::sampler::fuse_logits(lr, ld, t.beta).unwrap();
        assert_eq!(ln, &expect);
        for z in 0..lr.len() {
            let d = t.beta * crate::numerics::dot(m.head().row(z), e);
            assert!((ln[z] - lr[z] - d).abs() < 1e-9);
        }
    }
}

#[test]
fn matched_noise_keeps_tokens_paired_with_the_error_norm() {
    let m = tiny();
    let mut c = config(2, 8, 9);
    c.trace = TraceDetail::Full;
    c.fusion.ablation = Ablation::MatchedNoise;
    let out = run_session(&DecodeSession::new(&m, vec![vec![1, 2]], c)).unwrap();
    for t in &out.traces {
        assert!(t.ablation);
        let n = crate::numerics::norm2(t.error.as_ref().unwrap());
        assert!((n - t.novelty.unwrap()).abs() < 1e-9 * n.max(1.0));
    }
}

#[test]
fn synthetic_backbone_runs_in_both_pipelines() {
    let m = SyntheticBranchModel::new(SyntheticConfig::default()).unwrap();
    let mut c = config(4, 20, 3);
    c.distiller_inner = 64;
    let sync = run_session_sync(&DecodeSession::new(&m, vec![vec![0, 1]], c.clone())).unwrap();
    let asy = run_session_async(&DecodeSession::new(&m, vec![vec![0, 1]], c)).unwrap();
    assert_eq!(sync.traces_jsonl(), asy.traces_jsonl());
    for s in &sync.sequences {
        let mode = m.mode_of(&s.tokens);
        assert!(mode.is_some(), "deadline forces a branch");
    }
}
