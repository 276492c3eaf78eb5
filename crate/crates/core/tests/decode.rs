mod common;

use common::{recompute, reference_beam, scripted, toy_model, toy_source};
use retrospec_core::decode::{
    beam_search, generate, sbs_cycle, sbs_generate, DecodeConfig, DecodeMetrics, EchoHeads, FnModel, SbsSession,
    Strategy,
};
use retrospec_core::model::log_softmax;
use retrospec_core::smiles::{BOS, EOS};

fn config(strategy: Strategy, beam_size: usize, max_len: usize) -> DecodeConfig {
    DecodeConfig {
        strategy,
        beam_size,
        max_len,
        ..DecodeConfig::default()
    }
}

#[test]
fn beam_search_matches_naive_reference() {
    for seed in 0..6 {
        let model = toy_model(seed, 0);
        let src = toy_source(seed);
        let (hyps, _) = beam_search(&model, &src, &config(Strategy::BsOpt, 3, 8)).unwrap();
        let reference = reference_beam(&model, &src, 3, 8);
        assert_eq!(hyps.len(), reference.len());
        for (h, (tokens, score)) in hyps.iter().zip(&reference) {
            assert_eq!(&h.tokens, tokens);
            assert!((h.score - score).abs() < 1e-6);
        }
    }
}

#[test]
fn optimized_beam_search_saves_rows_only() {
    for seed in 0..6 {
        let model = toy_model(seed, 0);
        let src = toy_source(seed);
        let (a, ma) = beam_search(&model, &src, &config(Strategy::Bs, 4, 10)).unwrap();
        let (b, mb) = beam_search(&model, &src, &config(Strategy::BsOpt, 4, 10)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.model_calls, mb.model_calls);
        assert!(mb.rows <= ma.rows);
        let lengths: std::collections::BTreeSet<usize> = a.iter().map(|h| h.tokens.len()).collect();
        if lengths.len() > 1 {
            assert!(mb.mean_batch_size() < ma.mean_batch_size());
        }
    }
}

#[test]
fn batched_decoding_equals_one_by_one() {
    let model = toy_model(3, 3);
    let sources: Vec<Vec<u32>> = (0..3).map(toy_source).collect();
    for strategy in Strategy::ALL {
        let mut cfg = config(strategy, 3, 10);
        cfg.draft_len = 3;
        cfg.n_drafts = 2;
        let (batched, _) = generate(&model, &sources, &cfg).unwrap();
        for (src, hyps) in sources.iter().zip(&batched) {
            let (single, _) = generate(&model, std::slice::from_ref(src), &cfg).unwrap();
            assert_eq!(&single[0], hyps, "{strategy}");
        }
    }
}

#[test]
fn speculative_search_is_cache_consistent() {
    for seed in 0..3 {
        let model = toy_model(seed, 3);
        let src = toy_source(seed);
        let plain = recompute(model.clone());
        for strategy in [Strategy::Msbs, Strategy::Hsbs] {
            let mut cfg = config(strategy, 3, 9);
            cfg.draft_len = 3;
            cfg.n_drafts = 3;
            cfg.nucleus = 0.9;
            let (cached, mc) = sbs_generate(&model, &src, &cfg).unwrap();
            let (fresh, mf) = sbs_generate(&plain, &src, &cfg).unwrap();
            assert_eq!(mc.model_calls, mf.model_calls);
            assert_eq!(mc.accepted_tokens, mf.accepted_tokens);
            for (a, b) in cached.iter().zip(&fresh) {
                assert_eq!(a.tokens, b.tokens);
                assert!((a.score - b.score).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn classic_beam_search_spends_one_call_per_token() {
    let gold: Vec<u32> = (0..51).map(|i| 4 + (i * 3 % 4) as u32).collect();
    let model = scripted(gold.clone());
    for (k, strategy) in [(1, Strategy::Bs), (10, Strategy::Bs), (10, Strategy::BsOpt)] {
        let (hyps, metrics) = beam_search(&model, &[4, EOS], &config(strategy, k, 100)).unwrap();
        assert_eq!(hyps[0].body(), &gold[..]);
        assert_eq!(metrics.model_calls, 52);
    }
}

#[test]
fn medusa_cycles_cost_two_calls() {
    let gold: Vec<u32> = (0..51).map(|i| 4 + (i * 3 % 4) as u32).collect();
    // Extra heads always guess token 3, so only the main head's draft token survives.
    let model = scripted(gold.clone()).with_heads(4, |_, _, _| (0..8).map(|v| if v == 3 { 5.0 } else { 0.0 }).collect());
    let mut cfg = config(Strategy::Msbs, 1, 100);
    cfg.draft_len = 4;
    let (hyps, m) = sbs_generate(&model, &[4, EOS], &cfg).unwrap();
    assert_eq!(hyps[0].body(), &gold[..]);
    assert_eq!(m.model_calls, 2 * m.cycles);
    // Worst case: the draft's first token plus the bonus token per cycle.
    assert_eq!(m.cycles, 26);
    assert_eq!(m.accepted_tokens, m.cycles);
}

#[test]
fn medusa_best_case_commits_every_head() {
    let gold: Vec<u32> = (0..59).map(|i| 4 + (i * 5 % 4) as u32).collect();
    let path = gold.clone();
    let model = scripted(gold.clone()).with_heads(4, move |_, prefix, k| {
        let at = prefix.len() - 1 + k;
        let next = path.get(at).copied().unwrap_or(EOS);
        (0..8).map(|v| if v == next { 5.0 } else { 0.0 }).collect()
    });
    let mut cfg = config(Strategy::Msbs, 1, 100);
    cfg.draft_len = 4;
    let (hyps, m) = sbs_generate(&model, &[4, EOS], &cfg).unwrap();
    assert_eq!(hyps[0].body(), &gold[..]);
    // 60 tokens (eos included) at draft length 4 plus a bonus each cycle.
    assert_eq!(m.cycles, 12);
    assert_eq!(m.model_calls, 24);
    assert_eq!(m.accepted_tokens, m.drafted_tokens);
}

/// V = 8 model whose main head at output position t prefers `4 + t % 4`
/// (logit 5) then `4 + (t + 1) % 4` (logit 3), regardless of the prefix.
/// Extra head k echoes the preferred token k + 1 positions ahead.
fn positional_model(heads: usize) -> FnModel {
    let pref = |t: usize| 4 + (t % 4) as u32;
    FnModel::new(8, 200, move |_, prefix| {
        let t = prefix.len() - 1;
        (0..8)
            .map(|v| {
                if v == pref(t) {
                    5.0
                } else if v == pref(t + 1) {
                    3.0
                } else if v == EOS {
                    -5.0
                } else {
                    0.0
                }
            })
            .collect()
    })
    .with_heads(heads, move |_, prefix, k| {
        let t = prefix.len() - 1 + k;
        (0..8).map(|v| if v == pref(t) { 5.0 } else { 0.0 }).collect()
    })
}

#[test]
fn second_cycle_pools_forty_four_candidates() {
    let model = positional_model(20);
    let mut cfg = config(Strategy::Msbs, 2, 200);
    cfg.draft_len = 20;
    let mut sessions = vec![SbsSession::new(&model, &[4, EOS]).unwrap()];
    let mut metrics = DecodeMetrics::default();
    let first = sbs_cycle(&model, &mut sessions, &cfg, &mut metrics).unwrap();
    assert_eq!(first.calls, 2);
    assert_eq!(first.candidates, 22);
    assert_eq!(sessions[0].beams().count(), 2);
    let second = sbs_cycle(&model, &mut sessions, &cfg, &mut metrics).unwrap();
    assert_eq!(second.calls, 2);
    assert_eq!(second.candidates, 44);
    assert_eq!(metrics.accepted_tokens, 60);
}

#[test]
fn cycle_pool_matches_exhaustive_enumeration() {
    // V = 5 with hand-set distributions at output positions 0, 1, 2.
    let table: [[f64; 5]; 3] = [
        [0.02, 0.03, 0.05, 0.6, 0.3],
        [0.01, 0.01, 0.28, 0.2, 0.5],
        [0.05, 0.05, 0.35, 0.3, 0.25],
    ];
    let logits = move |t: usize| table[t.min(2)].iter().map(|p| p.ln()).collect::<Vec<f64>>();
    let model = FnModel::new(5, 16, move |_, prefix| logits(prefix.len() - 1)).with_heads(2, |_, prefix, k| {
        // Head 1 plants token 4 as the second draft token.
        let t = prefix.len() - 1 + k;
        (0..5).map(|v| if t == 1 && v == 4 { 1.0 } else { 0.0 }).collect()
    });
    let mut cfg = config(Strategy::Msbs, 2, 10);
    cfg.draft_len = 2;
    let mut sessions = vec![SbsSession::new(&model, &[3, EOS]).unwrap()];
    let mut metrics = DecodeMetrics::default();
    let report = sbs_cycle(&model, &mut sessions, &cfg, &mut metrics).unwrap();
    assert_eq!(metrics.accepted_tokens, 2);

    // Enumerate every sequence of length 1..=3 and keep those whose proper
    // prefix is the accepted draft [3, 4], whose last token is in the top 2 of
    // its position, and which are not a proper prefix of another kept sequence.
    let draft = [3u32, 4];
    let top2 = |t: usize| {
        let mut ids: Vec<u32> = (0..5).collect();
        ids.sort_by(|&a, &b| table[t][b as usize].total_cmp(&table[t][a as usize]).then(a.cmp(&b)));
        ids.truncate(2);
        ids
    };
    let mut kept: Vec<Vec<u32>> = Vec::new();
    for len in 1..=3usize {
        for code in 0..5u32.pow(len as u32) {
            let seq: Vec<u32> = (0..len).map(|i| code / 5u32.pow(i as u32) % 5).collect();
            if seq[..len - 1] == draft[..len - 1] && top2(len - 1).contains(&seq[len - 1]) {
                kept.push(seq);
            }
        }
    }
    let leaves: Vec<Vec<u32>> = kept
        .iter()
        .filter(|s| !kept.iter().any(|o| o.len() > s.len() && o.starts_with(s)))
        .cloned()
        .collect();
    let mut scored: Vec<(Vec<u32>, f64)> = leaves
        .into_iter()
        .map(|s| {
            let score = s.iter().enumerate().map(|(t, &v)| table[t][v as usize].ln()).sum();
            (s, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    assert_eq!(report.candidates, scored.len());
    let beams: Vec<_> = sessions[0].beams().cloned().collect();
    assert_eq!(beams.len(), 2);
    for (b, (tokens, score)) in beams.iter().zip(&scored) {
        assert_eq!(&b.tokens, tokens);
        assert!((b.score - score).abs() < 1e-9);
    }
}

#[test]
fn zero_nucleus_without_drafts_is_one_beam_step() {
    let model = toy_model(5, 0);
    let src = toy_source(5);
    let mut cfg = config(Strategy::Msbs, 4, 12);
    cfg.nucleus = 0.0;
    let mut sessions = vec![SbsSession::new(&model, &src).unwrap()];
    let mut metrics = DecodeMetrics::default();
    sbs_cycle(&model, &mut sessions, &cfg, &mut metrics).unwrap();
    sbs_cycle(&model, &mut sessions, &cfg, &mut metrics).unwrap();
    assert_eq!(metrics.model_calls, 2);
    let reference = reference_beam(&model, &src, 4, 2);
    for (h, (tokens, score)) in sessions[0].beams().zip(&reference) {
        assert_eq!(&h.tokens, tokens);
        assert!((h.score - score).abs() < 1e-9);
    }
}

#[test]
fn echo_heads_keep_greedy_output_at_beam_one() {
    for seed in 0..4 {
        let model = toy_model(seed, 0);
        let echo = EchoHeads::new(&model, 4);
        let src = toy_source(seed);
        let mut cfg = config(Strategy::Msbs, 1, 12);
        cfg.nucleus = 0.0;
        cfg.draft_len = 4;
        let (spec, m) = sbs_generate(&echo, &src, &cfg).unwrap();
        let (greedy, g) = beam_search(&model, &src, &config(Strategy::BsOpt, 1, 12)).unwrap();
        assert_eq!(spec[0].tokens, greedy[0].tokens);
        assert!((spec[0].score - greedy[0].score).abs() < 1e-6);
        assert!(m.model_calls <= g.model_calls + 1);
        assert_eq!(m.accepted_tokens, m.drafted_tokens);
    }
}

#[test]
fn scores_are_joint_log_probabilities() {
    let model = toy_model(9, 2);
    let src = toy_source(9);
    for strategy in Strategy::ALL {
        let mut cfg = config(strategy, 3, 8);
        cfg.draft_len = 2;
        let (hyps, _) = generate(&model, std::slice::from_ref(&src), &cfg).unwrap();
        for h in &hyps[0] {
            let mut prefix = vec![BOS];
            let mut total = 0.0;
            for &t in &h.tokens {
                total += log_softmax(&common::full_logits(&model, &src, &prefix, 0))[t as usize];
                prefix.push(t);
            }
            assert!((total - h.score).abs() < 1e-6, "{strategy}");
            assert!(h.finished);
        }
    }
}
