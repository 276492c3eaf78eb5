mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::{full_logits, toy_model};
use retrospec_core::corpus::{gen_synthetic, GrammarConfig, OracleExpander, ReactionPair};
use retrospec_core::decode::{beam_search, generate, verify_draft, DecodeConfig, Strategy as Decoding};
use retrospec_core::harness::{bench_multi_step, bench_single_step, PlanSetting, SingleStepOptions};
use retrospec_core::model::{forward, log_softmax, ModelConfig, ModelParameters, TrainBatch, Transformer};
use retrospec_core::plan::{extract_solved_routes, retro_star, Algorithm, PlanConfig, Stock};
use retrospec_core::smiles::{detokenize, tokenize, validate_syntactic, Vocabulary, BOS, EOS};

const PIECES: &[&str] = &[
    "C", "c", "N", "n", "O", "o", "S", "F", "Cl", "Br", "(", ")", "=", "#", "1", "2", "%12", "[nH]", "[C@@H]", "[Si]",
    "[O-]", ".", "/", "\\", "@", "+", "-",
];

fn smiles_like() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(PIECES), 1..24).prop_map(|v| v.concat())
}

fn small_grammar(seed: u64) -> GrammarConfig {
    GrammarConfig {
        size: 300,
        blocks: 30,
        seed,
        ..Default::default()
    }
}

fn micro(medusa_heads: usize) -> Transformer {
    let config = ModelConfig {
        layers_enc: 1,
        layers_dec: 2,
        attn_heads: 2,
        d_model: 8,
        d_ff: 16,
        medusa_heads,
        medusa_hidden: 8,
        vocab_size: 10,
        max_len: 24,
        dropout: 0.0,
        seed: 0,
    };
    Transformer::new(ModelParameters::init(&config, 3)).unwrap()
}

fn decode_config(strategy: Decoding, beam_size: usize) -> DecodeConfig {
    DecodeConfig {
        strategy,
        beam_size,
        max_len: 10,
        nucleus: 0.9,
        draft_len: 3,
        n_drafts: 2,
    }
}

fn source(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().map(|t| 4 + t % 12).chain([EOS]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detokenize_inverts_tokenize(s in smiles_like()) {
        if let Ok(tokens) = tokenize(&s) {
            prop_assert_eq!(detokenize(&tokens), s);
        }
    }

    #[test]
    fn vocabulary_depends_only_on_the_token_set(mut corpus in prop::collection::vec(smiles_like(), 1..8), seed in any::<u64>()) {
        let a = Vocabulary::build(corpus.iter());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut corpus[..], &mut rng);
        corpus.push(corpus[0].clone());
        let b = Vocabulary::build(corpus.iter());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                for id in 0..a.len() as u32 {
                    prop_assert_eq!(a.id(a.token(id).unwrap()), Some(id));
                }
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn validity_carries_a_reason_only_when_invalid(s in ".{0,16}") {
        let r = validate_syntactic(&s);
        prop_assert_eq!(r.valid, r.reason.is_none());
    }

    #[test]
    fn verification_flags_are_a_prefix(
        rows in prop::collection::vec(prop::collection::vec(0u8..6, 5), 1..8),
        draft in prop::collection::vec(0u32..5, 1..8),
        p in 0.0f64..=1.0,
    ) {
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let z = r.iter().map(|&x| x as f64).sum::<f64>().max(1.0);
                r.iter().map(|&x| x as f64 / z).collect()
            })
            .collect();
        let v = verify_draft(&probs, &draft, p);
        prop_assert_eq!(v.flags.len(), draft.len());
        prop_assert!(v.accepted <= draft.len());
        prop_assert!(v.flags.iter().take(v.accepted).all(|&f| f));
        prop_assert!(v.flags.iter().skip(v.accepted).all(|&f| !f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_do_not_see_later_tokens(
        src in prop::collection::vec(0u32..12, 1..6),
        tgt in prop::collection::vec(4u32..10, 2..8),
        cut in 1usize..7,
        other in 4u32..10,
    ) {
        let model = micro(2);
        let src = source(&src).into_iter().map(|t| t.min(9)).collect::<Vec<_>>();
        let mut a = vec![BOS];
        a.extend(&tgt);
        let cut = cut.min(a.len() - 1);
        let mut b = a.clone();
        for t in &mut b[cut..] {
            *t = other;
        }
        let (la, _) = forward(&model, &[src.clone()], &[a], None).unwrap();
        let (lb, _) = forward(&model, &[src], &[b], None).unwrap();
        for i in 0..cut {
            for h in 0..3 {
                for v in 0..10 {
                    prop_assert!((la.data[[0, i, h, v]] - lb.data[[0, i, h, v]]).abs() < 1e-12);
                }
            }
        }
        for row in la.data.lanes(ndarray::Axis(3)) {
            let total: f64 = log_softmax(&row.to_vec()).iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn truncated_cache_equals_recompute(tgt in prop::collection::vec(4u32..10, 2..8), keep in 1usize..8) {
        let model = micro(1);
        let src = vec![4, 7, 5, EOS];
        let mut full = vec![BOS];
        full.extend(&tgt);
        let keep = keep.min(full.len() - 1);
        let (_, mut caches) = forward(&model, &[src.clone()], &[full.clone()], None).unwrap();
        caches[0].truncate(keep);
        let next = vec![full[keep]];
        let (cached, _) = forward(&model, &[src.clone()], &[next], Some(caches)).unwrap();
        let (fresh, _) = forward(&model, &[src], &[full[..=keep].to_vec()], None).unwrap();
        for v in 0..10 {
            prop_assert!((cached.data[[0, 0, 0, v]] - fresh.data[[0, keep, 0, v]]).abs() < 1e-5);
        }
    }

    #[test]
    fn shifted_targets_stop_at_eos(targets in prop::collection::vec(prop::collection::vec(4u32..10, 0..6), 1..4), heads in 1usize..5) {
        let batch = TrainBatch { sources: vec![vec![4, EOS]; targets.len()], targets: targets.clone() };
        let shifted = batch.shifted_targets(heads);
        for (b, t) in targets.iter().enumerate() {
            let gold: Vec<u32> = t.iter().copied().chain([EOS]).collect();
            for i in 0..shifted.data.shape()[1] {
                for k in 0..heads {
                    prop_assert_eq!(shifted.data[[b, i, k]], if i < gold.len() { gold.get(i + k).copied() } else { None });
                }
            }
        }
    }

    #[test]
    fn hypotheses_are_ranked_joint_log_probabilities(seed in 0u64..40, tokens in prop::collection::vec(0u32..12, 1..5), k in 1usize..4) {
        let model = toy_model(seed, 2);
        let src = source(&tokens);
        for strategy in Decoding::ALL {
            let cfg = decode_config(strategy, k);
            let (hyps, metrics) = generate(&model, &[src.clone()], &cfg).unwrap();
            let again = generate(&model, &[src.clone()], &cfg).unwrap();
            prop_assert_eq!(&hyps, &again.0);
            prop_assert!(metrics.model_calls >= 1);
            prop_assert!(metrics.accepted_tokens <= metrics.drafted_tokens);
            if let Some(rate) = metrics.acceptance_rate() {
                prop_assert_eq!(rate, metrics.accepted_tokens as f64 / metrics.drafted_tokens as f64);
            }
            let hyps = &hyps[0];
            for pair in hyps.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            for h in hyps {
                // Scores along the prefix never increase; the last equals the reported score.
                let mut prefix = vec![BOS];
                let mut score = 0.0;
                for (i, &t) in h.tokens.iter().enumerate() {
                    prop_assert!(!(t == EOS && i + 1 < h.tokens.len()), "extended past eos");
                    let step = log_softmax(&full_logits(&model, &src, &prefix, 0))[t as usize];
                    prop_assert!(step <= 0.0);
                    score += step;
                    prefix.push(t);
                }
                prop_assert!((score - h.score).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn optimized_beam_search_only_saves_rows(seed in 0u64..200, tokens in prop::collection::vec(0u32..12, 1..6)) {
        let model = toy_model(seed, 0);
        let src = source(&tokens);
        let (a, ma) = beam_search(&model, &src, &decode_config(Decoding::Bs, 3)).unwrap();
        let (b, mb) = beam_search(&model, &src, &decode_config(Decoding::BsOpt, 3)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(mb.mean_batch_size() <= ma.mean_batch_size());
    }

    #[test]
    fn splits_are_disjoint_and_valid(seed in 0u64..1000) {
        let ds = gen_synthetic(&small_grammar(seed)).unwrap();
        let mut seen = HashSet::new();
        for p in ds.all_pairs() {
            prop_assert!(seen.insert(p.product.clone()), "{} in two splits", p.product);
            prop_assert!(validate_syntactic(&p.product).valid);
            prop_assert!(validate_syntactic(&p.reactants).valid);
        }
    }

    #[test]
    fn oracle_routes_are_cheap_sums_of_steps(seed in 0u64..1000, width in 1usize..5, max_depth in 1usize..6) {
        let ds = gen_synthetic(&small_grammar(seed)).unwrap();
        let stock: Stock = ds.stock().iter().cloned().collect();
        let config = PlanConfig { time_limit: None, beam_width: width, max_depth, max_iterations: 60, ..Default::default() };
        for pair in ds.test.iter().take(5) {
            let r = retro_star(&pair.product, OracleExpander::new(ds.grammar.clone()), &stock, &config).unwrap();
            prop_assert!(r.iterations <= config.max_iterations);
            let known = ds.grammar.depth_of(&pair.product);
            if known <= max_depth {
                prop_assert!(r.solved, "depth {} route missed", known);
            }
            let tree = &r.tree;
            for (id, m) in tree.molecules.iter().enumerate() {
                prop_assert!(m.depth <= max_depth);
                if m.expanded {
                    prop_assert!(m.depth < max_depth);
                }
                prop_assert!(m.cost >= 0.0);
                prop_assert!((m.cost - tree.path_cost(id)).abs() < 1e-9);
            }
            if r.solved {
                let routes = extract_solved_routes(tree, 3);
                prop_assert!(!routes.is_empty());
                for route in routes {
                    prop_assert!(route.depth() <= max_depth);
                    prop_assert!(route.leaves().iter().all(|l| stock.contains(l)));
                }
            }
        }
    }

    #[test]
    fn solved_share_is_exact(seed in 0u64..1000, n in 1usize..9, cap in 1usize..6) {
        let ds = gen_synthetic(&small_grammar(seed)).unwrap();
        let stock: Stock = ds.stock().iter().cloned().collect();
        let targets: Vec<String> = ds.train.iter().take(n).map(|p| p.product.clone()).collect();
        let settings: Vec<PlanSetting> = [Algorithm::RetroStar, Algorithm::Dfs]
            .into_iter()
            .map(|algorithm| PlanSetting {
                label: algorithm.to_string(),
                decoder: "oracle".into(),
                plan: PlanConfig { algorithm, max_iterations: cap, time_limit: None, ..Default::default() },
            })
            .collect();
        let report = bench_multi_step(&targets, &stock, &settings, |_| OracleExpander::new(ds.grammar.clone()), None).unwrap();
        for c in &report.configs {
            let solved = report.records.iter().filter(|r| r.config == c.label && r.solved).count();
            prop_assert_eq!(c.solved, solved);
            prop_assert_eq!(c.solved_pct, 100.0 * solved as f64 / n as f64);
            let calls: u64 = report.records.iter().filter(|r| r.config == c.label).map(|r| r.model_calls).sum();
            prop_assert_eq!(c.model_calls, calls);
        }
    }
}

#[test]
fn single_step_report_conserves_session_counts() {
    let ds = gen_synthetic(&small_grammar(1)).unwrap();
    let vocab = Vocabulary::build(ds.all_pairs().flat_map(|p| [p.product.as_str(), p.reactants.as_str()])).unwrap();
    let config = ModelConfig {
        d_model: 16,
        d_ff: 32,
        medusa_heads: 3,
        medusa_hidden: 8,
        ..ModelConfig::toy(vocab.len())
    };
    let model = Transformer::new(ModelParameters::init(&config, 0)).unwrap();
    let pairs: Vec<ReactionPair> = ds.test.iter().take(5).cloned().collect();
    let options = SingleStepOptions {
        strategies: vec![Decoding::Bs, Decoding::Msbs],
        batch_sizes: vec![1, 2],
        runs: 2,
        decode: DecodeConfig {
            beam_size: 2,
            max_len: 8,
            ..Default::default()
        },
    };
    let report = bench_single_step(&model, &vocab, &pairs, &options).unwrap();
    for cell in &report.cells {
        let cfg = DecodeConfig {
            strategy: cell.strategy,
            draft_len: if cell.strategy == Decoding::Msbs { 3 } else { options.decode.draft_len },
            ..options.decode.clone()
        };
        let sources: Vec<Vec<u32>> = pairs
            .iter()
            .map(|p| retrospec_core::model::encode_source(&vocab, &p.product).unwrap())
            .collect();
        let (mut calls, mut rows, mut drafted, mut accepted) = (0, 0, 0, 0);
        for chunk in sources.chunks(cell.batch_size) {
            let (_, m) = generate(&model, chunk, &cfg).unwrap();
            calls += m.model_calls;
            rows += m.rows;
            drafted += m.drafted_tokens;
            accepted += m.accepted_tokens;
        }
        assert_eq!(cell.model_calls, calls);
        assert_eq!(cell.metrics.rows, rows);
        assert_eq!(cell.metrics.drafted_tokens, drafted);
        assert_eq!(cell.metrics.accepted_tokens, accepted);
        assert!(cell.deterministic);
        if drafted > 0 {
            assert_eq!(cell.acceptance_rate, Some(accepted as f64 / drafted as f64));
        }
    }
}
