use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{DialogueState, Prompt, Turn};
use crate::tensor::Tensor;
use crate::transformer::{special, ModelConfig, PrefixBank, Site};

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    fn is_subseq(s: &[&String], b: &[String]) -> bool {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == *x))
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subseq(&sub, b) {
            best = sub.len();
        }
    }
    best
}

/// Clipped overlap by counting every n-gram occurrence directly.
fn brute_overlap(c: &[String], r: &[String], n: usize) -> usize {
    if c.len() < n {
        return 0;
    }
    let grams: Vec<&[String]> = c.windows(n).collect();
    let mut seen: Vec<&[String]> = Vec::new();
    let mut total = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_c = grams.iter().filter(|x| x == &g).count();
        let in_r = if r.len() < n { 0 } else { r.windows(n).filter(|x| x == g).count() };
        total += in_c.min(in_r);
    }
    total
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(0..11);
    (0..n).map(|_| ["a", "b", "c", "d", "e"][rng.random_range(0..5)].to_string()).collect()
}

#[test]
fn worked_examples() {
    let s = rouge("the cat sat", "the cat sat");
    assert_eq!([s.r1.f1, s.r2.f1, s.rl.f1], [1.0, 1.0, 1.0]);
    let s = rouge("the cat sat", "the cat ran");
    assert!((s.r1.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.r2.f1 - 0.5).abs() < 1e-15);
    assert!((rouge("a b c d", "a c b d").rl.f1 - 0.75).abs() < 1e-15);
    assert_eq!(rouge("", "a b"), RougeScore::default());
    assert_eq!(rouge_tokens("The Cat, sat-down 9AM!"), ["the", "cat", "sat", "down", "9am"]);
}

#[test]
fn matches_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let c = random_tokens(&mut rng);
        let r = random_tokens(&mut rng);
        assert_eq!(lcs_len(&c, &r), brute_lcs(&c, &r));
        let s = rouge_tokens_score(&c, &r);
        for (n, prf) in [(1, s.r1), (2, s.r2)] {
            let grams = |len: usize| (len + 1).saturating_sub(n);
            let expect = Prf::from_counts(brute_overlap(&c, &r, n), grams(c.len()), grams(r.len()));
            assert_eq!(prf, expect);
        }
        assert_eq!(s.rl, Prf::from_counts(brute_lcs(&c, &r), c.len(), r.len()));
    }
}

proptest! {
    #[test]
    fn precision_recall_symmetry_and_bounds(
        c in proptest::collection::vec(0u8..5, 0..12),
        r in proptest::collection::vec(0u8..5, 1..12),
    ) {
        let c: Vec<String> = c.iter().map(|x| format!("w{x}")).collect();
        let r: Vec<String> = r.iter().map(|x| format!("w{x}")).collect();
        let a = rouge_tokens_score(&c, &r);
        let b = rouge_tokens_score(&r, &c);
        prop_assert_eq!(a.r1.recall, b.r1.precision);
        prop_assert_eq!(a.rl.recall, b.rl.precision);
        for p in [a.r1, a.r2, a.rl] {
            for v in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn appending_reference_ngram_never_lowers_recall(
        c in proptest::collection::vec(0u8..5, 0..10),
        r in proptest::collection::vec(0u8..5, 2..10),
        pick in 0usize..100,
    ) {
        let c: Vec<String> = c.iter().map(|x| format!("w{x}")).collect();
        let r: Vec<String> = r.iter().map(|x| format!("w{x}")).collect();
        for n in [1, 2] {
            let i = pick % (r.len() + 1 - n);
            let mut longer = c.clone();
            longer.extend_from_slice(&r[i..i + n]);
            prop_assert!(rouge_n_tokens(&longer, &r, n).recall >= rouge_n_tokens(&c, &r, n).recall);
        }
        let i = pick % r.len();
        let mut longer = c.clone();
        longer.push(r[i].clone());
        prop_assert!(rouge_l_tokens(&longer, &r).recall >= rouge_l_tokens(&c, &r).recall);
    }
}

fn example(turns: &[&str], summary: &str) -> DialogueExample {
    DialogueExample {
        id: "x-0001".into(),
        domain: "x".into(),
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, t)| Turn {
                speaker: if i % 2 == 0 { "user" } else { "system" }.into(),
                text: t.to_string(),
            })
            .collect(),
        prompt: Prompt::State(DialogueState::new("book", &[])),
        summary: summary.into(),
    }
}

#[test]
fn lead3_takes_first_three_sentences() {
    let two = example(&["hello there.", "hi! how"], "s");
    assert_eq!(lead3(&two), "hello there. hi! how");
    let five = example(&["one. two?", "three! four.", "five."], "s");
    assert_eq!(lead3(&five), "one. two? three!");
    assert_eq!(lead3(&five), lead3(&five));
}

#[test]
fn oracle_matches_exhaustive_subset_search() {
    let ex = example(
        &[
            "i need a train to cambridge.",
            "the weather is nice.",
            "it leaves on monday at 9am.",
            "for four people please.",
            "thank you so much.",
            "goodbye now.",
        ],
        "the user needs a train to cambridge on monday at 9am for four people.",
    );
    let sentences = split_sentences(&ex.flattened_text());
    assert_eq!(sentences.len(), 6);
    let score = |sel: &[usize]| {
        let text: Vec<&str> = sel.iter().map(|&i| sentences[i].as_str()).collect();
        rouge(&text.join(" "), &ex.summary).r2.f1
    };
    let mut best = 0.0;
    for mask in 1u32..64 {
        let sel: Vec<usize> = (0..6).filter(|i| mask & (1 << i) != 0).collect();
        if sel.len() <= 3 {
            best = f64::max(best, score(&sel));
        }
    }
    let mut chosen = oracle_select(&sentences, &ex.summary);
    chosen.sort_unstable();
    assert_eq!(score(&chosen), best);
    assert_eq!(chosen, [0, 2, 3]);

    let verbatim = example(&["alpha beta.", "gamma delta epsilon.", "zeta eta."], "gamma delta epsilon.");
    assert_eq!(oracle_select(&split_sentences(&verbatim.flattened_text()), &verbatim.summary)[0], 1);
    let disjoint = example(&["alpha beta.", "gamma delta."], "omega psi.");
    assert_eq!(oracle_greedy(&disjoint), "");
}

fn tiny_model() -> (EncoderDecoderModel, Banks) {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_encoder_len: 8,
        max_decoder_len: 7,
        d_m: 4,
    };
    let mut model = EncoderDecoderModel::new(cfg.clone(), 11).unwrap();
    // Scale the output layer so that distributions are peaked and EOS
    // shows up within the length limit.
    let emb = model.params_mut().unwrap().get_mut("embed.tokens").unwrap();
    for v in emb.values_mut() {
        *v *= 3.0;
    }
    model.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mk = |site, rng: &mut ChaCha8Rng| {
        PrefixBank::new(
            site,
            (0..2)
                .map(|_| (Tensor::randn(vec![3, 8], 0.5, rng), Tensor::randn(vec![3, 8], 0.5, rng)))
                .collect(),
        )
        .unwrap()
    };
    let banks = Banks {
        encoder_self: mk(Site::EncoderSelf, &mut rng),
        decoder_self: mk(Site::DecoderSelf, &mut rng),
        decoder_cross: mk(Site::DecoderCross, &mut rng),
    };
    (model, banks)
}

#[test]
fn beam_one_is_greedy_and_lengths_are_bounded() {
    let (model, banks) = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(1..8);
        let input: Vec<usize> = (0..n).map(|_| rng.random_range(special::MASK + 1..12)).collect();
        let max = rng.random_range(1..10);
        let g = greedy_decode(&model, &banks, &input, max).unwrap();
        let b = beam_decode(
            &model,
            &banks,
            &input,
            &DecodeConfig {
                beam_size: 1,
                max_tokens: max,
                length_penalty: 1.0,
            },
        )
        .unwrap();
        assert_eq!(g, b);
        assert!(g.tokens.len() <= max.min(7));
        let full = beam_decode(&model, &banks, &input, &DecodeConfig { max_tokens: max, ..DecodeConfig::default() }).unwrap();
        assert!(full.tokens.len() <= max.min(7));
        assert!(!full.tokens.contains(&special::EOS));
        let recomputed = sequence_log_prob(&model, &banks, &input, &full).unwrap();
        assert!((recomputed - full.log_prob).abs() < 1e-9);
    }
    assert!(beam_decode(&model, &banks, &[7], &DecodeConfig { beam_size: 0, ..DecodeConfig::default() }).is_err());
}

#[test]
fn wider_beam_scores_at_least_greedy() {
    let (model, banks) = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut g_sum, mut b_sum) = (0.0, 0.0);
    for _ in 0..30 {
        let n = rng.random_range(1..8);
        let input: Vec<usize> = (0..n).map(|_| rng.random_range(special::MASK + 1..12)).collect();
        let g = greedy_decode(&model, &banks, &input, 125).unwrap();
        let b = beam_decode(&model, &banks, &input, &DecodeConfig::default()).unwrap();
        g_sum += g.normalized(1.0);
        b_sum += b.normalized(1.0);
    }
    assert!(b_sum >= g_sum, "beam {b_sum} vs greedy {g_sum}");
}

#[test]
fn predictions_round_trip() {
    let preds = vec![
        Prediction::new("a", "the cat sat".into(), "the cat ran"),
        Prediction::new("b", String::new(), "x"),
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    write_predictions(&p, &preds).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("{\"id\":\"a\",\"prediction\":\"the cat sat\",\"r1\":"));
    assert_eq!(read_predictions(&p).unwrap(), preds);
    let m = mean_prediction_f1(&preds);
    assert!((m[0] - 1.0 / 3.0).abs() < 1e-15);
}
