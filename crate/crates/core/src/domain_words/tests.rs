use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{builtin_domains, generate_synthetic_corpus, SyntheticSpec};

fn planted(seed: u64) -> (BowCorpus, Vec<String>, Vec<String>) {
    let a: Vec<String> = (0..12).map(|i| format!("alpha{}", (b'a' + i) as char)).collect();
    let b: Vec<String> = (0..12).map(|i| format!("beta{}", (b'a' + i) as char)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<(String, String)> = (0..60)
        .map(|d| {
            let src = if d % 2 == 0 { &a } else { &b };
            let words: Vec<&str> = (0..25).map(|_| src.choose(&mut rng).unwrap().as_str()).collect();
            ("planted".to_string(), words.join(" "))
        })
        .collect();
    (BowCorpus::from_documents(&docs, 1.0), a, b)
}

fn lda(k: usize, iterations: usize) -> LdaConfig {
    LdaConfig {
        num_topics: k,
        iterations,
        ..LdaConfig::default()
    }
}

#[test]
fn planted_topics_are_recovered() {
    let (bow, a, b) = planted(1);
    let model = fit_lda(&bow, &lda(2, 200)).unwrap();
    for t in 0..2 {
        let mut words: Vec<(f64, &String)> = model
            .vocab
            .iter()
            .enumerate()
            .map(|(w, s)| (model.topic_word_prob(t, w), s))
            .collect();
        words.sort_by(|x, y| y.0.total_cmp(&x.0));
        let top: Vec<&String> = words.iter().take(10).map(|(_, w)| *w).collect();
        let in_a = top.iter().filter(|w| a.contains(w)).count();
        let in_b = top.iter().filter(|w| b.contains(w)).count();
        assert!(in_a.max(in_b) >= 9, "topic {t}: {top:?}");
    }
}

#[test]
fn single_topic_is_smoothed_unigram() {
    let (bow, _, _) = planted(2);
    let model = fit_lda(&bow, &lda(1, 3)).unwrap();
    let n = bow.num_tokens() as f64;
    let v = bow.vocab().len() as f64;
    for w in 0..bow.vocab().len() {
        let count = bow.docs().iter().flat_map(|(_, d)| d).filter(|&&x| x == w).count() as f64;
        let expected = (count + 0.01) / (n + v * 0.01);
        assert!((model.topic_word_prob(0, w) - expected).abs() < 1e-15);
    }
}

#[test]
fn gibbs_is_deterministic_and_consistent() {
    let (bow, _, _) = planted(3);
    let mut sweeps = 0;
    let a = fit_lda_with(&bow, &lda(3, 20), |m| {
        assert!(m.is_consistent());
        sweeps += 1;
    })
    .unwrap();
    assert_eq!(sweeps, 20);
    let b = fit_lda(&bow, &lda(3, 20)).unwrap();
    assert_eq!(a.assignments, b.assignments);
    let mut other = lda(3, 20);
    other.seed = 9;
    assert_ne!(fit_lda(&bow, &other).unwrap().assignments, a.assignments);
}

#[test]
fn lda_contract_errors() {
    let empty = BowCorpus::from_documents(&[], 0.4);
    assert!(fit_lda(&empty, &lda(2, 1)).is_err());
    let (bow, _, _) = planted(4);
    assert!(fit_lda(&bow, &lda(0, 1)).is_err());
}

#[test]
fn top_words_ranking_contract() {
    let (bow, _, _) = planted(5);
    let model = fit_lda(&bow, &lda(2, 30)).unwrap();
    assert!(top_domain_words(&model, 0, "planted").words.is_empty());
    let all = top_domain_words(&model, model.vocab_size(), "planted");
    let mut sorted = all.words.clone();
    sorted.sort();
    let mut vocab = model.vocab.clone();
    vocab.sort();
    assert_eq!(sorted, vocab);
    for i in 1..all.words.len() {
        let (s0, s1) = (all.scores[i - 1], all.scores[i]);
        assert!(s0 > s1 || (s0 == s1 && all.words[i - 1] < all.words[i]));
    }
    assert_eq!(all, top_domain_words(&model, model.vocab_size(), "planted"));
}

#[test]
fn stopwords_and_frequent_words_filtered() {
    let docs = vec![
        ("d".to_string(), "the common menu".to_string()),
        ("d".to_string(), "the common chef".to_string()),
        ("d".to_string(), "common 42 wine".to_string()),
    ];
    let bow = BowCorpus::from_documents(&docs, 0.4);
    assert_eq!(bow.vocab(), ["chef", "menu", "wine"]);
    let only_stop = vec![("d".to_string(), "the and of".to_string())];
    assert!(BowCorpus::from_documents(&only_stop, 0.4).docs().is_empty());
}

#[test]
fn restaurant_words_come_from_its_lexicon() {
    let corpus = generate_synthetic_corpus(&SyntheticSpec {
        examples_per_domain: 100,
        overlap: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let lists = extract_domain_words(&corpus, &LdaConfig { iterations: 100, ..LdaConfig::default() }, 10).unwrap();
    let rest = lists.iter().find(|l| l.domain == "restaurant").unwrap();
    let lex = builtin_domains().iter().find(|d| d.name == "restaurant").unwrap().lexicon();
    let booking = ["food", "table", "people", "price", "range", "time", "book"];
    let hits = rest
        .words
        .iter()
        .filter(|w| lex.contains(&w.as_str()) || booking.contains(&w.as_str()))
        .count();
    assert!(hits >= 7, "{:?}", rest.words);
}

fn list(domain: &str, words: &[&str]) -> DomainWordList {
    DomainWordList {
        domain: domain.into(),
        words: words.iter().map(|w| w.to_string()).collect(),
        scores: Vec::new(),
    }
}

fn many(domain: &str, n: usize) -> DomainWordList {
    DomainWordList {
        domain: domain.into(),
        words: (0..n).map(|i| format!("{domain}{i}")).collect(),
        scores: Vec::new(),
    }
}

#[test]
fn prefix_sequence_quotas() {
    let lists: Vec<_> = ["d", "c", "b", "a"].iter().map(|d| many(d, 10)).collect();
    let seq = build_prefix_sequence(&lists, 16).unwrap();
    assert_eq!(seq.tokens.len(), 16);
    assert!(!seq.short);
    assert_eq!(&seq.tokens[..4], ["a0", "a1", "a2", "a3"]);
    assert_eq!(&seq.tokens[12..], ["d0", "d1", "d2", "d3"]);

    let seq = build_prefix_sequence(&lists, 6).unwrap();
    assert_eq!(seq.tokens, ["a0", "a1", "b0", "b1", "c0", "d0"]);

    let single = build_prefix_sequence(&[many("x", 10)], 5).unwrap();
    assert_eq!(single.tokens, ["x0", "x1", "x2", "x3", "x4"]);

    assert!(build_prefix_sequence(&lists, 3).is_err());
}

#[test]
fn prefix_sequence_duplicates_and_shortfall() {
    let lists = vec![list("a", &["w", "x", "y"]), list("b", &["w", "z", "v"])];
    let seq = build_prefix_sequence(&lists, 4).unwrap();
    assert_eq!(seq.tokens, ["w", "x", "z", "v"]);

    let lists = vec![list("a", &["p"]), list("b", &["q", "r", "s"])];
    let seq = build_prefix_sequence(&lists, 4).unwrap();
    assert_eq!(seq.tokens, ["p", "q", "r", "s"]);

    let seq = build_prefix_sequence(&lists, 6).unwrap();
    assert!(seq.short);
    assert_eq!(seq.tokens.len(), 4);
}

#[test]
fn corruption_counts() {
    let x: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
    let d = crate::data::distractor_words();
    assert_eq!(corrupt_domain_words(&x, 0.0, d, 1).unwrap(), x);
    let all = corrupt_domain_words(&x, 1.0, d, 1).unwrap();
    assert!(all.iter().all(|w| !x.contains(w)));
    let half = corrupt_domain_words(&x, 0.5, d, 1).unwrap();
    assert_eq!(half.iter().zip(&x).filter(|(a, b)| a != b).count(), 8);
    assert_eq!(half, corrupt_domain_words(&x, 0.5, d, 1).unwrap());
    assert!(corrupt_domain_words(&x, 1.5, d, 1).is_err());
    assert!(corrupt_domain_words(&x, -0.1, d, 1).is_err());
    assert!(corrupt_domain_words(&x, 0.5, &["w3"], 1).is_err());
}

#[test]
fn word_list_file_round_trip() {
    let l = list("restaurant", &["menu", "chef"]);
    assert_eq!(l.to_text(), "# domain: restaurant\nmenu\nchef\n");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.txt");
    l.save(&p).unwrap();
    assert_eq!(DomainWordList::load(&p).unwrap(), l);
    assert!(DomainWordList::parse("menu\nchef\n").is_err());
    assert!(DomainWordList::parse("# domain: r\nmenu\nmenu\n").is_err());
}

proptest! {
    #[test]
    fn prefix_sequence_never_exceeds_total(
        sizes in proptest::collection::vec(0usize..8, 1..5),
        total in 5usize..30,
        shared in 0usize..4,
    ) {
        prop_assume!(total >= sizes.len());
        let lists: Vec<DomainWordList> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut words: Vec<String> = (0..shared).map(|s| format!("s{s}")).collect();
                words.extend((0..n).map(|j| format!("d{i}w{j}")));
                DomainWordList { domain: format!("d{i}"), words, scores: Vec::new() }
            })
            .collect();
        let distinct = shared + sizes.iter().sum::<usize>();
        let seq = build_prefix_sequence(&lists, total).unwrap();
        prop_assert!(seq.tokens.len() <= total);
        prop_assert_eq!(seq.tokens.len(), total.min(distinct));
        let uniq: std::collections::HashSet<_> = seq.tokens.iter().collect();
        prop_assert_eq!(uniq.len(), seq.tokens.len());
    }

    #[test]
    fn corruption_replaces_exact_count(len in 1usize..40, f in 0.0f64..=1.0, seed: u64) {
        let x: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        let out = corrupt_domain_words(&x, f, crate::data::distractor_words(), seed).unwrap();
        let changed = out.iter().zip(&x).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (f * len as f64).round() as usize);
    }
}

#[test]
fn random_small_corpora_stay_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let docs: Vec<(String, String)> = (0..8)
            .map(|_| {
                let n = rng.random_range(1..12);
                let w: Vec<String> = (0..n).map(|_| format!("w{}", rng.random_range(0..15))).collect();
                ("x".to_string(), w.join(" "))
            })
            .collect();
        let bow = BowCorpus::from_documents(&docs, 1.0);
        let m = fit_lda(&bow, &lda(rng.random_range(1..4), 5)).unwrap();
        assert!(m.is_consistent());
    }
}
