use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From an overlap count and the two sequence sizes.
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 { 0.0 } else { overlap as f64 / candidate as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

/// Lowercased alphanumeric runs; no stemming.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n_tokens(candidate: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    Prf::from_counts(overlap, total(candidate.len()), total(reference.len()))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge_tokens_score(candidate: &[String], reference: &[String]) -> RougeScore {
    RougeScore {
        r1: rouge_n_tokens(candidate, reference, 1),
        r2: rouge_n_tokens(candidate, reference, 2),
        rl: rouge_l_tokens(candidate, reference),
    }
}

/// ROUGE-1/2/L of `candidate` against `reference`. An empty candidate
/// scores zero everywhere.
pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    rouge_tokens_score(&rouge_tokens(candidate), &rouge_tokens(reference))
}

/// Mean F1 triple over a set of scores.
pub fn mean_f1(scores: &[RougeScore]) -> [f64; 3] {
    if scores.is_empty() {
        return [0.0; 3];
    }
    let n = scores.len() as f64;
    let s = scores.iter().fold([0.0; 3], |acc, r| {
        [acc[0] + r.r1.f1, acc[1] + r.r2.f1, acc[2] + r.rl.f1]
    });
    [s[0] / n, s[1] / n, s[2] / n]
}
