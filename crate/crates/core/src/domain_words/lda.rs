use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BowCorpus;
use crate::error::{DopError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaConfig {
    pub num_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            num_topics: 5,
            alpha: 0.1,
            beta: 0.01,
            iterations: 500,
            seed: 0,
        }
    }
}

/// Collapsed-Gibbs LDA state.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub num_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub vocab: Vec<String>,
    /// `K × |vocab|`, row-major.
    pub topic_word: Vec<u32>,
    pub topic_totals: Vec<u32>,
    /// `docs × K`, row-major.
    pub doc_topic: Vec<u32>,
    pub assignments: Vec<Vec<usize>>,
    docs: Vec<Vec<usize>>,
}

impl LdaModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Smoothed `P(word | topic)`.
    pub fn topic_word_prob(&self, topic: usize, word: usize) -> f64 {
        let v = self.vocab.len() as f64;
        (self.topic_word[topic * self.vocab.len() + word] as f64 + self.beta)
            / (self.topic_totals[topic] as f64 + v * self.beta)
    }

    /// Count tables agree with the per-token assignments.
    pub fn is_consistent(&self) -> bool {
        let k = self.num_topics;
        let v = self.vocab.len();
        let mut tw = vec![0u32; k * v];
        let mut tt = vec![0u32; k];
        let mut dt = vec![0u32; self.docs.len() * k];
        for (d, (doc, z)) in self.docs.iter().zip(&self.assignments).enumerate() {
            if doc.len() != z.len() {
                return false;
            }
            for (&w, &t) in doc.iter().zip(z) {
                tw[t * v + w] += 1;
                tt[t] += 1;
                dt[d * k + t] += 1;
            }
        }
        tw == self.topic_word && tt == self.topic_totals && dt == self.doc_topic
    }
}

/// Fits one LDA model by collapsed Gibbs sampling over `corpus`.
pub fn fit_lda(corpus: &BowCorpus, cfg: &LdaConfig) -> Result<LdaModel> {
    fit_lda_with(corpus, cfg, |_| {})
}

/// As [`fit_lda`], calling `on_sweep` after every sweep.
pub fn fit_lda_with(
    corpus: &BowCorpus,
    cfg: &LdaConfig,
    mut on_sweep: impl FnMut(&LdaModel),
) -> Result<LdaModel> {
    if corpus.num_tokens() == 0 {
        return Err(DopError::contract("LDA needs a nonempty corpus"));
    }
    if cfg.num_topics == 0 {
        return Err(DopError::contract("LDA needs at least one topic"));
    }
    if !(cfg.alpha > 0.0 && cfg.beta > 0.0) {
        return Err(DopError::contract("LDA priors must be positive"));
    }
    let k = cfg.num_topics;
    let v = corpus.vocab().len();
    let docs: Vec<Vec<usize>> = corpus.docs().iter().map(|(_, d)| d.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = LdaModel {
        num_topics: k,
        alpha: cfg.alpha,
        beta: cfg.beta,
        seed: cfg.seed,
        vocab: corpus.vocab().to_vec(),
        topic_word: vec![0; k * v],
        topic_totals: vec![0; k],
        doc_topic: vec![0; docs.len() * k],
        assignments: Vec::with_capacity(docs.len()),
        docs: Vec::new(),
    };
    for (d, doc) in docs.iter().enumerate() {
        let z: Vec<usize> = doc.iter().map(|_| rng.random_range(0..k)).collect();
        for (&w, &t) in doc.iter().zip(&z) {
            m.topic_word[t * v + w] += 1;
            m.topic_totals[t] += 1;
            m.doc_topic[d * k + t] += 1;
        }
        m.assignments.push(z);
    }
    m.docs = docs;

    let vbeta = v as f64 * cfg.beta;
    let mut p = vec![0.0; k];
    for _ in 0..cfg.iterations {
        for d in 0..m.docs.len() {
            for i in 0..m.docs[d].len() {
                let w = m.docs[d][i];
                let old = m.assignments[d][i];
                m.topic_word[old * v + w] -= 1;
                m.topic_totals[old] -= 1;
                m.doc_topic[d * k + old] -= 1;

                let mut total = 0.0;
                for t in 0..k {
                    let nw = m.topic_word[t * v + w] as f64 + cfg.beta;
                    let nt = m.topic_totals[t] as f64 + vbeta;
                    let nd = m.doc_topic[d * k + t] as f64 + cfg.alpha;
                    total += nw / nt * nd;
                    p[t] = total;
                }
                let u = rng.random::<f64>() * total;
                let new = p.iter().position(|&c| u < c).unwrap_or(k - 1);

                m.topic_word[new * v + w] += 1;
                m.topic_totals[new] += 1;
                m.doc_topic[d * k + new] += 1;
                m.assignments[d][i] = new;
            }
        }
        on_sweep(&m);
    }
    Ok(m)
}
