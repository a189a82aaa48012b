//! Per-domain keyword extraction with LDA and assembly of the domain-word
//! prefix sequence.

mod lda;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Tokenizer};
use crate::error::{DopError, Result};

pub use lda::{fit_lda, fit_lda_with, LdaConfig, LdaModel};

/// Words appearing in more than this fraction of documents are dropped.
pub const DOC_FREQ_CUTOFF: f64 = 0.4;

pub const STOPWORDS: &[&str] = &[
    "a", "about", "ok", "okay", "hello", "goodbye", "many", "one", "like", "much", "get", "well",
    "anything", "else", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as",
    "at", "be", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could",
    "did", "do", "does", "doing", "done", "down", "during", "each", "few", "for", "from", "further",
    "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "just", "let", "me", "more", "most", "must", "my", "need",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "out", "over", "own", "please", "same", "she", "should", "so", "some", "such", "sure", "than",
    "thank", "thanks", "that", "the", "their", "theirs", "them", "then", "there", "these", "they",
    "this", "those", "through", "to", "too", "under", "until", "up", "us", "very", "want", "was",
    "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with",
    "would", "yes", "you", "your", "yours",
];

/// Bag-of-words documents over a shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BowCorpus {
    vocab: Vec<String>,
    docs: Vec<(String, Vec<usize>)>,
}

impl BowCorpus {
    /// Tokenizes `(domain, text)` documents, dropping built-in stopwords,
    /// tokens without letters, and tokens found in more than
    /// `doc_freq_cutoff` of all documents. Empty documents are dropped.
    pub fn from_documents(docs: &[(String, String)], doc_freq_cutoff: f64) -> Self {
        let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
        let tokenized: Vec<(String, Vec<String>)> = docs
            .iter()
            .map(|(d, text)| {
                let toks = Tokenizer::split(text)
                    .into_iter()
                    .filter(|w| w.chars().any(char::is_alphabetic) && !stop.contains(w.as_str()))
                    .collect();
                (d.clone(), toks)
            })
            .collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, toks) in &tokenized {
            let uniq: BTreeSet<&str> = toks.iter().map(String::as_str).collect();
            for w in uniq {
                *df.entry(w).or_default() += 1;
            }
        }
        let limit = doc_freq_cutoff * docs.len() as f64;
        let vocab: Vec<String> = df
            .iter()
            .filter(|(_, &c)| c as f64 <= limit)
            .map(|(w, _)| w.to_string())
            .collect();
        let index: BTreeMap<&str, usize> =
            vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let docs = tokenized
            .iter()
            .map(|(d, toks)| {
                let ids: Vec<usize> = toks.iter().filter_map(|w| index.get(w.as_str()).copied()).collect();
                (d.clone(), ids)
            })
            .filter(|(_, ids)| !ids.is_empty())
            .collect();
        Self { vocab, docs }
    }

    /// One document per dialogue (turn texts only).
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let docs: Vec<(String, String)> = corpus
            .examples()
            .iter()
            .map(|e| (e.domain.clone(), e.flattened_text()))
            .collect();
        Self::from_documents(&docs, DOC_FREQ_CUTOFF)
    }

    /// Documents of one domain over a compacted vocabulary.
    pub fn restrict(&self, domain: &str) -> Self {
        let used: BTreeSet<usize> = self
            .docs
            .iter()
            .filter(|(d, _)| d == domain)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        Self {
            vocab: used.iter().map(|&o| self.vocab[o].clone()).collect(),
            docs: self
                .docs
                .iter()
                .filter(|(d, _)| d == domain)
                .map(|(d, ids)| (d.clone(), ids.iter().map(|i| remap[i]).collect()))
                .collect(),
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn docs(&self) -> &[(String, Vec<usize>)] {
        &self.docs
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(|(_, d)| d.len()).sum()
    }
}

/// Ranked keywords of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainWordList {
    pub domain: String,
    pub words: Vec<String>,
    /// Ranking scores aligned with `words`; empty when loaded from a file.
    pub scores: Vec<f64>,
}

impl DomainWordList {
    pub fn to_text(&self) -> String {
        let mut s = format!("# domain: {}\n", self.domain);
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let domain = header
            .strip_prefix("# domain:")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| DopError::Parse {
                location: "line 1".into(),
                detail: format!("expected `# domain: <label>`, got {header:?}"),
            })?;
        let words: Vec<String> = lines
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let uniq: HashSet<&String> = words.iter().collect();
        if uniq.len() != words.len() {
            return Err(DopError::Parse {
                location: domain.into(),
                detail: "repeated word".into(),
            });
        }
        Ok(Self {
            domain: domain.to_string(),
            words,
            scores: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| DopError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DopError::io(path, e))?;
        Self::parse(&text)
    }
}

/// The `k` words with the highest `max_t P(w | t)`, ties broken
/// lexicographically.
pub fn top_domain_words(model: &LdaModel, k: usize, domain: &str) -> DomainWordList {
    let mut scored: Vec<(f64, &String)> = model
        .vocab
        .iter()
        .enumerate()
        .map(|(w, word)| {
            let s = (0..model.num_topics)
                .map(|t| model.topic_word_prob(t, w))
                .fold(f64::NEG_INFINITY, f64::max);
            (s, word)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(k);
    DomainWordList {
        domain: domain.to_string(),
        words: scored.iter().map(|(_, w)| (*w).clone()).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
    }
}

/// Fits one model per domain of `corpus` and returns the top `k` words of
/// each, in label order.
pub fn extract_domain_words(corpus: &Corpus, cfg: &LdaConfig, k: usize) -> Result<Vec<DomainWordList>> {
    let bow = BowCorpus::from_corpus(corpus);
    corpus
        .domains()
        .iter()
        .map(|d| {
            let model = fit_lda(&bow.restrict(d), cfg)?;
            Ok(top_domain_words(&model, k, d))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixSequence {
    pub tokens: Vec<String>,
    /// Fewer distinct words were available than requested.
    pub short: bool,
}

/// Concatenates per-domain quotas of keywords in label order. Each domain
/// gets `total_len / n` words and the remainder goes to the first domains.
/// A word already taken by an earlier domain is skipped and replaced by the
/// owner's next-ranked word; quotas a domain cannot fill are topped up from
/// the other domains in label order.
pub fn build_prefix_sequence(lists: &[DomainWordList], total_len: usize) -> Result<PrefixSequence> {
    if lists.is_empty() || total_len < lists.len() {
        return Err(DopError::contract(format!(
            "prefix length {total_len} is below the number of domains {}",
            lists.len()
        )));
    }
    let mut sorted: Vec<&DomainWordList> = lists.iter().collect();
    sorted.sort_by(|a, b| a.domain.cmp(&b.domain));
    let n = sorted.len();
    let mut used: HashSet<&str> = HashSet::new();
    let mut cursor = vec![0usize; n];
    let mut blocks: Vec<Vec<String>> = vec![Vec::new(); n];

    let mut deficit = 0;
    for i in 0..n {
        let quota = total_len / n + usize::from(i < total_len % n);
        for _ in 0..quota {
            match take(&sorted[i].words, &mut used, &mut cursor[i]) {
                Some(w) => blocks[i].push(w),
                None => deficit += 1,
            }
        }
    }
    'fill: while deficit > 0 {
        let mut progressed = false;
        for i in 0..n {
            if deficit == 0 {
                break 'fill;
            }
            if let Some(w) = take(&sorted[i].words, &mut used, &mut cursor[i]) {
                blocks[i].push(w);
                deficit -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let tokens: Vec<String> = blocks.into_iter().flatten().collect();
    let short = tokens.len() < total_len;
    if short {
        log::warn!("domain-word sequence has {} of {total_len} words", tokens.len());
    }
    Ok(PrefixSequence { tokens, short })
}

fn take<'a>(words: &'a [String], used: &mut HashSet<&'a str>, cursor: &mut usize) -> Option<String> {
    while *cursor < words.len() {
        let w = words[*cursor].as_str();
        *cursor += 1;
        if used.insert(w) {
            return Some(w.to_string());
        }
    }
    None
}

/// Replaces exactly `round(fraction * len)` positions, chosen uniformly, by
/// distinct distractor words (reused only when the pool runs out).
pub fn corrupt_domain_words(
    x_dw: &[String],
    fraction: f64,
    distractors: &[&str],
    seed: u64,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DopError::contract(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let originals: HashSet<&str> = x_dw.iter().map(String::as_str).collect();
    if distractors.is_empty() || distractors.iter().any(|d| originals.contains(d)) {
        return Err(DopError::contract(
            "distractor vocabulary must be nonempty and disjoint from the domain words",
        ));
    }
    let n = (fraction * x_dw.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = index::sample(&mut rng, x_dw.len(), n).into_vec();
    let mut pool: Vec<&str> = distractors.to_vec();
    pool.shuffle(&mut rng);
    let mut out = x_dw.to_vec();
    for (j, p) in positions.into_iter().enumerate() {
        out[p] = pool[j % pool.len()].to_string();
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
