use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Corpus, DialogueExample};
use crate::transformer::special;

/// Speaker tags kept as single literal tokens.
pub const SPEAKER_TAGS: [&str; 2] = ["USER:", "SYSTEM:"];

const SPECIAL_NAMES: [&str; 6] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>", "<mask>"];

/// Punctuation that attaches to the preceding token when detokenizing.
const CLOSING: [&str; 6] = [".", ",", "?", "!", ":", ";"];

/// Word-level vocabulary: lowercased alphanumeric runs plus single
/// punctuation characters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
        let mut out = String::new();
        for p in pieces {
            let p = p.as_ref();
            if !out.is_empty() && !CLOSING.contains(&p) {
                out.push(' ');
            }
            out.push_str(p);
        }
        out
    }

    /// Specials and speaker tags first, then words by descending frequency
    /// with ties in lexicographic order, then any `extra` words not seen.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in Self::split(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut vocab: Vec<String> = SPECIAL_NAMES
            .iter()
            .chain(SPEAKER_TAGS.iter())
            .map(|s| s.to_string())
            .collect();
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in words {
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let mut extra: Vec<String> = extra.iter().flat_map(|w| Self::split(w)).collect();
        extra.sort();
        extra.dedup();
        for w in extra {
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        Self::from(vocab)
    }

    /// Vocabulary over every text field of `corpus` plus `extra`.
    pub fn from_corpus(corpus: &Corpus, extra: &[&str]) -> Self {
        let mut texts: Vec<String> = Vec::new();
        for e in corpus.examples() {
            texts.extend(e.turns.iter().map(|t| t.text.clone()));
            texts.push(e.prompt.render());
            texts.push(e.summary.clone());
        }
        let mut tok = Self::build(texts.iter().map(String::as_str), extra);
        for e in corpus.examples() {
            for t in &e.turns {
                let tag = speaker_tag(&t.speaker);
                if !tok.index.contains_key(&tag) {
                    tok.index.insert(tag.clone(), tok.vocab.len());
                    tok.vocab.push(tag);
                }
            }
        }
        tok
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Id of a single token, UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or(SPECIAL_NAMES[special::UNK], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::split(text).iter().map(|w| self.id(w)).collect()
    }

    /// Text of `ids` up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != special::EOS)
            .filter(|&&i| i != special::PAD && i != special::BOS)
            .map(|&i| self.token(i))
            .collect();
        Self::detokenize(&pieces)
    }

    /// Summary ids cut to leave room for the closing EOS.
    pub fn target_ids(&self, summary: &str, max_decoder_len: usize) -> Vec<usize> {
        let mut ids = self.encode(summary);
        ids.truncate(max_decoder_len.saturating_sub(1));
        ids.push(special::EOS);
        ids
    }

    /// Speaker tags followed by turn tokens.
    pub fn dialogue_ids(&self, example: &DialogueExample) -> Vec<usize> {
        let mut ids = Vec::new();
        for t in &example.turns {
            ids.push(self.id(&speaker_tag(&t.speaker)));
            ids.extend(self.encode(&t.text));
        }
        ids
    }
}

pub fn speaker_tag(speaker: &str) -> String {
    format!("{}:", speaker.trim().to_uppercase())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    /// Tokens contributed by the prompt, SEP excluded.
    pub prompt_len: usize,
    pub truncated: bool,
}

/// `tokens(prompt) ++ [SEP] ++ tokens(dialogue)`, cut to `max_len` by
/// dropping dialogue tokens first. Without a prompt the dialogue stands
/// alone.
pub fn assemble_encoder_input(
    example: &DialogueExample,
    tokenizer: &Tokenizer,
    max_len: usize,
    with_prompt: bool,
) -> EncoderInput {
    let dialogue = tokenizer.dialogue_ids(example);
    let mut prompt = if with_prompt {
        tokenizer.encode(&example.prompt.render())
    } else {
        Vec::new()
    };
    let full_len = if prompt.is_empty() {
        dialogue.len()
    } else {
        prompt.len() + 1 + dialogue.len()
    };
    let truncated = full_len > max_len;
    if prompt.is_empty() {
        let ids = dialogue[..dialogue.len().min(max_len)].to_vec();
        return EncoderInput {
            ids,
            prompt_len: 0,
            truncated,
        };
    }
    prompt.truncate(max_len);
    let prompt_len = prompt.len();
    let mut ids = prompt;
    if ids.len() < max_len {
        ids.push(special::SEP);
        let room = max_len - ids.len();
        ids.extend(dialogue.iter().take(room));
    }
    EncoderInput {
        ids,
        prompt_len,
        truncated,
    }
}
