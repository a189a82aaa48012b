//! ROUGE scoring, beam-search decoding and the extractive baselines.

mod decode;
mod rouge;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{assemble_encoder_input, DialogueExample, Tokenizer};
use crate::error::{DopError, Result};
use crate::transformer::{Banks, EncoderDecoderModel};

pub use decode::{
    beam_decode, greedy_decode, log_softmax, sequence_log_prob, DecodeConfig, Hypothesis,
};
pub use rouge::{
    lcs_len, mean_f1, rouge, rouge_l_tokens, rouge_n_tokens, rouge_tokens, rouge_tokens_score,
    Prf, RougeScore,
};

/// Sentences ending in `.`, `?` or `!`; a trailing fragment counts as one.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '?' | '!') {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// The first three sentences of the flattened dialogue.
pub fn lead3(example: &DialogueExample) -> String {
    split_sentences(&example.flattened_text())
        .into_iter()
        .take(3)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Indices, in selection order, of the sentences chosen by greedy ROUGE-2
/// F1 gain against `reference`.
pub fn oracle_select(sentences: &[String], reference: &str) -> Vec<usize> {
    let reference = rouge_tokens(reference);
    let toks: Vec<Vec<String>> = sentences.iter().map(|s| rouge_tokens(s)).collect();
    let score = |sel: &[usize]| {
        let mut ordered = sel.to_vec();
        ordered.sort_unstable();
        let cand: Vec<String> = ordered.iter().flat_map(|&i| toks[i].iter().cloned()).collect();
        rouge_n_tokens(&cand, &reference, 2).f1
    };
    let mut selected: Vec<usize> = Vec::new();
    let mut current = 0.0;
    loop {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..sentences.len() {
            if selected.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(i);
            let gain = score(&trial) - current;
            if gain > 0.0 && best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, i));
            }
        }
        match best {
            Some((g, i)) => {
                selected.push(i);
                current += g;
            }
            None => return selected,
        }
    }
}

/// Greedy extractive oracle; sentences are joined in document order.
pub fn oracle_greedy(example: &DialogueExample) -> String {
    let sentences = split_sentences(&example.flattened_text());
    let mut sel = oracle_select(&sentences, &example.summary);
    sel.sort_unstable();
    sel.iter().map(|&i| sentences[i].as_str()).collect::<Vec<_>>().join(" ")
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl Prediction {
    pub fn new(id: &str, prediction: String, reference: &str) -> Self {
        let s = rouge(&prediction, reference);
        Self {
            id: id.to_string(),
            prediction,
            r1: s.r1.f1,
            r2: s.r2.f1,
            rl: s.rl.f1,
        }
    }
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DopError::io(path, e))?;
    for p in preds {
        let line = serde_json::to_string(p)?;
        writeln!(f, "{line}").map_err(|e| DopError::io(path, e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| DopError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DopError::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Mean F1 triple of a prediction set.
pub fn mean_prediction_f1(preds: &[Prediction]) -> [f64; 3] {
    if preds.is_empty() {
        return [0.0; 3];
    }
    let n = preds.len() as f64;
    let s = preds
        .iter()
        .fold([0.0; 3], |a, p| [a[0] + p.r1, a[1] + p.r2, a[2] + p.rl]);
    [s[0] / n, s[1] / n, s[2] / n]
}

/// Decodes every example with shared banks.
pub fn predict(
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    banks: &Banks,
    examples: &[&DialogueExample],
    with_prompt: bool,
    cfg: &DecodeConfig,
) -> Result<Vec<Prediction>> {
    let max_len = model.config().max_encoder_len;
    examples
        .iter()
        .map(|ex| {
            let input = assemble_encoder_input(ex, tok, max_len, with_prompt);
            let hyp = if cfg.beam_size == 1 {
                greedy_decode(model, banks, &input.ids, cfg.max_tokens)?
            } else {
                beam_decode(model, banks, &input.ids, cfg)?
            };
            Ok(Prediction::new(&ex.id, tok.decode(&hyp.tokens), &ex.summary))
        })
        .collect()
}

#[cfg(test)]
mod tests;
