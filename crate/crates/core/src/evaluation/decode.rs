use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DopError, Result};
use crate::transformer::{special, Banks, DecoderCache, EncoderDecoderModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_tokens: usize,
    /// Scores are `log p / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 6,
            max_tokens: 125,
            length_penalty: 1.0,
        }
    }
}

/// A decoded sequence without BOS or EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored steps.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn normalized(&self, penalty: f64) -> f64 {
        self.log_prob / (self.steps().max(1) as f64).powf(penalty)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn limit(model: &EncoderDecoderModel, max_tokens: usize) -> usize {
    max_tokens.min(model.config().max_decoder_len)
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode(
    model: &EncoderDecoderModel,
    banks: &Banks,
    input_ids: &[usize],
    max_tokens: usize,
) -> Result<Hypothesis> {
    let max = limit(model, max_tokens);
    let mut cache = model.start_decoding(input_ids, banks)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut next = special::BOS;
    while hyp.tokens.len() < max {
        let lp = log_softmax(&cache.step(next)?);
        let (best, &score) = lp
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        hyp.log_prob += score;
        if best == special::EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(best);
        next = best;
    }
    Ok(hyp)
}

struct Beam<'m> {
    hyp: Hypothesis,
    cache: DecoderCache<'m>,
}

/// Length-normalized beam search. Candidates are ranked by cumulative
/// log-probability with ties going to the earlier beam, then the lower
/// token id; an EOS candidate ranked within the beam finishes its
/// hypothesis. Search stops once `beam_size` hypotheses have finished or
/// the length limit is reached.
pub fn beam_decode(
    model: &EncoderDecoderModel,
    banks: &Banks,
    input_ids: &[usize],
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(DopError::contract("beam size must be at least 1"));
    }
    let max = limit(model, cfg.max_tokens);
    let mut first = model.start_decoding(input_ids, banks)?;
    let mut pending = vec![first.step(special::BOS)?];
    let mut beams = vec![Beam {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        cache: first,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    loop {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, logits) in pending.iter().enumerate() {
            let lp = log_softmax(logits);
            for (tok, v) in lp.into_iter().enumerate() {
                cands.push((beams[b].hyp.log_prob + v, b, tok));
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        let mut next: Vec<(Hypothesis, usize)> = Vec::new();
        for (rank, &(score, b, tok)) in cands.iter().enumerate() {
            if next.len() >= cfg.beam_size {
                break;
            }
            if tok == special::EOS {
                if rank < cfg.beam_size {
                    let mut h = beams[b].hyp.clone();
                    h.log_prob = score;
                    h.finished = true;
                    finished.push(h);
                }
                continue;
            }
            let mut h = beams[b].hyp.clone();
            h.tokens.push(tok);
            h.log_prob = score;
            next.push((h, b));
        }
        if finished.len() >= cfg.beam_size || next.is_empty() {
            break;
        }
        let mut new_beams = Vec::with_capacity(next.len());
        let mut new_pending = Vec::with_capacity(next.len());
        for (h, b) in next {
            let last = *h.tokens.last().expect("nonempty");
            if h.tokens.len() >= max {
                // No room to score EOS; the hypothesis ends here.
                finished.push(h);
                continue;
            }
            let mut cache = beams[b].cache.clone();
            new_pending.push(cache.step(last)?);
            new_beams.push(Beam { hyp: h, cache });
        }
        if new_beams.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
        beams = new_beams;
        pending = new_pending;
    }
    if finished.is_empty() {
        finished.extend(beams.into_iter().map(|b| b.hyp));
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.normalized(cfg.length_penalty)
                .partial_cmp(&b.normalized(cfg.length_penalty))
                .unwrap_or(Ordering::Equal)
                .then(j.cmp(i))
        })
        .map(|(_, h)| h)
        .expect("at least one hypothesis");
    Ok(best)
}

/// Total log-probability of `hyp` under the model,
/// recomputed from scratch.
pub fn sequence_log_prob(
    model: &EncoderDecoderModel,
    banks: &Banks,
    input_ids: &[usize],
    hyp: &Hypothesis,
) -> Result<f64> {
    let mut cache = model.start_decoding(input_ids, banks)?;
    let mut total = 0.0;
    let mut prev = special::BOS;
    let mut seq = hyp.tokens.clone();
    if hyp.finished {
        seq.push(special::EOS);
    }
    for &t in &seq {
        total += log_softmax(&cache.step(prev)?)[t];
        prev = t;
    }
    Ok(total)
}
