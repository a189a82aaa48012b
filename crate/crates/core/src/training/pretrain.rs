use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_encoder_input, speaker_tag, DialogueExample, Tokenizer};
use crate::error::{DopError, Result};
use crate::optim::{linear_lr, AdamW, AdamWConfig};
use crate::tensor::Tape;
use crate::transformer::{special, EncoderDecoderModel};

/// Denoising pretraining of the backbone on unlabeled dialogues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Optimizer steps; zero leaves the random initialisation untouched.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of encoder tokens replaced by MASK.
    pub mask_prob: f64,
    /// Chance that the encoder input carries the discrete prompt.
    pub prompt_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 8,
            lr: 3e-3,
            mask_prob: 0.15,
            prompt_prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean batch loss over each tenth of the run.
    pub loss_curve: Vec<f64>,
}

/// Corrupted input and clean target for one dialogue: the encoder sees the
/// (optionally prompted) dialogue with masked tokens, and the decoder
/// reconstructs the clean dialogue from a random turn onwards.
fn denoising_pair(
    ex: &DialogueExample,
    tok: &Tokenizer,
    model: &EncoderDecoderModel,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mc = model.config();
    let with_prompt = rng.random::<f64>() < cfg.prompt_prob;
    let mut input = assemble_encoder_input(ex, tok, mc.max_encoder_len, with_prompt).ids;
    for id in input.iter_mut() {
        if *id != special::SEP && rng.random::<f64>() < cfg.mask_prob {
            *id = special::MASK;
        }
    }
    let start = rng.random_range(0..ex.turns.len());
    let mut target = Vec::new();
    for t in &ex.turns[start..] {
        target.push(tok.id(&speaker_tag(&t.speaker)));
        target.extend(tok.encode(&t.text));
    }
    target.truncate(mc.max_decoder_len - 1);
    target.push(special::EOS);
    (input, target)
}

/// Trains every backbone parameter on the denoising task. The model must
/// not be frozen.
pub fn pretrain_backbone(
    model: &mut EncoderDecoderModel,
    tok: &Tokenizer,
    dialogues: &[&DialogueExample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.steps == 0 {
        return Ok(PretrainReport::default());
    }
    if dialogues.is_empty() || cfg.batch_size == 0 {
        return Err(DopError::contract("pretraining needs dialogues and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pairs.push(denoising_pair(dialogues[order[cursor]], tok, model, cfg, &mut rng));
            cursor += 1;
        }
        let total: usize = pairs.iter().map(|(_, t)| t.len()).sum();
        let mut acc = None;
        for (input, target) in &pairs {
            let l = model.sequence_nll_on(&mut tape, input, target, None)?;
            let w = tape.scale(l, target.len() as f64 / total as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
        let loss = acc.expect("nonempty batch");
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(DopError::NonFinite(format!("pretraining loss {value} at step {step}")));
        }
        losses.push(value);
        tape.backward(loss)?;
        let params = model.params_mut()?;
        params.zero_grads();
        params.absorb_grads(&tape)?;
        opt.step(&mut [&mut *params], linear_lr(cfg.lr, step, cfg.steps))?;
        params.zero_grads();
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {value:.4}");
        }
    }
    let chunk = cfg.steps.div_ceil(10);
    Ok(PretrainReport {
        loss_curve: losses
            .chunks(chunk)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect(),
    })
}
