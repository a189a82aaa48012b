//! The prefix training loop, few-shot continuation, the full fine-tuning
//! baseline and denoising pretraining of the backbone.

mod pretrain;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_encoder_input, DialogueExample, SplitPlan, Tokenizer};
use crate::error::{DopError, Result};
use crate::evaluation::{greedy_decode, mean_f1, rouge, RougeScore};
use crate::optim::{linear_lr, AdamW, AdamWConfig};
use crate::prefix::{Census, DomainPrefix, SiteMask};
use crate::tensor::{ParamSet, Tape, Var};
use crate::transformer::{Banks, EncoderDecoderModel, TapeBanks};

pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Validation examples decoded after every epoch; `None` uses all.
    pub valid_limit: Option<usize>,
    /// Length limit of validation decoding.
    pub valid_max_tokens: usize,
    /// Chance that a prefix row is replaced by another trained row for one
    /// step, so the prefix tolerates swapped domain words at test time.
    pub word_swap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 5,
            initial_lr: 5e-5,
            weight_decay: 0.0,
            grad_clip_norm: Some(1.0),
            seed: 0,
            valid_limit: None,
            valid_max_tokens: 125,
            word_swap: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DopError::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.initial_lr > 0.0) {
            return Err(DopError::contract("initial_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.word_swap) {
            return Err(DopError::contract("word_swap must lie in [0, 1]"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip_norm,
            ..AdamWConfig::default()
        })
    }
}

/// One tokenized training or validation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub id: String,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub reference: String,
}

impl Seq2Seq {
    pub fn new(ex: &DialogueExample, tok: &Tokenizer, model: &EncoderDecoderModel, with_prompt: bool) -> Self {
        let cfg = model.config();
        Self {
            id: ex.id.clone(),
            input: assemble_encoder_input(ex, tok, cfg.max_encoder_len, with_prompt).ids,
            target: tok.target_ids(&ex.summary, cfg.max_decoder_len),
            reference: ex.summary.clone(),
        }
    }
}

/// Tokenized train and validation sets of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<Seq2Seq>,
    pub valid: Vec<Seq2Seq>,
    pub few_shot_k: usize,
}

impl TrainData {
    pub fn from_split(
        corpus: &crate::data::Corpus,
        split: &SplitPlan,
        tok: &Tokenizer,
        model: &EncoderDecoderModel,
        with_prompt: bool,
    ) -> Result<Self> {
        let enc = |ids: &[String]| -> Result<Vec<Seq2Seq>> {
            Ok(corpus
                .select(ids)?
                .into_iter()
                .map(|e| Seq2Seq::new(e, tok, model, with_prompt))
                .collect())
        };
        Ok(Self {
            train: enc(&split.train)?,
            valid: enc(&split.valid)?,
            few_shot_k: split.few_shot_k,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_r1: f64,
    pub valid_r2: f64,
    pub valid_rl: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_nll,valid_r1,valid_r2,valid_rl,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}\n",
            r.epoch, r.train_nll, r.valid_r1, r.valid_r2, r.valid_rl, r.lr
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DopError::io(path, e))?;
    f.write_all(metrics_csv(rows).as_bytes()).map_err(|e| DopError::io(path, e))
}

/// Best-epoch prefix plus the run's log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub prefix: DomainPrefix,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch of the returned prefix; 0 when training stopped before the
    /// first epoch finished.
    pub best_epoch: usize,
    pub census: Census,
    pub backbone_checksum: String,
    /// Set when training stopped on a non-finite loss; the prefix is then
    /// the last good one.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: EncoderDecoderModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub aborted: Option<String>,
}

/// Token-weighted mean NLL of a batch, sharing one set of banks.
fn batch_loss(
    tape: &mut Tape,
    model: &EncoderDecoderModel,
    batch: &[&Seq2Seq],
    banks: Option<&TapeBanks>,
) -> Result<Var> {
    let total: usize = batch.iter().map(|e| e.target.len()).sum();
    let mut acc: Option<Var> = None;
    for ex in batch {
        let l = model.sequence_nll_on(tape, &ex.input, &ex.target, banks)?;
        let w = tape.scale(l, ex.target.len() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, w)?,
            None => w,
        });
    }
    acc.ok_or_else(|| DopError::contract("empty batch"))
}

/// Greedy-decoded ROUGE on (a prefix of) `valid`.
pub fn validate(
    model: &EncoderDecoderModel,
    banks: &Banks,
    tok: &Tokenizer,
    valid: &[Seq2Seq],
    limit: Option<usize>,
    max_tokens: usize,
) -> Result<[f64; 3]> {
    let n = limit.unwrap_or(valid.len()).min(valid.len());
    let scores: Vec<RougeScore> = valid[..n]
        .iter()
        .map(|ex| {
            let hyp = greedy_decode(model, banks, &ex.input, max_tokens)?;
            Ok(rouge(&tok.decode(&hyp.tokens), &ex.reference))
        })
        .collect::<Result<_>>()?;
    Ok(mean_f1(&scores))
}

/// The pieces a training loop needs from what it optimizes.
trait Learner {
    fn loss(&self, tape: &mut Tape, model: &EncoderDecoderModel, batch: &[&Seq2Seq], rng: &mut ChaCha8Rng)
        -> Result<Var>;
    fn sets(&mut self) -> Vec<&mut ParamSet>;
    fn banks(&self, model: &EncoderDecoderModel) -> Result<Banks>;
    fn check(&self, opt: &AdamW) -> Result<()>;
}

#[derive(Clone)]
struct PrefixLearner {
    prefix: DomainPrefix,
    mask: SiteMask,
    swap: f64,
}

impl Learner for PrefixLearner {
    fn loss(&self, tape: &mut Tape, model: &EncoderDecoderModel, batch: &[&Seq2Seq], rng: &mut ChaCha8Rng) -> Result<Var> {
        let banks = if self.swap > 0.0 {
            let p = self.prefix.prefix_len();
            let rows: Vec<usize> = (0..p)
                .map(|i| if rng.random::<f64>() < self.swap { rng.random_range(0..p) } else { i })
                .collect();
            self.prefix.banks_on_rows(tape, model.config(), self.mask, &rows)?
        } else {
            self.prefix.banks_on(tape, model.config(), self.mask)?
        };
        batch_loss(tape, model, batch, Some(&banks))
    }

    fn sets(&mut self) -> Vec<&mut ParamSet> {
        self.prefix.param_sets_mut().into_iter().collect()
    }

    fn banks(&self, model: &EncoderDecoderModel) -> Result<Banks> {
        self.prefix.banks(model.config(), self.mask)
    }

    fn check(&self, opt: &AdamW) -> Result<()> {
        let census = self.prefix.census();
        if !census.is_prefix_only() {
            return Err(DopError::contract("non-prefix tensor in the trainable census"));
        }
        if let Some(n) = opt.state_names().find(|n| !census.entries.contains_key(*n)) {
            return Err(DopError::contract(format!("optimizer holds state for {n}")));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct FullLearner {
    model: EncoderDecoderModel,
}

impl Learner for FullLearner {
    fn loss(&self, tape: &mut Tape, _: &EncoderDecoderModel, batch: &[&Seq2Seq], _: &mut ChaCha8Rng) -> Result<Var> {
        batch_loss(tape, &self.model, batch, None)
    }

    fn sets(&mut self) -> Vec<&mut ParamSet> {
        vec![self.model.params_mut().expect("unfrozen copy")]
    }

    fn banks(&self, model: &EncoderDecoderModel) -> Result<Banks> {
        Ok(Banks::empty(model.config()))
    }

    fn check(&self, _: &AdamW) -> Result<()> {
        Ok(())
    }
}

struct LoopResult<L> {
    best: L,
    metrics: Vec<EpochMetrics>,
    best_epoch: usize,
    aborted: Option<String>,
}

fn run_loop<L: Learner + Clone>(
    mut learner: L,
    eval_model: impl Fn(&L) -> EncoderDecoderModel,
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<LoopResult<L>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(DopError::contract("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut swap_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7377_6170);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = cfg.optimizer();
    let mut step = 0;
    let mut best = learner.clone();
    let mut best_rl = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll_sum, mut tokens) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Seq2Seq> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let loss = learner.loss(&mut tape, model, &batch, &mut swap_rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                let msg = format!("non-finite training loss {value} at epoch {epoch}, step {step}");
                log::error!("{msg}");
                return Ok(LoopResult {
                    best,
                    metrics,
                    best_epoch,
                    aborted: Some(msg),
                });
            }
            let n: usize = batch.iter().map(|e| e.target.len()).sum();
            nll_sum += value * n as f64;
            tokens += n;
            tape.backward(loss)?;
            let mut sets = learner.sets();
            for s in sets.iter_mut() {
                s.zero_grads();
                s.absorb_grads(&tape)?;
            }
            lr = linear_lr(cfg.initial_lr, step, total);
            if let Err(e) = opt.step(&mut sets, lr) {
                if let DopError::NonFinite(m) = &e {
                    log::error!("{m}");
                    return Ok(LoopResult {
                        best,
                        metrics,
                        best_epoch,
                        aborted: Some(m.clone()),
                    });
                }
                return Err(e);
            }
            for s in sets.iter_mut() {
                s.zero_grads();
            }
            if let Some((name, _)) = sets.iter().flat_map(|s| s.iter()).find(|(_, t)| !t.is_finite()) {
                let msg = format!("parameter {name} became non-finite at epoch {epoch}, step {step}");
                log::error!("{msg}");
                return Ok(LoopResult {
                    best,
                    metrics,
                    best_epoch,
                    aborted: Some(msg),
                });
            }
            step += 1;
        }
        learner.check(&opt)?;
        let em = eval_model(&learner);
        let [r1, r2, rl] = validate(
            &em,
            &learner.banks(model)?,
            tok,
            &data.valid,
            cfg.valid_limit,
            cfg.valid_max_tokens,
        )?;
        let row = EpochMetrics {
            epoch,
            train_nll: nll_sum / tokens as f64,
            valid_r1: r1,
            valid_r2: r2,
            valid_rl: rl,
            lr,
        };
        log::info!(
            "epoch {epoch}: nll {:.4} valid R-L {:.4} lr {:.2e}",
            row.train_nll,
            rl,
            lr
        );
        metrics.push(row);
        if rl > best_rl {
            best_rl = rl;
            best_epoch = epoch;
            best = learner.clone();
        }
    }
    Ok(LoopResult {
        best,
        metrics,
        best_epoch,
        aborted: None,
    })
}

/// Trains `θ`, `φ` and `α` on the split's training pairs with the backbone
/// frozen; returns the prefix of the best validation ROUGE-L epoch.
pub fn train(
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    mut prefix: DomainPrefix,
    mask: SiteMask,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !model.is_frozen() {
        return Err(DopError::contract("prefix training needs a frozen backbone"));
    }
    let checksum = model.checksum();
    prefix.apply_mask(mask)?;
    let census = prefix.census();
    let learner = PrefixLearner {
        prefix,
        mask,
        swap: cfg.word_swap,
    };
    let res = run_loop(learner, |_| model.clone(), model, tok, data, cfg)?;
    let after = model.checksum();
    if after != checksum {
        return Err(DopError::contract("backbone parameters changed during training"));
    }
    Ok(TrainOutcome {
        prefix: res.best.prefix,
        metrics: res.metrics,
        best_epoch: res.best_epoch,
        census,
        backbone_checksum: after,
        aborted: res.aborted,
    })
}

/// Continues training a checkpoint on a split that includes `k > 0`
/// target examples.
pub fn few_shot_continue(
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    checkpoint: DomainPrefix,
    mask: SiteMask,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.few_shot_k == 0 {
        return Err(DopError::contract("few-shot continuation needs k > 0; use train"));
    }
    train(model, tok, checkpoint, mask, data, cfg)
}

/// Baseline: every backbone parameter trains and no prefix is used.
pub fn finetune_backbone(
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let mut copy = model.clone();
    copy.unfreeze();
    let res = run_loop(FullLearner { model: copy }, |l| l.model.clone(), model, tok, data, cfg)?;
    let mut best = res.best.model;
    best.freeze();
    Ok(FinetuneOutcome {
        model: best,
        metrics: res.metrics,
        best_epoch: res.best_epoch,
        aborted: res.aborted,
    })
}
