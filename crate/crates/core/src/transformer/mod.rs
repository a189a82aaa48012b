//! Post-LN encoder–decoder transformer whose every attention site accepts
//! a key/value prefix.

mod bank;
mod cache;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{config_hash, Archive};
use crate::error::{DopError, Result};
use crate::tensor::{AttentionMask, ParamSet, Tape, Tensor, Var};

pub use bank::{Banks, PrefixBank, Site, TapeBank, TapeBanks};
pub use cache::DecoderCache;

/// Reserved token ids shared by the tokenizer and the model.
pub mod special {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const SEP: usize = 4;
    pub const MASK: usize = 5;
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    /// Width of the prefix embedding matrix.
    pub d_m: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 512,
            max_encoder_len: 72,
            max_decoder_len: 40,
            d_m: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_encoder_len", self.max_encoder_len),
            ("max_decoder_len", self.max_decoder_len),
            ("d_m", self.d_m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DopError::contract(format!("model config: {name} must be positive")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(DopError::contract(format!(
                "model config: d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size <= special::MASK {
            return Err(DopError::contract("model config: vocabulary too small"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Width of one prefix row holding keys and values for every layer.
    pub fn stacked_width(&self) -> usize {
        2 * self.num_layers * self.d_model
    }
}

/// Output of [`EncoderDecoderModel::encode_on`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One `len × d_model` hidden state per layer; the last one feeds
    /// cross-attention.
    pub layers: Vec<Var>,
    pub truncated: bool,
    pub len: usize,
}

impl EncoderOutput {
    pub fn memory(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<Var>,
    /// `len × vocab_size`.
    pub logits: Var,
}

/// Value-level encoder result.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub layers: Vec<Tensor>,
    pub truncated: bool,
}

impl Encoded {
    pub fn memory(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

/// The backbone: architecture plus the named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoderModel {
    config: ModelConfig,
    params: ParamSet,
    frozen: bool,
}

struct AttnNames {
    q: (String, String),
    k: (String, String),
    v: (String, String),
    o: (String, String),
}

impl AttnNames {
    fn new(prefix: &str) -> Self {
        let pair = |p: &str| (format!("{prefix}.{p}.w"), format!("{prefix}.{p}.b"));
        Self {
            q: pair("q"),
            k: pair("k"),
            v: pair("v"),
            o: pair("o"),
        }
    }
}

pub(crate) fn enc_attn_prefix(l: usize) -> String {
    format!("enc.{l}.self")
}
pub(crate) fn dec_self_prefix(l: usize) -> String {
    format!("dec.{l}.self")
}
pub(crate) fn dec_cross_prefix(l: usize) -> String {
    format!("dec.{l}.cross")
}

impl EncoderDecoderModel {
    /// Random initialisation from `seed`; the model starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamSet::new();
        let emb_std = 1.0 / (d as f64).sqrt();
        params.insert(
            "embed.tokens",
            Tensor::randn(vec![config.vocab_size, d], emb_std, &mut rng),
        )?;
        params.insert(
            "embed.enc_pos",
            Tensor::randn(vec![config.max_encoder_len, d], emb_std, &mut rng),
        )?;
        params.insert(
            "embed.dec_pos",
            Tensor::randn(vec![config.max_decoder_len, d], emb_std, &mut rng),
        )?;
        insert_ln(&mut params, "embed.enc_ln", d)?;
        insert_ln(&mut params, "embed.dec_ln", d)?;
        params.insert("output.bias", Tensor::zeros(vec![config.vocab_size]))?;

        for l in 0..config.num_layers {
            insert_attn(&mut params, &enc_attn_prefix(l), d, &mut rng)?;
            insert_ln(&mut params, &format!("enc.{l}.ln1"), d)?;
            insert_ffn(&mut params, &format!("enc.{l}.ffn"), d, config.d_ff, &mut rng)?;
            insert_ln(&mut params, &format!("enc.{l}.ln2"), d)?;
        }
        for l in 0..config.num_layers {
            insert_attn(&mut params, &dec_self_prefix(l), d, &mut rng)?;
            insert_ln(&mut params, &format!("dec.{l}.ln1"), d)?;
            insert_attn(&mut params, &dec_cross_prefix(l), d, &mut rng)?;
            insert_ln(&mut params, &format!("dec.{l}.ln2"), d)?;
            insert_ffn(&mut params, &format!("dec.{l}.ffn"), d, config.d_ff, &mut rng)?;
            insert_ln(&mut params, &format!("dec.{l}.ln3"), d)?;
        }
        params.set_requires_grad(true);
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(DopError::shape(
                    "from_params",
                    format!("{name}: expected {:?}, got {:?}", t.shape(), got.shape()),
                ));
            }
        }
        if params.len() != reference.params.len() {
            return Err(DopError::contract("parameter set has unexpected entries"));
        }
        let mut model = Self {
            config,
            params,
            frozen: false,
        };
        model.params.set_requires_grad(true);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters for full fine-tuning; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(DopError::contract("backbone is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.set_requires_grad(false);
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.params.set_requires_grad(true);
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Every parameter in name order, keyed by the config hash.
    pub fn to_archive(&self) -> Archive {
        Archive {
            config_hash: config_hash(&self.config),
            tokens: Vec::new(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    /// Restores a frozen model saved with [`Self::to_archive`].
    pub fn from_archive(archive: &Archive, config: ModelConfig) -> Result<Self> {
        if archive.config_hash != config_hash(&config) {
            return Err(DopError::Checkpoint("backbone archive was saved for another config".into()));
        }
        let mut params = ParamSet::new();
        for (n, t) in &archive.tensors {
            params.insert(n.clone(), t.clone())?;
        }
        let mut model = Self::from_params(config, params)?;
        model.freeze();
        Ok(model)
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.params.get(name)?))
    }

    fn linear(&self, tape: &mut Tape, x: Var, names: &(String, String)) -> Result<Var> {
        let w = self.p(tape, &names.0)?;
        let b = self.p(tape, &names.1)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.g"))?;
        let b = self.p(tape, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(
            tape,
            x,
            &(format!("{prefix}.w1"), format!("{prefix}.b1")),
        )?;
        let h = tape.gelu(h);
        self.linear(tape, h, &(format!("{prefix}.w2"), format!("{prefix}.b2")))
    }

    /// Projected keys and values of `source` for attention site `prefix`.
    pub(crate) fn project_kv(
        &self,
        tape: &mut Tape,
        source: Var,
        prefix: &str,
    ) -> Result<(Var, Var)> {
        let names = AttnNames::new(prefix);
        let k = self.linear(tape, source, &names.k)?;
        let v = self.linear(tape, source, &names.v)?;
        Ok((k, v))
    }

    /// Attention sublayer: project queries, attend over (optionally
    /// prefixed) keys/values, project the output.
    pub(crate) fn attention_block(
        &self,
        tape: &mut Tape,
        query_src: Var,
        kv: (Var, Var),
        prefix: Option<(Var, Var)>,
        names_prefix: &str,
        causal_offset: Option<usize>,
    ) -> Result<Var> {
        let names = AttnNames::new(names_prefix);
        let q = self.linear(tape, query_src, &names.q)?;
        let p_len = prefix.map_or(0, |(pk, _)| tape.shape(pk)[0]);
        let mask = AttentionMask {
            prefix_len: p_len,
            causal_offset,
            key_padding: None,
        };
        let a = attend(tape, q, kv.0, kv.1, prefix, self.config.num_heads, &mask)?;
        self.linear(tape, a, &names.o)
    }

    pub(crate) fn embed(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        pos_name: &str,
        pos_start: usize,
        ln: &str,
    ) -> Result<Var> {
        let table = self.p(tape, "embed.tokens")?;
        let tok = tape.embedding(table, ids)?;
        let pos_table = self.p(tape, pos_name)?;
        let positions: Vec<usize> = (pos_start..pos_start + ids.len()).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let x = tape.add(tok, pos)?;
        self.layer_norm(tape, x, ln)
    }

    pub(crate) fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let table = self.p(tape, "embed.tokens")?;
        let bias = self.p(tape, "output.bias")?;
        let z = tape.matmul_nt(h, table)?;
        tape.add_row(z, bias)
    }

    /// Runs the encoder. Inputs longer than `max_encoder_len` are cut and
    /// the result is flagged.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        input_ids: &[usize],
        bank: Option<&TapeBank>,
    ) -> Result<EncoderOutput> {
        if input_ids.is_empty() {
            return Err(DopError::contract("encoder input is empty"));
        }
        self.check_bank(bank)?;
        let truncated = input_ids.len() > self.config.max_encoder_len;
        let ids = &input_ids[..input_ids.len().min(self.config.max_encoder_len)];
        let mut x = self.embed(tape, ids, "embed.enc_pos", 0, "embed.enc_ln")?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let pfx = enc_attn_prefix(l);
            let kv = self.project_kv(tape, x, &pfx)?;
            let prefix = bank.map(|b| b.pairs[l]);
            let a = self.attention_block(tape, x, kv, prefix, &pfx, None)?;
            let r = tape.add(x, a)?;
            let h = self.layer_norm(tape, r, &format!("enc.{l}.ln1"))?;
            let f = self.ffn(tape, h, &format!("enc.{l}.ffn"))?;
            let r = tape.add(h, f)?;
            x = self.layer_norm(tape, r, &format!("enc.{l}.ln2"))?;
            layers.push(x);
        }
        Ok(EncoderOutput {
            layers,
            truncated,
            len: ids.len(),
        })
    }

    /// Teacher-forced decoder over `decoder_ids` attending to `memory`.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        decoder_ids: &[usize],
        memory: Var,
        self_bank: Option<&TapeBank>,
        cross_bank: Option<&TapeBank>,
    ) -> Result<DecoderOutput> {
        if decoder_ids.is_empty() {
            return Err(DopError::contract("decoder input is empty"));
        }
        if decoder_ids.len() > self.config.max_decoder_len {
            return Err(DopError::contract(format!(
                "decoder length {} exceeds max_decoder_len {}",
                decoder_ids.len(),
                self.config.max_decoder_len
            )));
        }
        self.check_bank(self_bank)?;
        self.check_bank(cross_bank)?;
        let mut x = self.embed(tape, decoder_ids, "embed.dec_pos", 0, "embed.dec_ln")?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let sp = dec_self_prefix(l);
            let kv = self.project_kv(tape, x, &sp)?;
            let a = self.attention_block(tape, x, kv, self_bank.map(|b| b.pairs[l]), &sp, Some(0))?;
            let r = tape.add(x, a)?;
            let h = self.layer_norm(tape, r, &format!("dec.{l}.ln1"))?;

            let cp = dec_cross_prefix(l);
            let ckv = self.project_kv(tape, memory, &cp)?;
            let c = self.attention_block(tape, h, ckv, cross_bank.map(|b| b.pairs[l]), &cp, None)?;
            let r = tape.add(h, c)?;
            let h = self.layer_norm(tape, r, &format!("dec.{l}.ln2"))?;

            let f = self.ffn(tape, h, &format!("dec.{l}.ffn"))?;
            let r = tape.add(h, f)?;
            x = self.layer_norm(tape, r, &format!("dec.{l}.ln3"))?;
            layers.push(x);
        }
        let logits = self.logits(tape, x)?;
        Ok(DecoderOutput { layers, logits })
    }

    /// Mean teacher-forced negative log-likelihood of `target` (which
    /// should end in EOS) given the encoder input.
    pub fn sequence_nll_on(
        &self,
        tape: &mut Tape,
        input_ids: &[usize],
        target: &[usize],
        banks: Option<&TapeBanks>,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(DopError::contract("target summary is empty"));
        }
        let enc = self.encode_on(tape, input_ids, banks.map(|b| &b.encoder_self))?;
        let dec_in = shift_right(target);
        let dec = self.decode_on(
            tape,
            &dec_in,
            enc.memory(),
            banks.map(|b| &b.decoder_self),
            banks.map(|b| &b.decoder_cross),
        )?;
        tape.cross_entropy(dec.logits, target)
    }

    fn check_bank(&self, bank: Option<&TapeBank>) -> Result<()> {
        if let Some(b) = bank {
            if b.pairs.len() != self.config.num_layers {
                return Err(DopError::shape(
                    "prefix bank",
                    format!(
                        "{} layer pairs for a {}-layer model",
                        b.pairs.len(),
                        self.config.num_layers
                    ),
                ));
            }
        }
        Ok(())
    }

    // ---- value-level conveniences ---------------------------------------

    pub fn encode(&self, input_ids: &[usize], bank: &PrefixBank) -> Result<Encoded> {
        bank.validate_for(&self.config)?;
        let mut tape = Tape::new();
        let tb = bank.on_tape(&mut tape);
        let out = self.encode_on(&mut tape, input_ids, Some(&tb))?;
        Ok(Encoded {
            layers: out.layers.iter().map(|&v| tape.tensor(v)).collect(),
            truncated: out.truncated,
        })
    }

    /// Logits over the vocabulary for the token following
    /// `summary_prefix_ids` (which should start with BOS).
    pub fn decode_step(
        &self,
        summary_prefix_ids: &[usize],
        encoded: &Encoded,
        banks: &Banks,
    ) -> Result<Vec<f64>> {
        banks.validate_for(&self.config)?;
        let mut tape = Tape::new();
        let tb = banks.on_tape(&mut tape);
        let memory = tape.constant(encoded.memory());
        let out = self.decode_on(
            &mut tape,
            summary_prefix_ids,
            memory,
            Some(&tb.decoder_self),
            Some(&tb.decoder_cross),
        )?;
        let last = summary_prefix_ids.len() - 1;
        let row = tape.slice_rows(out.logits, last, 1)?;
        Ok(tape.value(row).to_vec())
    }

    pub fn sequence_nll(&self, input_ids: &[usize], target: &[usize], banks: &Banks) -> Result<f64> {
        banks.validate_for(&self.config)?;
        let mut tape = Tape::new();
        let tb = banks.on_tape(&mut tape);
        let loss = self.sequence_nll_on(&mut tape, input_ids, target, Some(&tb))?;
        Ok(tape.scalar(loss))
    }

    /// Starts incremental decoding with cached keys and values.
    pub fn start_decoding(&self, input_ids: &[usize], banks: &Banks) -> Result<DecoderCache<'_>> {
        DecoderCache::new(self, input_ids, banks)
    }
}

/// Prefixed multi-head attention: keys and values become `[P_k; K]` and
/// `[P_v; V]`; prefix rows are never masked.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Var> {
    let (k, v, p_len) = match prefix {
        Some((pk, pv)) => {
            if tape.shape(pk) != tape.shape(pv) {
                return Err(DopError::shape(
                    "attend",
                    format!("prefix keys {:?} vs values {:?}", tape.shape(pk), tape.shape(pv)),
                ));
            }
            let p_len = tape.shape(pk)[0];
            (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?, p_len)
        }
        None => (k, v, 0),
    };
    if mask.prefix_len != p_len {
        return Err(DopError::shape(
            "attend",
            format!("mask declares {} prefix rows, got {p_len}", mask.prefix_len),
        ));
    }
    tape.attention(q, k, v, heads, mask)
}

/// `[BOS, y_1, .., y_{T-1}]` for a target `[y_1, .., y_T]`.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    std::iter::once(special::BOS)
        .chain(target[..target.len().saturating_sub(1)].iter().copied())
        .collect()
}

fn insert_ln(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::full(vec![d], 1.0))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]))
}

fn insert_linear(
    params: &mut ParamSet,
    w: String,
    b: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    params.insert(w, Tensor::randn(vec![fan_in, fan_out], std, rng))?;
    params.insert(b, Tensor::zeros(vec![fan_out]))
}

fn insert_attn(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = AttnNames::new(prefix);
    for (w, b) in [n.q, n.k, n.v, n.o] {
        insert_linear(params, w, b, d, d, rng)?;
    }
    Ok(())
}

fn insert_ffn(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    insert_linear(params, format!("{prefix}.w1"), format!("{prefix}.b1"), d, d_ff, rng)?;
    insert_linear(params, format!("{prefix}.w2"), format!("{prefix}.b2"), d_ff, d, rng)
}
