//! The domain-oriented prefix: an embedding matrix over domain words, a
//! reparametrizing MLP, and per-site projection heads that produce the
//! key/value banks of every attention layer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{config_hash, Archive};
use crate::data::Tokenizer;
use crate::error::{DopError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{dot, ParamSet, Tape, Tensor, Var};
use crate::transformer::{
    dec_cross_prefix, dec_self_prefix, enc_attn_prefix, special, Banks, EncoderDecoderModel,
    ModelConfig, Site, TapeBank, TapeBanks,
};

pub const THETA: &str = "theta";
const EMBED_STD: f64 = 0.02;

fn alpha_w(site: Site) -> String {
    format!("alpha.{}.w", site.name())
}
fn alpha_b(site: Site) -> String {
    format!("alpha.{}.b", site.name())
}

/// `M_θ`, one row per domain word.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEmbedding {
    pub tokens: Vec<String>,
    pub params: ParamSet,
}

impl PrefixEmbedding {
    pub fn theta(&self) -> &Tensor {
        self.params.get(THETA).expect("theta present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Rows drawn from `N(0, 0.02²)`.
pub fn init_embeddings(x_dw: &[String], d_m: usize, seed: u64) -> Result<PrefixEmbedding> {
    if x_dw.is_empty() {
        return Err(DopError::contract("domain-word sequence is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert(
        THETA,
        Tensor::randn(vec![x_dw.len(), d_m], EMBED_STD, &mut rng).with_requires_grad(true),
    )?;
    Ok(PrefixEmbedding {
        tokens: x_dw.to_vec(),
        params,
    })
}

/// `d_m → 2·d_m (tanh) → d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixMlp {
    pub params: ParamSet,
}

impl PrefixMlp {
    pub fn new(d_m: usize, d_out: usize, seed: u64) -> Result<Self> {
        let hidden = 2 * d_m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_70);
        let mut params = ParamSet::new();
        params.insert("mlp.w1", Tensor::randn(vec![d_m, hidden], 1.0 / (d_m as f64).sqrt(), &mut rng))?;
        params.insert("mlp.b1", Tensor::zeros(vec![hidden]))?;
        params.insert("mlp.w2", Tensor::randn(vec![hidden, d_out], 1.0 / (hidden as f64).sqrt(), &mut rng))?;
        params.insert("mlp.b2", Tensor::zeros(vec![d_out]))?;
        params.set_requires_grad(true);
        Ok(Self { params })
    }

    pub fn d_m(&self) -> usize {
        self.params.get("mlp.w1").expect("w1").rows()
    }

    pub fn d_out(&self) -> usize {
        self.params.get("mlp.w2").expect("w2").cols()
    }

    pub fn forward_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w1 = tape.param("mlp.w1", self.params.get("mlp.w1")?);
        let b1 = tape.param("mlp.b1", self.params.get("mlp.b1")?);
        let w2 = tape.param("mlp.w2", self.params.get("mlp.w2")?);
        let b2 = tape.param("mlp.b2", self.params.get("mlp.b2")?);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}

/// How the site heads start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    Identity,
    /// Block-diagonal copies of the backbone's own key/value projections,
    /// so fitted hidden states are projected the way real tokens are.
    #[default]
    Backbone,
}

/// `α`: one `d_out × d_out` linear head per attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixProjections {
    pub params: ParamSet,
}

impl PrefixProjections {
    pub fn identity(cfg: &ModelConfig) -> Result<Self> {
        let d_out = cfg.stacked_width();
        let mut params = ParamSet::new();
        for site in Site::ALL {
            params.insert(alpha_w(site), Tensor::identity(d_out))?;
            params.insert(alpha_b(site), Tensor::zeros(vec![d_out]))?;
        }
        params.set_requires_grad(true);
        Ok(Self { params })
    }

    pub fn from_backbone(model: &EncoderDecoderModel) -> Result<Self> {
        let cfg = model.config();
        let (d, layers) = (cfg.d_model, cfg.num_layers);
        let d_out = cfg.stacked_width();
        let mut params = ParamSet::new();
        for site in Site::ALL {
            let mut w = vec![0.0; d_out * d_out];
            let mut b = vec![0.0; d_out];
            for l in 0..layers {
                let prefix = match site {
                    Site::EncoderSelf => enc_attn_prefix(l),
                    Site::DecoderSelf => dec_self_prefix(l),
                    Site::DecoderCross => dec_cross_prefix(l),
                };
                for (half, proj) in ["k", "v"].iter().enumerate() {
                    let pw = model.params().get(&format!("{prefix}.{proj}.w"))?;
                    let pb = model.params().get(&format!("{prefix}.{proj}.b"))?;
                    let off = half * layers * d + l * d;
                    for i in 0..d {
                        for j in 0..d {
                            w[(off + i) * d_out + off + j] = pw.values()[i * d + j];
                        }
                        b[off + i] = pb.values()[i];
                    }
                }
            }
            params.insert(alpha_w(site), Tensor::new(vec![d_out, d_out], w)?)?;
            params.insert(alpha_b(site), Tensor::new(vec![d_out], b)?)?;
        }
        params.set_requires_grad(true);
        Ok(Self { params })
    }

    pub fn new(init: AlphaInit, model: &EncoderDecoderModel) -> Result<Self> {
        match init {
            AlphaInit::Identity => Self::identity(model.config()),
            AlphaInit::Backbone => Self::from_backbone(model),
        }
    }

    /// Freezes or thaws one site head.
    pub fn set_site_trainable(&mut self, site: Site, on: bool) -> Result<()> {
        self.params.get_mut(&alpha_w(site))?.set_requires_grad(on);
        self.params.get_mut(&alpha_b(site))?.set_requires_grad(on);
        Ok(())
    }
}

/// Which attention sites receive a prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteMask {
    pub encoder_self: bool,
    pub decoder_self: bool,
    pub decoder_cross: bool,
}

impl Default for SiteMask {
    fn default() -> Self {
        Self::all()
    }
}

impl SiteMask {
    pub fn all() -> Self {
        Self {
            encoder_self: true,
            decoder_self: true,
            decoder_cross: true,
        }
    }

    pub fn from_flags(no_enc_prefix: bool, no_dec_prefix: bool) -> Self {
        Self {
            encoder_self: !no_enc_prefix,
            decoder_self: !no_dec_prefix,
            decoder_cross: !no_dec_prefix,
        }
    }

    pub fn enabled(&self, site: Site) -> bool {
        match site {
            Site::EncoderSelf => self.encoder_self,
            Site::DecoderSelf => self.decoder_self,
            Site::DecoderCross => self.decoder_cross,
        }
    }
}

/// All prefix state: `θ`, `φ` and `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPrefix {
    pub embedding: PrefixEmbedding,
    pub mlp: PrefixMlp,
    pub proj: PrefixProjections,
}

/// Trainable tensors by name with their sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub entries: BTreeMap<String, usize>,
    pub total: usize,
}

impl Census {
    /// Every tensor in `sets` that tracks gradients.
    pub fn of(sets: &[&ParamSet]) -> Self {
        let entries: BTreeMap<String, usize> = sets
            .iter()
            .flat_map(|s| s.iter())
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.to_string(), t.numel()))
            .collect();
        let total = entries.values().sum();
        Self { entries, total }
    }

    /// True when every entry is a prefix parameter (`θ`, `φ` or `α`).
    pub fn is_prefix_only(&self) -> bool {
        self.entries
            .keys()
            .all(|n| n == THETA || n.starts_with("mlp.") || n.starts_with("alpha."))
    }
}

impl DomainPrefix {
    pub fn new(
        x_dw: &[String],
        model: &EncoderDecoderModel,
        alpha: AlphaInit,
        seed: u64,
    ) -> Result<Self> {
        let cfg = model.config();
        Ok(Self {
            embedding: init_embeddings(x_dw, cfg.d_m, seed)?,
            mlp: PrefixMlp::new(cfg.d_m, cfg.stacked_width(), seed)?,
            proj: PrefixProjections::new(alpha, model)?,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.embedding.tokens
    }

    pub fn prefix_len(&self) -> usize {
        self.embedding.len()
    }

    pub fn param_sets(&self) -> [&ParamSet; 3] {
        [&self.embedding.params, &self.mlp.params, &self.proj.params]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 3] {
        [
            &mut self.embedding.params,
            &mut self.mlp.params,
            &mut self.proj.params,
        ]
    }

    pub fn census(&self) -> Census {
        Census::of(&self.param_sets())
    }

    /// Freezes the heads of sites that receive no prefix, since they
    /// would never see a gradient.
    pub fn apply_mask(&mut self, mask: SiteMask) -> Result<()> {
        for site in Site::ALL {
            self.proj.set_site_trainable(site, mask.enabled(site))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in self.param_sets_mut() {
            s.zero_grads();
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        for s in self.param_sets_mut() {
            s.absorb_grads(tape)?;
        }
        Ok(())
    }

    /// Binds `θ` as a named parameter and computes the banks.
    pub fn banks_on(&self, tape: &mut Tape, cfg: &ModelConfig, mask: SiteMask) -> Result<TapeBanks> {
        let theta = tape.param(THETA, self.embedding.theta());
        compute_banks_on(tape, theta, &self.mlp, &self.proj, cfg, mask)
    }

    /// Like [`Self::banks_on`] with row `i` of the prefix taken from `θ`
    /// row `rows[i]`.
    pub fn banks_on_rows(&self, tape: &mut Tape, cfg: &ModelConfig, mask: SiteMask, rows: &[usize]) -> Result<TapeBanks> {
        let theta = tape.param(THETA, self.embedding.theta());
        let picked = tape.embedding(theta, rows)?;
        compute_banks_on(tape, picked, &self.mlp, &self.proj, cfg, mask)
    }

    pub fn banks(&self, cfg: &ModelConfig, mask: SiteMask) -> Result<Banks> {
        let mut tape = Tape::new();
        let tb = self.banks_on(&mut tape, cfg, mask)?;
        tb.to_banks(&tape)
    }

    /// Hash of everything that fixes the checkpoint layout.
    pub fn config_hash(cfg: &ModelConfig, prefix_len: usize) -> String {
        config_hash(&(cfg, prefix_len, 2 * cfg.d_m))
    }

    pub fn to_archive(&self, cfg: &ModelConfig) -> Archive {
        let mut tensors = Vec::new();
        for set in self.param_sets() {
            for (name, t) in set.iter() {
                tensors.push((name.to_string(), Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("shape")));
            }
        }
        Archive {
            config_hash: Self::config_hash(cfg, self.prefix_len()),
            tokens: self.tokens().to_vec(),
            tensors,
        }
    }

    pub fn from_archive(archive: &Archive, cfg: &ModelConfig) -> Result<Self> {
        let expected = Self::config_hash(cfg, archive.tokens.len());
        if archive.config_hash != expected {
            return Err(DopError::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, model {expected}",
                archive.config_hash
            )));
        }
        let d_out = cfg.stacked_width();
        let hidden = 2 * cfg.d_m;
        let p = archive.tokens.len();
        let mut expected_shapes: Vec<(String, Vec<usize>)> = vec![
            (THETA.into(), vec![p, cfg.d_m]),
            ("mlp.w1".into(), vec![cfg.d_m, hidden]),
            ("mlp.b1".into(), vec![hidden]),
            ("mlp.w2".into(), vec![hidden, d_out]),
            ("mlp.b2".into(), vec![d_out]),
        ];
        for site in Site::ALL {
            expected_shapes.push((alpha_w(site), vec![d_out, d_out]));
            expected_shapes.push((alpha_b(site), vec![d_out]));
        }
        if archive.tensors.len() != expected_shapes.len() {
            return Err(DopError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected_shapes.len(),
                archive.tensors.len()
            )));
        }
        let (mut theta, mut mlp, mut alpha) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for (name, shape) in expected_shapes {
            let t = archive.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(DopError::Checkpoint(format!(
                    "{name} shaped {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            let t = t.clone().with_requires_grad(true);
            let set = if name == THETA {
                &mut theta
            } else if name.starts_with("mlp.") {
                &mut mlp
            } else {
                &mut alpha
            };
            set.insert(name, t)?;
        }
        Ok(Self {
            embedding: PrefixEmbedding {
                tokens: archive.tokens.clone(),
                params: theta,
            },
            mlp: PrefixMlp { params: mlp },
            proj: PrefixProjections { params: alpha },
        })
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        self.to_archive(cfg).save(path)
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let archive = Archive::load(path, None)?;
        Self::from_archive(&archive, cfg)
    }
}

/// `M' = MLP_φ(θ)`, then per site `H_s = M' W_s + b_s` split into `L` key
/// blocks followed by `L` value blocks of width `d_model`.
pub fn compute_banks_on(
    tape: &mut Tape,
    theta: Var,
    mlp: &PrefixMlp,
    proj: &PrefixProjections,
    cfg: &ModelConfig,
    mask: SiteMask,
) -> Result<TapeBanks> {
    let d_out = cfg.stacked_width();
    if mlp.d_out() != d_out || mlp.d_m() != cfg.d_m || tape.shape(theta).get(1) != Some(&cfg.d_m) {
        return Err(DopError::shape(
            "compute_banks",
            format!(
                "theta {:?}, mlp {}→{}, model d_m {} stacked width {d_out}",
                tape.shape(theta),
                mlp.d_m(),
                mlp.d_out(),
                cfg.d_m
            ),
        ));
    }
    let m = mlp.forward_on(tape, theta)?;
    let (d, layers) = (cfg.d_model, cfg.num_layers);
    let mut out = Vec::with_capacity(3);
    for site in Site::ALL {
        if !mask.enabled(site) {
            let z = tape.constant(&Tensor::zeros(vec![0, d]));
            out.push(TapeBank {
                prefix_len: 0,
                pairs: vec![(z, z); layers],
            });
            continue;
        }
        let w = tape.param(&alpha_w(site), proj.params.get(&alpha_w(site))?);
        let b = tape.param(&alpha_b(site), proj.params.get(&alpha_b(site))?);
        if tape.shape(w) != [d_out, d_out] {
            return Err(DopError::shape("compute_banks", format!("head {:?}", tape.shape(w))));
        }
        let h = tape.matmul(m, w)?;
        let h = tape.add_row(h, b)?;
        let mut pairs = Vec::with_capacity(layers);
        for l in 0..layers {
            let k = tape.slice_cols(h, l * d, d)?;
            let v = tape.slice_cols(h, layers * d + l * d, d)?;
            pairs.push((k, v));
        }
        out.push(TapeBank {
            prefix_len: tape.shape(theta)[0],
            pairs,
        });
    }
    let decoder_cross = out.pop().expect("three sites");
    let decoder_self = out.pop().expect("three sites");
    let encoder_self = out.pop().expect("three sites");
    Ok(TapeBanks {
        encoder_self,
        decoder_self,
        decoder_cross,
    })
}

/// Value-level [`compute_banks_on`] for explicit `θ` rows.
pub fn compute_banks(
    theta: &Tensor,
    mlp: &PrefixMlp,
    proj: &PrefixProjections,
    cfg: &ModelConfig,
    mask: SiteMask,
) -> Result<Banks> {
    let mut tape = Tape::new();
    let t = tape.constant(theta);
    let tb = compute_banks_on(&mut tape, t, mlp, proj, cfg, mask)?;
    tb.to_banks(&tape)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitTargets {
    /// `|x_dw| × 2·L·d_model`.
    pub values: Tensor,
    /// Domain words the tokenizer maps to UNK.
    pub unk_count: usize,
}

/// Decoder hidden states of the frozen backbone for `x_dw`, fed as both the
/// encoder input and the teacher-forced decoder input. Each row holds the
/// `L` layer states side by side, twice (key half, value half). Sequences
/// longer than the backbone's context are processed in windows.
pub fn precompute_targets(
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    x_dw: &[String],
) -> Result<FitTargets> {
    if !model.is_frozen() {
        return Err(DopError::contract("fitting targets need a frozen backbone"));
    }
    if x_dw.is_empty() {
        return Err(DopError::contract("domain-word sequence is empty"));
    }
    let cfg = model.config();
    let ids: Vec<usize> = x_dw.iter().map(|w| tok.id(w)).collect();
    let unk_count = ids.iter().filter(|&&i| i == special::UNK).count();
    let (d, layers) = (cfg.d_model, cfg.num_layers);
    let width = cfg.stacked_width();
    let window = cfg.max_encoder_len.min(cfg.max_decoder_len);
    let mut values = Vec::with_capacity(ids.len() * width);
    for chunk in ids.chunks(window) {
        let mut tape = Tape::new();
        let enc = model.encode_on(&mut tape, chunk, None)?;
        let dec = model.decode_on(&mut tape, chunk, enc.memory(), None, None)?;
        for r in 0..chunk.len() {
            let mut row = Vec::with_capacity(layers * d);
            for &h in &dec.layers {
                row.extend_from_slice(&tape.value(h)[r * d..(r + 1) * d]);
            }
            values.extend_from_slice(&row);
            values.extend_from_slice(&row);
        }
    }
    Ok(FitTargets {
        values: Tensor::new(vec![ids.len(), width], values)?,
        unk_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 3e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// MSE before each epoch's update, then the final value.
    pub history: Vec<f64>,
}

fn mlp_mse(tape: &mut Tape, emb: &PrefixEmbedding, mlp: &PrefixMlp, targets: &Tensor) -> Result<Var> {
    let theta = tape.constant(emb.theta());
    let y = mlp.forward_on(tape, theta)?;
    let t = tape.constant(targets);
    tape.mse_loss(y, t)
}

/// Full-batch Adam on `MSE(MLP_φ(θ), targets)`; `θ` stays fixed.
pub fn fit_mlp(
    emb: &PrefixEmbedding,
    mlp: &mut PrefixMlp,
    targets: &FitTargets,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if targets.values.rows() != emb.len() {
        return Err(DopError::shape(
            "fit_mlp",
            format!("{} targets for {} embedding rows", targets.values.rows(), emb.len()),
        ));
    }
    let mut opt = AdamW::new(AdamWConfig {
        clip_norm: None,
        ..AdamWConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let loss = mlp_mse(&mut tape, emb, mlp, &targets.values)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(DopError::NonFinite(format!("prefix fit loss {value} at epoch {epoch}")));
        }
        history.push(value);
        tape.backward(loss)?;
        mlp.params.zero_grads();
        mlp.params.absorb_grads(&tape)?;
        opt.step(&mut [&mut mlp.params], cfg.lr)?;
    }
    let mut tape = Tape::new();
    let loss = mlp_mse(&mut tape, emb, mlp, &targets.values)?;
    let final_mse = tape.scalar(loss);
    if !final_mse.is_finite() {
        return Err(DopError::NonFinite(format!("prefix fit loss {final_mse} after fitting")));
    }
    history.push(final_mse);
    mlp.params.zero_grads();
    Ok(FitReport {
        initial_mse: history[0],
        final_mse,
        history,
    })
}

/// How each target word got its embedding row.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TargetMapping {
    pub reused: usize,
    pub read_out: usize,
}

/// Banks for a target domain's words. Words seen in training keep their
/// trained rows; each of the others takes the row of the training word
/// whose backbone token embedding is most cosine-similar. The rows then
/// pass through the trained MLP and heads.
pub fn banks_for_target_domain(
    target_words: &[String],
    prefix: &DomainPrefix,
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
    mask: SiteMask,
) -> Result<(Banks, TargetMapping)> {
    if target_words.is_empty() {
        return Err(DopError::contract("target word list is empty"));
    }
    let cfg = model.config();
    let theta = prefix.embedding.theta();
    let d_m = theta.cols();
    let known: HashMap<&str, usize> = prefix
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut mapping = TargetMapping::default();
    let mut rows = Vec::with_capacity(target_words.len() * d_m);
    for w in target_words {
        if let Some(&i) = known.get(w.as_str()) {
            rows.extend_from_slice(theta.row(i));
            mapping.reused += 1;
        } else {
            rows.extend_from_slice(theta.row(nearest_training_word(w, prefix, model, tok)?));
            mapping.read_out += 1;
        }
    }
    let rows = Tensor::new(vec![target_words.len(), d_m], rows)?;
    let banks = compute_banks(&rows, &prefix.mlp, &prefix.proj, cfg, mask)?;
    Ok((banks, mapping))
}

/// Index of the training word closest to `word` in backbone embedding
/// space; ties go to the earliest row.
pub fn nearest_training_word(
    word: &str,
    prefix: &DomainPrefix,
    model: &EncoderDecoderModel,
    tok: &Tokenizer,
) -> Result<usize> {
    let table = model.params().get("embed.tokens")?;
    let unit = |w: &str| {
        let r = table.row(tok.id(w));
        let n = dot(r, r).sqrt().max(f64::MIN_POSITIVE);
        r.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let e = unit(word);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, t) in prefix.tokens().iter().enumerate() {
        let c = dot(&e, &unit(t));
        if !c.is_finite() {
            return Err(DopError::NonFinite(format!("similarity of {word:?} and {t:?}")));
        }
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests;
