use super::{dec_cross_prefix, dec_self_prefix, Banks, EncoderDecoderModel};
use crate::error::{DopError, Result};
use crate::tensor::{Tape, Tensor};

/// Incremental decoder state: per-layer self-attention keys/values of the
/// tokens fed so far plus the fixed cross-attention keys/values.
///
/// Stepping token by token yields the same logits as re-running
/// [`EncoderDecoderModel::decode_on`] on the whole prefix.
#[derive(Clone, Debug)]
pub struct DecoderCache<'m> {
    model: &'m EncoderDecoderModel,
    self_prefix: Vec<(Tensor, Tensor)>,
    cross_prefix: Vec<(Tensor, Tensor)>,
    cross_kv: Vec<(Tensor, Tensor)>,
    self_keys: Vec<Vec<f64>>,
    self_values: Vec<Vec<f64>>,
    pos: usize,
    truncated: bool,
}

impl<'m> DecoderCache<'m> {
    pub(super) fn new(
        model: &'m EncoderDecoderModel,
        input_ids: &[usize],
        banks: &Banks,
    ) -> Result<Self> {
        let cfg = model.config();
        banks.validate_for(cfg)?;
        let mut tape = Tape::new();
        let tb = banks.on_tape(&mut tape);
        let enc = model.encode_on(&mut tape, input_ids, Some(&tb.encoder_self))?;
        let memory = enc.memory();
        let mut cross_kv = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let (k, v) = model.project_kv(&mut tape, memory, &dec_cross_prefix(l))?;
            cross_kv.push((tape.tensor(k), tape.tensor(v)));
        }
        Ok(Self {
            model,
            self_prefix: banks.decoder_self.pairs().to_vec(),
            cross_prefix: banks.decoder_cross.pairs().to_vec(),
            cross_kv,
            self_keys: vec![Vec::new(); cfg.num_layers],
            self_values: vec![Vec::new(); cfg.num_layers],
            pos: 0,
            truncated: enc.truncated,
        })
    }

    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    pub fn input_truncated(&self) -> bool {
        self.truncated
    }

    /// Feeds one token and returns logits for the next one.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        if self.pos >= cfg.max_decoder_len {
            return Err(DopError::contract(format!(
                "decoder length {} exceeds max_decoder_len {}",
                self.pos + 1,
                cfg.max_decoder_len
            )));
        }
        let d = cfg.d_model;
        let m = self.model;
        let mut tape = Tape::new();
        let mut x = m.embed(&mut tape, &[token], "embed.dec_pos", self.pos, "embed.dec_ln")?;
        for l in 0..cfg.num_layers {
            let sp = dec_self_prefix(l);
            let (k, v) = m.project_kv(&mut tape, x, &sp)?;
            self.self_keys[l].extend_from_slice(tape.value(k));
            self.self_values[l].extend_from_slice(tape.value(v));
            let rows = self.pos + 1;
            let kc = tape.constant_from(vec![rows, d], self.self_keys[l].clone())?;
            let vc = tape.constant_from(vec![rows, d], self.self_values[l].clone())?;
            let sp_pair = (
                tape.constant(&self.self_prefix[l].0),
                tape.constant(&self.self_prefix[l].1),
            );
            let a = m.attention_block(&mut tape, x, (kc, vc), Some(sp_pair), &sp, Some(self.pos))?;
            let r = tape.add(x, a)?;
            let h = m.layer_norm(&mut tape, r, &format!("dec.{l}.ln1"))?;

            let cp = dec_cross_prefix(l);
            let ckv = (
                tape.constant(&self.cross_kv[l].0),
                tape.constant(&self.cross_kv[l].1),
            );
            let cpair = (
                tape.constant(&self.cross_prefix[l].0),
                tape.constant(&self.cross_prefix[l].1),
            );
            let c = m.attention_block(&mut tape, h, ckv, Some(cpair), &cp, None)?;
            let r = tape.add(h, c)?;
            let h = m.layer_norm(&mut tape, r, &format!("dec.{l}.ln2"))?;
            let f = m.ffn(&mut tape, h, &format!("dec.{l}.ffn"))?;
            let r = tape.add(h, f)?;
            x = m.layer_norm(&mut tape, r, &format!("dec.{l}.ln3"))?;
        }
        let logits = m.logits(&mut tape, x)?;
        self.pos += 1;
        Ok(tape.value(logits).to_vec())
    }
}
