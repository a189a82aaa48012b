use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{DopError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// The three attention sites that take a prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::DecoderCross];

    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder_self",
            Site::DecoderSelf => "decoder_self",
            Site::DecoderCross => "decoder_cross",
        }
    }
}

/// Per-layer `(P_k, P_v)` pairs for one attention site, each `p × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    site: Site,
    prefix_len: usize,
    pairs: Vec<(Tensor, Tensor)>,
}

impl PrefixBank {
    pub fn new(site: Site, pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| DopError::shape("prefix bank", "no layer pairs"))?;
        let shape = first.0.shape().to_vec();
        if shape.len() != 2 {
            return Err(DopError::shape("prefix bank", format!("rows shaped {shape:?}")));
        }
        for (k, v) in &pairs {
            if k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(DopError::shape(
                    "prefix bank",
                    format!("mixed pair shapes {:?} / {:?} vs {shape:?}", k.shape(), v.shape()),
                ));
            }
        }
        Ok(Self {
            site,
            prefix_len: shape[0],
            pairs,
        })
    }

    /// A zero-length bank: the vanilla model.
    pub fn empty(site: Site, config: &ModelConfig) -> Self {
        let z = Tensor::zeros(vec![0, config.d_model]);
        Self {
            site,
            prefix_len: 0,
            pairs: vec![(z.clone(), z); config.num_layers],
        }
    }

    pub fn site(&self) -> Site {
        self.site
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn pairs(&self) -> &[(Tensor, Tensor)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.prefix_len == 0
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        if self.pairs.len() != config.num_layers {
            return Err(DopError::shape(
                "prefix bank",
                format!(
                    "{} bank has {} layer pairs, model has {} layers",
                    self.site.name(),
                    self.pairs.len(),
                    config.num_layers
                ),
            ));
        }
        let width = self.pairs[0].0.shape()[1];
        if width != config.d_model {
            return Err(DopError::shape(
                "prefix bank",
                format!("rows of width {width}, model width {}", config.d_model),
            ));
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape) -> TapeBank {
        TapeBank {
            prefix_len: self.prefix_len,
            pairs: self
                .pairs
                .iter()
                .map(|(k, v)| (tape.constant(k), tape.constant(v)))
                .collect(),
        }
    }
}

/// Banks for all three sites.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub encoder_self: PrefixBank,
    pub decoder_self: PrefixBank,
    pub decoder_cross: PrefixBank,
}

impl Banks {
    pub fn empty(config: &ModelConfig) -> Self {
        Self {
            encoder_self: PrefixBank::empty(Site::EncoderSelf, config),
            decoder_self: PrefixBank::empty(Site::DecoderSelf, config),
            decoder_cross: PrefixBank::empty(Site::DecoderCross, config),
        }
    }

    pub fn get(&self, site: Site) -> &PrefixBank {
        match site {
            Site::EncoderSelf => &self.encoder_self,
            Site::DecoderSelf => &self.decoder_self,
            Site::DecoderCross => &self.decoder_cross,
        }
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        for site in Site::ALL {
            self.get(site).validate_for(config)?;
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape) -> TapeBanks {
        TapeBanks {
            encoder_self: self.encoder_self.on_tape(tape),
            decoder_self: self.decoder_self.on_tape(tape),
            decoder_cross: self.decoder_cross.on_tape(tape),
        }
    }
}

/// A bank bound onto a tape, possibly differentiable.
#[derive(Clone, Debug)]
pub struct TapeBank {
    pub prefix_len: usize,
    pub pairs: Vec<(Var, Var)>,
}

impl TapeBank {
    pub fn to_bank(&self, site: Site, tape: &Tape) -> Result<PrefixBank> {
        PrefixBank::new(
            site,
            self.pairs
                .iter()
                .map(|&(k, v)| (tape.tensor(k), tape.tensor(v)))
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct TapeBanks {
    pub encoder_self: TapeBank,
    pub decoder_self: TapeBank,
    pub decoder_cross: TapeBank,
}

impl TapeBanks {
    pub fn get(&self, site: Site) -> &TapeBank {
        match site {
            Site::EncoderSelf => &self.encoder_self,
            Site::DecoderSelf => &self.decoder_self,
            Site::DecoderCross => &self.decoder_cross,
        }
    }

    pub fn to_banks(&self, tape: &Tape) -> Result<Banks> {
        Ok(Banks {
            encoder_self: self.encoder_self.to_bank(Site::EncoderSelf, tape)?,
            decoder_self: self.decoder_self.to_bank(Site::DecoderSelf, tape)?,
            decoder_cross: self.decoder_cross.to_bank(Site::DecoderCross, tape)?,
        })
    }
}
