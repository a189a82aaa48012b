#![allow(dead_code)]

use std::collections::BTreeMap;

use dop_core::prefix::{AlphaInit, DomainPrefix, SiteMask};
use dop_core::tensor::{AttentionMask, Tape, Tensor, Var};
use dop_core::transformer::{attend, EncoderDecoderModel, ModelConfig};
use dop_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar function of some tensors, checked against central differences.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Build,
}

impl OpCase {
    fn new(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            name,
            inputs,
            f: Box::new(f),
        }
    }

    /// Largest relative error over every input entry.
    pub fn max_rel_err(&self) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let loss = (self.f)(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        let eval = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x)).collect();
            let l = (self.f)(&mut t, &vs).unwrap();
            t.scalar(l)
        };
        let mut worst: f64 = 0.0;
        let mut xs = self.inputs.clone();
        for (i, g) in analytic.iter().enumerate() {
            for (j, &a) in g.iter().enumerate() {
                let x0 = xs[i].values()[j];
                xs[i].values_mut()[j] = x0 + STEP;
                let up = eval(&xs);
                xs[i].values_mut()[j] = x0 - STEP;
                let down = eval(&xs);
                xs[i].values_mut()[j] = x0;
                worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
            }
        }
        worst
    }
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries kept at least `gap` away from zero, for kinks.
fn away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.values_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry matters.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// A random desk-scale model shape.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_heads = [1, 2, 4][rng.random_range(0..3)];
    let d_model = num_heads * [2, 4][rng.random_range(0..2)];
    ModelConfig {
        num_layers: rng.random_range(1..=2),
        d_model,
        num_heads,
        d_ff: 2 * d_model,
        vocab_size: rng.random_range(8..=14),
        max_encoder_len: 8,
        max_decoder_len: 6,
        d_m: [2, 4][rng.random_range(0..2)],
    }
}

/// Every differentiable tape operation on shapes drawn from `cfg`.
pub fn op_cases(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let d = cfg.d_model;
    let heads = cfg.num_heads;
    let m = rng.random_range(2..=4);
    let n = rng.random_range(2..=4);
    let p = rng.random_range(1..=3);
    let v = cfg.vocab_size;
    let mut cases = Vec::new();
    let (w_md, w_mn, w_nd) = (randn(vec![m, d], rng), randn(vec![m, n], rng), randn(vec![m + n, d], rng));
    let w_half = randn(vec![m, d / 2 + 1], rng);
    let w_rows = randn(vec![1, d], rng);

    cases.push(OpCase::new("matmul", vec![randn(vec![m, d], rng), randn(vec![d, n], rng)], {
        let w = w_mn.clone();
        move |t, x| {
            let y = t.matmul(x[0], x[1])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("matmul_nt", vec![randn(vec![m, d], rng), randn(vec![n, d], rng)], {
        let w = w_mn.clone();
        move |t, x| {
            let y = t.matmul_nt(x[0], x[1])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("add", vec![randn(vec![m, d], rng), randn(vec![m, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.add(x[0], x[1])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("add_row", vec![randn(vec![m, d], rng), randn(vec![d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.add_row(x[0], x[1])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("mul", vec![randn(vec![m, d], rng), randn(vec![m, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.mul(x[0], x[1])?;
            weighted(t, y, &w)
        }
    }));
    let s: f64 = rng.random_range(-2.0..2.0);
    cases.push(OpCase::new("scale", vec![randn(vec![m, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.scale(x[0], s);
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("tanh", vec![randn(vec![m, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.tanh(x[0]);
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("relu", vec![away_from_zero(vec![m, d], 1e-2, rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.relu(x[0]);
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("gelu", vec![randn(vec![m, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.gelu(x[0]);
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("concat_rows", vec![randn(vec![m, d], rng), randn(vec![n, d], rng)], {
        let w = w_nd.clone();
        move |t, x| {
            let y = t.concat_rows(&[x[0], x[1]])?;
            weighted(t, y, &w)
        }
    }));
    let c0 = rng.random_range(0..d / 2);
    cases.push(OpCase::new("slice_cols", vec![randn(vec![m, d], rng)], {
        let w = w_half.clone();
        let len = d / 2 + 1;
        move |t, x| {
            let y = t.slice_cols(x[0], c0.min(d - len), len)?;
            weighted(t, y, &w)
        }
    }));
    let r0 = rng.random_range(0..m);
    cases.push(OpCase::new("slice_rows", vec![randn(vec![m, d], rng)], {
        let w = w_rows.clone();
        move |t, x| {
            let y = t.slice_rows(x[0], r0, 1)?;
            weighted(t, y, &w)
        }
    }));
    let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
    cases.push(OpCase::new("embedding", vec![randn(vec![3, d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.embedding(x[0], &ids)?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("softmax_rows", vec![randn(vec![m, n], rng)], {
        let w = w_mn.clone();
        move |t, x| {
            let y = t.softmax_rows(x[0])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("layer_norm", vec![randn(vec![m, d], rng), randn(vec![d], rng), randn(vec![d], rng)], {
        let w = w_md.clone();
        move |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2])?;
            weighted(t, y, &w)
        }
    }));
    cases.push(OpCase::new("mean", vec![randn(vec![m, d], rng)], |t, x| {
        let y = t.tanh(x[0]);
        Ok(t.mean(y))
    }));
    cases.push(OpCase::new("mse_loss", vec![randn(vec![m, d], rng), randn(vec![m, d], rng)], |t, x| {
        t.mse_loss(x[0], x[1])
    }));
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..v)).collect();
    cases.push(OpCase::new("cross_entropy", vec![randn(vec![m, v], rng)], move |t, x| {
        t.cross_entropy(x[0], &targets)
    }));

    let pad: Vec<bool> = (0..n).map(|j| j == 0 || rng.random_bool(0.7)).collect();
    let masks = [
        ("attention", AttentionMask::with_prefix(p)),
        ("attention_causal", AttentionMask::causal(p, rng.random_range(0..2))),
        (
            "attention_padded",
            AttentionMask {
                prefix_len: p,
                causal_offset: None,
                key_padding: Some(pad),
            },
        ),
    ];
    for (name, mask) in masks {
        let w = w_md.clone();
        cases.push(OpCase::new(
            name,
            vec![randn(vec![m, d], rng), randn(vec![p + n, d], rng), randn(vec![p + n, d], rng)],
            move |t, x| {
                let y = t.attention(x[0], x[1], x[2], heads, &mask)?;
                weighted(t, y, &w)
            },
        ));
    }
    let w = w_md.clone();
    cases.push(OpCase::new(
        "attend_prefixed",
        vec![
            randn(vec![m, d], rng),
            randn(vec![n, d], rng),
            randn(vec![n, d], rng),
            randn(vec![p, d], rng),
            randn(vec![p, d], rng),
        ],
        move |t, x| {
            let y = attend(t, x[0], x[1], x[2], Some((x[3], x[4])), heads, &AttentionMask::causal(p, 0))?;
            weighted(t, y, &w)
        },
    ));
    cases
}

/// A frozen random model with a prefix, plus one training pair, all
/// drawn from `rng`.
pub struct EndToEnd {
    pub model: EncoderDecoderModel,
    pub prefix: DomainPrefix,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: SiteMask,
}

impl EndToEnd {
    pub fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut model = EncoderDecoderModel::new(cfg.clone(), rng.random()).unwrap();
        model.freeze();
        let p = rng.random_range(1..=4);
        let words: Vec<String> = (0..p).map(|i| format!("w{i}")).collect();
        let alpha = if rng.random_bool(0.5) {
            AlphaInit::Backbone
        } else {
            AlphaInit::Identity
        };
        let mut prefix = DomainPrefix::new(&words, &model, alpha, rng.random()).unwrap();
        let mask = match rng.random_range(0..4) {
            0 => SiteMask::from_flags(true, false),
            1 => SiteMask::from_flags(false, true),
            _ => SiteMask::all(),
        };
        prefix.apply_mask(mask).unwrap();
        let v = cfg.vocab_size;
        let input = (0..rng.random_range(2..=cfg.max_encoder_len)).map(|_| rng.random_range(6..v)).collect();
        let target = (0..rng.random_range(1..=cfg.max_decoder_len)).map(|_| rng.random_range(3..v)).collect();
        Self {
            model,
            prefix,
            input,
            target,
            mask,
        }
    }

    pub fn loss(&self, prefix: &DomainPrefix) -> f64 {
        let mut tape = Tape::new();
        let banks = prefix.banks_on(&mut tape, self.model.config(), self.mask).unwrap();
        let l = self
            .model
            .sequence_nll_on(&mut tape, &self.input, &self.target, Some(&banks))
            .unwrap();
        tape.scalar(l)
    }

    /// Largest relative error of the prefix gradient of the sequence NLL,
    /// over at most `per_tensor` random entries of each trainable tensor.
    /// Returns it with the number of entries checked.
    pub fn max_rel_err(&self, per_tensor: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
        let mut tape = Tape::new();
        let banks = self.prefix.banks_on(&mut tape, self.model.config(), self.mask).unwrap();
        let l = self
            .model
            .sequence_nll_on(&mut tape, &self.input, &self.target, Some(&banks))
            .unwrap();
        tape.backward(l).unwrap();
        let grads: BTreeMap<String, Vec<f64>> = tape.named_grads().map(|(n, g)| (n.to_string(), g.to_vec())).collect();
        let mut work = self.prefix.clone();
        let (mut worst, mut checked): (f64, usize) = (0.0, 0);
        for si in 0..3 {
            let names: Vec<(String, usize)> = self.prefix.param_sets()[si]
                .iter()
                .filter(|(_, t)| t.requires_grad())
                .map(|(n, t)| (n.to_string(), t.numel()))
                .collect();
            for (name, numel) in names {
                let g = &grads[&name];
                for j in sample(rng, numel, per_tensor.min(numel)) {
                    let set = |p: &mut DomainPrefix, x: f64| {
                        p.param_sets_mut()[si].get_mut(&name).unwrap().values_mut()[j] = x;
                    };
                    let x0 = self.prefix.param_sets()[si].get(&name).unwrap().values()[j];
                    set(&mut work, x0 + STEP);
                    let up = self.loss(&work);
                    set(&mut work, x0 - STEP);
                    let down = self.loss(&work);
                    set(&mut work, x0);
                    worst = worst.max(rel_err(g[j], (up - down) / (2.0 * STEP)));
                    checked += 1;
                }
            }
        }
        (worst, checked)
    }
}

/// Runs every op case and the end-to-end check on `configs` random
/// configurations; returns the worst error with the name of its case.
pub fn gradcheck_suite(configs: usize, seed: u64) -> (f64, String, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut at, mut checked) = (0.0, String::new(), 0);
    for c in 0..configs {
        let cfg = random_config(&mut rng);
        for case in op_cases(&cfg, &mut rng) {
            let e = case.max_rel_err();
            checked += case.inputs.iter().map(Tensor::numel).sum::<usize>();
            if e > worst || e.is_nan() {
                worst = e;
                at = format!("{} (config {c})", case.name);
            }
        }
        let e2e = EndToEnd::random(&cfg, &mut rng);
        let (e, n) = e2e.max_rel_err(6, &mut rng);
        checked += n;
        if e > worst || e.is_nan() {
            worst = e;
            at = format!("end-to-end loss (config {c})");
        }
    }
    (worst, at, checked)
}
