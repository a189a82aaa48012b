use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::transformer::PrefixBank;

const WORDS: &[&str] = &["menu", "chef", "wine", "table", "train", "ticket", "taxi", "room"];

fn setup() -> (EncoderDecoderModel, Tokenizer, Vec<String>) {
    let tok = Tokenizer::build(["menu chef wine table train ticket taxi room"], &["museum", "park"]);
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: tok.len(),
        max_encoder_len: 5,
        max_decoder_len: 4,
        d_m: 6,
    };
    let mut model = EncoderDecoderModel::new(cfg, 3).unwrap();
    model.freeze();
    (model, tok, WORDS.iter().map(|w| w.to_string()).collect())
}

fn bank_values(b: &Banks) -> Vec<f64> {
    Site::ALL
        .iter()
        .flat_map(|&s| b.get(s).pairs().iter())
        .flat_map(|(k, v)| k.values().iter().chain(v.values()).copied().collect::<Vec<_>>())
        .collect()
}

#[test]
fn embedding_init_contract() {
    let x: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
    let e = init_embeddings(&x, 64, 7).unwrap();
    assert_eq!(e.theta().shape(), &[16, 64]);
    assert!(e.theta().requires_grad());
    assert_eq!(e, init_embeddings(&x, 64, 7).unwrap());
    assert_ne!(e, init_embeddings(&x, 64, 8).unwrap());
    let sd = (e.theta().values().iter().map(|v| v * v).sum::<f64>() / 1024.0).sqrt();
    assert!((sd - 0.02).abs() < 0.003, "{sd}");
    assert!(init_embeddings(&[], 4, 0).is_err());
    let large = ModelConfig {
        num_layers: 12,
        d_model: 1024,
        ..ModelConfig::default()
    };
    assert_eq!(large.stacked_width(), 24576);
}

#[test]
fn identity_heads_reshape_mlp_output() {
    let (model, _, x) = setup();
    let cfg = model.config();
    let mut prefix = DomainPrefix::new(&x, &model, AlphaInit::Identity, 1).unwrap();
    prefix.apply_mask(SiteMask::all()).unwrap();
    let banks = prefix.banks(cfg, SiteMask::all()).unwrap();
    let mut tape = Tape::new();
    let t = tape.constant(prefix.embedding.theta());
    let m = prefix.mlp.forward_on(&mut tape, t).unwrap();
    let m = tape.tensor(m);
    let d = cfg.d_model;
    for site in Site::ALL {
        let b = banks.get(site);
        assert_eq!(b.prefix_len(), x.len());
        assert_eq!(b.pairs().len(), 2);
        for (l, (k, v)) in b.pairs().iter().enumerate() {
            assert_eq!(k.shape(), &[x.len(), d]);
            for r in 0..x.len() {
                assert_eq!(k.row(r), &m.row(r)[l * d..(l + 1) * d]);
                assert_eq!(v.row(r), &m.row(r)[2 * d + l * d..2 * d + (l + 1) * d]);
            }
        }
    }
    assert_eq!(bank_values(&banks), bank_values(&prefix.banks(cfg, SiteMask::all()).unwrap()));
}

#[test]
fn backbone_heads_copy_key_value_projections() {
    let (model, _, _) = setup();
    let proj = PrefixProjections::from_backbone(&model).unwrap();
    let w = proj.params.get("alpha.decoder_cross.w").unwrap();
    let wk1 = model.params().get("dec.1.cross.k.w").unwrap();
    let wv0 = model.params().get("dec.0.cross.v.w").unwrap();
    let n = 32;
    assert_eq!(w.values()[(8 + 2) * n + 8 + 5], wk1.values()[2 * 8 + 5]);
    assert_eq!(w.values()[(16 + 1) * n + 16 + 7], wv0.values()[8 + 7]);
    assert_eq!(w.values()[n + 9], 0.0);
}

#[test]
fn masked_sites_get_empty_banks() {
    let (model, _, x) = setup();
    let prefix = DomainPrefix::new(&x, &model, AlphaInit::Backbone, 1).unwrap();
    let cfg = model.config();
    let banks = prefix.banks(cfg, SiteMask::from_flags(true, false)).unwrap();
    assert!(banks.encoder_self.is_empty());
    assert_eq!(banks.decoder_self.prefix_len(), x.len());
    let banks = prefix.banks(cfg, SiteMask::from_flags(false, true)).unwrap();
    assert!(!banks.encoder_self.is_empty());
    assert_eq!(banks.decoder_cross, PrefixBank::empty(Site::DecoderCross, cfg));
    banks.validate_for(cfg).unwrap();
}

#[test]
fn bank_gradients_match_finite_differences() {
    let (model, _, x) = setup();
    let cfg = model.config().clone();
    let prefix = DomainPrefix::new(&x[..3], &model, AlphaInit::Backbone, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3 * 2 * 2 * 3 * cfg.d_model;
    let weights = Tensor::randn(vec![n], 1.0, &mut rng);
    let probe = |p: &DomainPrefix| -> f64 {
        let b = p.banks(&cfg, SiteMask::all()).unwrap();
        bank_values(&b).iter().zip(weights.values()).map(|(a, w)| a * w).sum()
    };
    let mut tape = Tape::new();
    let tb = prefix.banks_on(&mut tape, &cfg, SiteMask::all()).unwrap();
    let mut terms = Vec::new();
    let mut offset = 0;
    for site in Site::ALL {
        for &(k, v) in &tb.get(site).pairs {
            for var in [k, v] {
                let len = tape.value(var).len();
                let w = tape.constant_from(tape.shape(var).to_vec(), weights.values()[offset..offset + len].to_vec()).unwrap();
                offset += len;
                let prod = tape.mul(var, w).unwrap();
                terms.push(tape.sum(prod));
            }
        }
    }
    let loss = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t).unwrap());
    tape.backward(loss).unwrap();
    let mut analytic = prefix.clone();
    analytic.zero_grads();
    analytic.absorb_grads(&tape).unwrap();

    let h = 1e-5;
    for (set_idx, name, idx) in [
        (0, THETA, 4),
        (0, THETA, 13),
        (1, "mlp.w1", 7),
        (1, "mlp.b2", 20),
        (2, "alpha.encoder_self.w", 33),
        (2, "alpha.decoder_cross.b", 9),
        (2, "alpha.decoder_self.w", 31 * 32 + 30),
    ] {
        let bump = |delta: f64| {
            let mut p = prefix.clone();
            p.param_sets_mut()[set_idx].get_mut(name).unwrap().values_mut()[idx] += delta;
            probe(&p)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let g = analytic.param_sets()[set_idx].get(name).unwrap().grad().unwrap()[idx];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        assert!(rel < 1e-4, "{name}[{idx}]: fd {fd} vs {g}");
    }
}

#[test]
fn targets_are_deterministic_and_duplicated() {
    let (model, tok, x) = setup();
    let t = precompute_targets(&model, &tok, &x).unwrap();
    let d = model.config().d_model;
    assert_eq!(t.values.shape(), &[8, 32]);
    assert_eq!(t.unk_count, 0);
    for r in 0..8 {
        assert_eq!(&t.values.row(r)[..2 * d], &t.values.row(r)[2 * d..]);
    }
    assert_eq!(t, precompute_targets(&model, &tok, &x).unwrap());

    let mut odd = x.clone();
    odd[2] = "zebra".into();
    assert_eq!(precompute_targets(&model, &tok, &odd).unwrap().unk_count, 1);

    let mut thawed = model.clone();
    thawed.unfreeze();
    assert!(precompute_targets(&thawed, &tok, &x).is_err());
}

#[test]
fn fitting_reduces_mse_and_leaves_theta_alone() {
    let (model, tok, x) = setup();
    let targets = precompute_targets(&model, &tok, &x).unwrap();
    let mut prefix = DomainPrefix::new(&x, &model, AlphaInit::Backbone, 4).unwrap();
    let theta = prefix.embedding.theta().clone();
    let report = fit_mlp(&prefix.embedding, &mut prefix.mlp, &targets, &FitConfig::default()).unwrap();
    assert_eq!(report.history.len(), 201);
    assert!(report.history[1] < report.history[0]);
    assert!(report.final_mse <= 0.1 * report.initial_mse, "{report:?}");
    assert_eq!(prefix.embedding.theta().values(), theta.values());

    let zero = FitTargets {
        values: Tensor::zeros(vec![x.len(), 32]),
        unk_count: 0,
    };
    let mut mlp = prefix.mlp.clone();
    for name in ["mlp.w2", "mlp.b2"] {
        mlp.params.get_mut(name).unwrap().values_mut().fill(0.0);
    }
    let before = mlp.clone();
    let r = fit_mlp(&prefix.embedding, &mut mlp, &zero, &FitConfig { epochs: 5, lr: 0.1 }).unwrap();
    assert_eq!(r.final_mse, 0.0);
    assert_eq!(mlp.params.checksum(), before.params.checksum());

    let short = FitTargets {
        values: Tensor::zeros(vec![3, 32]),
        unk_count: 0,
    };
    assert!(fit_mlp(&prefix.embedding, &mut mlp, &short, &FitConfig::default()).is_err());
}

#[test]
fn target_mapping_reuses_and_reads_out() {
    let (model, tok, x) = setup();
    let cfg = model.config();
    let prefix = DomainPrefix::new(&x, &model, AlphaInit::Backbone, 6).unwrap();
    let all = SiteMask::all();

    let (same, m) = banks_for_target_domain(&x, &prefix, &model, &tok, all).unwrap();
    assert_eq!(m, TargetMapping { reused: 8, read_out: 0 });
    assert_eq!(same, prefix.banks(cfg, all).unwrap());

    let subset = vec![x[5].clone(), x[1].clone()];
    let (sub, _) = banks_for_target_domain(&subset, &prefix, &model, &tok, all).unwrap();
    let theta = prefix.embedding.theta();
    let rows = Tensor::from_rows(&[theta.row(5).to_vec(), theta.row(1).to_vec()]).unwrap();
    assert_eq!(sub, compute_banks(&rows, &prefix.mlp, &prefix.proj, cfg, all).unwrap());

    let unseen = vec!["museum".to_string(), x[0].clone(), "park".to_string()];
    let (a, m) = banks_for_target_domain(&unseen, &prefix, &model, &tok, all).unwrap();
    assert_eq!(m, TargetMapping { reused: 1, read_out: 2 });
    let (b, _) = banks_for_target_domain(&unseen, &prefix, &model, &tok, all).unwrap();
    assert_eq!(a, b);
    assert!(bank_values(&a).iter().all(|v| v.is_finite()));
    assert!(banks_for_target_domain(&[], &prefix, &model, &tok, all).is_err());
}

#[test]
fn nearest_word_of_a_training_word_is_itself() {
    let (model, tok, x) = setup();
    let prefix = DomainPrefix::new(&x, &model, AlphaInit::Backbone, 6).unwrap();
    for (i, w) in x.iter().enumerate() {
        let j = nearest_training_word(w, &prefix, &model, &tok).unwrap();
        assert!(j == i || x[j] == *w, "{w} mapped to {}", x[j]);
    }
    let j = nearest_training_word("museum", &prefix, &model, &tok).unwrap();
    assert!(j < x.len());
}

#[test]
fn census_and_end_to_end_gradients() {
    let (model, tok, x) = setup();
    let cfg = model.config();
    let mut prefix = DomainPrefix::new(&x[..4], &model, AlphaInit::Backbone, 8).unwrap();
    let census = prefix.census();
    assert!(census.is_prefix_only());
    assert_eq!(census.entries.len(), 1 + 4 + 6);
    let d_out = 32;
    let expect = 4 * 6 + (6 * 12 + 12 + 12 * d_out + d_out) + 3 * (d_out * d_out + d_out);
    assert_eq!(census.total, expect);

    let mut tape = Tape::new();
    let banks = prefix.banks_on(&mut tape, cfg, SiteMask::all()).unwrap();
    let input = tok.encode("menu chef wine");
    let target = vec![tok.id("table"), special::EOS];
    let loss = model.sequence_nll_on(&mut tape, &input, &target, Some(&banks)).unwrap();
    tape.backward(loss).unwrap();
    prefix.zero_grads();
    prefix.absorb_grads(&tape).unwrap();
    for set in prefix.param_sets() {
        for (name, t) in set.iter() {
            let g = t.grad().unwrap();
            assert!(g.iter().any(|v| *v != 0.0), "{name} has a zero gradient");
        }
    }
    for (name, _) in tape.named_grads() {
        assert!(!model.params().contains(name), "backbone {name} received a gradient");
    }

    prefix.apply_mask(SiteMask::from_flags(true, false)).unwrap();
    let masked = prefix.census();
    assert!(!masked.entries.contains_key("alpha.encoder_self.w"));
    assert_eq!(masked.total, expect - d_out * d_out - d_out);
    let mut mixed = prefix.param_sets().to_vec();
    mixed.push(model.params());
    assert!(Census::of(&mixed).is_prefix_only());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let (model, _, x) = setup();
    let cfg = model.config();
    let prefix = DomainPrefix::new(&x, &model, AlphaInit::Backbone, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    prefix.save(&a, cfg).unwrap();
    let back = DomainPrefix::load(&a, cfg).unwrap();
    back.save(&b, cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(back.tokens(), prefix.tokens());
    assert_eq!(back.banks(cfg, SiteMask::all()).unwrap(), prefix.banks(cfg, SiteMask::all()).unwrap());

    let other = ModelConfig { d_m: 4, ..cfg.clone() };
    assert!(matches!(DomainPrefix::load(&a, &other), Err(DopError::Checkpoint(_))));
}
