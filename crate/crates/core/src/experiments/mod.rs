//! Leave-one-domain-out experiments: the zero-shot comparison, ablations,
//! sweeps and report emission.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::{config_hash, Archive};
use crate::data::{
    build_split, distractor_words, generate_synthetic_corpus, Corpus, DialogueExample, SplitPlan,
    SyntheticSpec, Tokenizer,
};
use crate::domain_words::{build_prefix_sequence, corrupt_domain_words, extract_domain_words, DomainWordList, LdaConfig};
use crate::error::{DopError, Result};
use crate::evaluation::{lead3, mean_prediction_f1, oracle_greedy, predict, DecodeConfig, Prediction};
use crate::prefix::{
    banks_for_target_domain, fit_mlp, precompute_targets, AlphaInit, DomainPrefix, FitConfig, FitReport, SiteMask,
};
use crate::training::{
    few_shot_continue, finetune_backbone, pretrain_backbone, train, EpochMetrics, PretrainConfig,
    TrainConfig, TrainData,
};
use crate::transformer::{Banks, EncoderDecoderModel, ModelConfig};

pub use report::{
    emit_report, Aggregate, ExperimentReport, RunMetadata, ScoreTable, Series, SeriesPoint, TableRow,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_dw: bool,
    pub no_dp: bool,
    pub no_enc_prefix: bool,
    pub no_dec_prefix: bool,
}

impl AblationFlags {
    /// Vanilla prefix-tuning: placeholder prefix and no prompt.
    pub fn prefix_tuning() -> Self {
        Self {
            no_dw: true,
            no_dp: true,
            ..Self::default()
        }
    }

    pub fn mask(&self) -> SiteMask {
        SiteMask::from_flags(self.no_enc_prefix, self.no_dec_prefix)
    }

    /// The six ablation variants with their row labels.
    pub fn variants() -> Vec<(&'static str, Self)> {
        let f = Self::default();
        vec![
            ("full", f),
            ("w/o DW", Self { no_dw: true, ..f }),
            ("w/o DP", Self { no_dp: true, ..f }),
            ("w/o DW&DP", Self::prefix_tuning()),
            ("w/o enc.prefix", Self { no_enc_prefix: true, ..f }),
            ("w/o dec.prefix", Self { no_dec_prefix: true, ..f }),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub prefix_lens: Vec<usize>,
    pub noise_fractions: Vec<f64>,
    pub few_shot_ks: Vec<usize>,
    pub source_sizes: Vec<usize>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.prefix_lens.is_empty()
            && self.noise_fractions.is_empty()
            && self.few_shot_ks.is_empty()
            && self.source_sizes.is_empty()
    }
}

/// Everything that determines an experiment. Unset JSON fields take the
/// desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// JSONL corpus; the synthetic spec is used when absent.
    pub corpus_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub target_domain: String,
    /// `vocab_size` is replaced by the tokenizer's size.
    pub model: ModelConfig,
    pub backbone_seed: u64,
    pub pretrain: PretrainConfig,
    pub lda: LdaConfig,
    pub prefix_len: usize,
    pub alpha_init: AlphaInit,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub few_shot_train: TrainConfig,
    /// Source examples kept per target example when a prefix continues on
    /// few-shot data; `None` keeps the whole source split.
    pub few_shot_replay: Option<usize>,
    pub finetune: TrainConfig,
    pub valid_size: usize,
    /// Source-domain training examples kept per run.
    pub source_limit: Option<usize>,
    /// Target test examples scored per run (the last ones of the split).
    pub eval_limit: Option<usize>,
    pub decode: DecodeConfig,
    pub flags: AblationFlags,
    pub sweeps: SweepConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 6,
            batch_size: 8,
            initial_lr: 3e-3,
            valid_limit: Some(8),
            valid_max_tokens: 32,
            word_swap: 0.5,
            ..TrainConfig::default()
        };
        Self {
            corpus_path: None,
            synthetic: SyntheticSpec::default(),
            target_domain: "train".into(),
            model: ModelConfig {
                num_layers: 2,
                d_model: 32,
                num_heads: 4,
                d_ff: 64,
                vocab_size: 0,
                max_encoder_len: 64,
                max_decoder_len: 32,
                d_m: 16,
            },
            backbone_seed: 0,
            pretrain: PretrainConfig::default(),
            lda: LdaConfig::default(),
            prefix_len: 16,
            alpha_init: AlphaInit::Backbone,
            fit: FitConfig::default(),
            few_shot_train: TrainConfig {
                epochs: 3,
                ..train.clone()
            },
            few_shot_replay: Some(1),
            finetune: TrainConfig {
                initial_lr: 2e-3,
                ..train.clone()
            },
            train,
            valid_size: 20,
            source_limit: Some(200),
            eval_limit: Some(30),
            decode: DecodeConfig {
                beam_size: 1,
                max_tokens: 32,
                length_penalty: 1.0,
            },
            flags: AblationFlags::default(),
            sweeps: SweepConfig {
                prefix_lens: vec![4, 8, 16, 24],
                noise_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                few_shot_ks: vec![0, 10, 50, 100],
                source_sizes: vec![50, 100, 200],
            },
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DopError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| DopError::Parse {
            location: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DopError::contract("seeds must be nonempty"));
        }
        if self.prefix_len == 0 {
            return Err(DopError::contract("prefix_len must be positive"));
        }
        self.train.validate()?;
        self.few_shot_train.validate()?;
        self.finetune.validate()
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus_path {
            Some(p) => Corpus::read_jsonl(p),
            None => generate_synthetic_corpus(&self.synthetic),
        }
    }

    /// Longest domain-word list any run of this config needs.
    fn words_needed(&self) -> usize {
        self.sweeps.prefix_lens.iter().copied().chain([self.prefix_len]).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prefix training with the flags of the run.
    Prefix,
    FineTune,
    Lead3,
    Oracle,
}

impl Method {
    pub fn label(self, flags: AblationFlags) -> &'static str {
        match self {
            Method::Prefix if flags == AblationFlags::prefix_tuning() => "Prefix-tuning",
            Method::Prefix => "DOP",
            Method::FineTune => "Fine-tune",
            Method::Lead3 => "Lead-3",
            Method::Oracle => "Oracle",
        }
    }
}

/// One (target, seed, variant) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: Method,
    pub target: String,
    pub seed: u64,
    pub flags: AblationFlags,
    pub prefix_len: usize,
    pub noise: f64,
    pub few_shot_k: usize,
    pub source_limit: Option<usize>,
}

impl RunSpec {
    fn key(&self) -> String {
        serde_json::to_string(self).expect("run specs serialize")
    }

    pub fn label(&self) -> String {
        format!("{}/{}/seed{}", self.target, self.method.label(self.flags), self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub split_hash: String,
    pub scores: [f64; 3],
    pub predictions: Vec<Prediction>,
    pub metrics: Vec<EpochMetrics>,
    pub prefix: Option<DomainPrefix>,
    pub aborted: Option<String>,
}

/// Placeholder tokens of a prefix without domain words.
pub fn placeholder_tokens(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("<prefix{i}>")).collect()
}

const NOISE_TRAIN_SALT: u64 = 0x6e6f_6973_65;

/// Shared state of an experiment: corpus, tokenizer, frozen backbone,
/// per-domain word lists and a memo of finished runs.
pub struct Bench {
    pub cfg: ExperimentConfig,
    pub corpus: Corpus,
    pub tok: Tokenizer,
    pub backbone: EncoderDecoderModel,
    /// Per-domain lists in label order.
    pub word_lists: Vec<DomainWordList>,
    memo: BTreeMap<String, RunOutput>,
    /// Stage timings in seconds.
    pub durations: Vec<(String, f64)>,
}

impl Bench {
    /// Builds the tokenizer, pretrains (or loads from `cache_dir`) the
    /// backbone and extracts domain words.
    pub fn new(cfg: ExperimentConfig, cache_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let corpus = cfg.load_corpus()?;
        let domains = corpus.domains();
        if domains.len() < 2 {
            return Err(DopError::contract("leave-one-domain-out needs at least two domains"));
        }
        let tok = Tokenizer::from_corpus(&corpus, &[]);
        let mut durations = Vec::new();
        let t = Instant::now();
        let backbone = load_or_pretrain(&cfg, &corpus, &tok, cache_dir)?;
        durations.push(("backbone".to_string(), t.elapsed().as_secs_f64()));
        let t = Instant::now();
        let word_lists = extract_domain_words(&corpus, &cfg.lda, cfg.words_needed())?;
        durations.push(("domain_words".to_string(), t.elapsed().as_secs_f64()));
        Ok(Self {
            cfg,
            corpus,
            tok,
            backbone,
            word_lists,
            memo: BTreeMap::new(),
            durations,
        })
    }

    pub fn domains(&self) -> Vec<String> {
        self.corpus.domains()
    }

    fn words_of(&self, domain: &str) -> Result<&DomainWordList> {
        self.word_lists
            .iter()
            .find(|l| l.domain == domain)
            .ok_or_else(|| DopError::contract(format!("no domain words for {domain}")))
    }

    pub fn spec(&self, method: Method, target: &str, seed: u64, flags: AblationFlags) -> RunSpec {
        RunSpec {
            method,
            target: target.to_string(),
            seed,
            flags,
            prefix_len: self.cfg.prefix_len,
            noise: 0.0,
            few_shot_k: 0,
            source_limit: self.cfg.source_limit,
        }
    }

    pub fn split(&self, spec: &RunSpec) -> Result<SplitPlan> {
        let mut split = build_split(&self.corpus, &spec.target, self.cfg.valid_size, spec.few_shot_k, spec.seed)?;
        if let Some(n) = spec.source_limit {
            split.limit_source(n);
        }
        if let (Method::Prefix, 1.., Some(r)) = (spec.method, spec.few_shot_k, self.cfg.few_shot_replay) {
            split.limit_source(r * spec.few_shot_k);
        }
        Ok(split)
    }

    /// Training domain-word sequence (source domains only), after noise.
    pub fn training_words(&self, spec: &RunSpec) -> Result<Vec<String>> {
        let sources: Vec<DomainWordList> =
            self.word_lists.iter().filter(|l| l.domain != spec.target).cloned().collect();
        let seq = build_prefix_sequence(&sources, spec.prefix_len)?;
        corrupt_domain_words(&seq.tokens, spec.noise, distractor_words(), spec.seed ^ NOISE_TRAIN_SALT)
    }

    /// Top words of the target domain used at test time. Noise only
    /// touches the training sequence.
    pub fn target_words(&self, spec: &RunSpec) -> Result<Vec<String>> {
        let list = self.words_of(&spec.target)?;
        let n = spec.prefix_len.min(list.words.len());
        Ok(list.words[..n].to_vec())
    }

    /// Memoized [`Self::execute`].
    pub fn run(&mut self, spec: &RunSpec) -> Result<RunOutput> {
        let key = spec.key();
        if let Some(out) = self.memo.get(&key) {
            return Ok(out.clone());
        }
        let t = Instant::now();
        let out = self.execute(spec)?;
        self.durations.push((spec.label(), t.elapsed().as_secs_f64()));
        log::info!(
            "{}: R-1 {:.4} R-2 {:.4} R-L {:.4} ({:.1}s)",
            spec.label(),
            out.scores[0],
            out.scores[1],
            out.scores[2],
            t.elapsed().as_secs_f64()
        );
        self.memo.insert(key, out.clone());
        Ok(out)
    }

    /// Runs `spec` from scratch. Few-shot prefix runs continue from the
    /// (memoized) zero-shot run of the same spec.
    pub fn execute(&mut self, spec: &RunSpec) -> Result<RunOutput> {
        let start = if spec.method == Method::Prefix && spec.few_shot_k > 0 {
            let zero = self.run(&RunSpec {
                few_shot_k: 0,
                ..spec.clone()
            })?;
            Some(zero.prefix.ok_or_else(|| DopError::contract("zero-shot run kept no prefix"))?)
        } else {
            None
        };
        let split = self.split(spec)?;
        let eval = self.eval_examples(spec)?;
        let mut out = RunOutput {
            spec: spec.clone(),
            split_hash: split.hash(),
            scores: [0.0; 3],
            predictions: Vec::new(),
            metrics: Vec::new(),
            prefix: None,
            aborted: None,
        };
        match spec.method {
            Method::Lead3 | Method::Oracle => {
                let f = if spec.method == Method::Lead3 { lead3 } else { oracle_greedy };
                out.predictions = eval.iter().map(|e| Prediction::new(&e.id, f(e), &e.summary)).collect();
            }
            Method::FineTune => {
                let data = TrainData::from_split(&self.corpus, &split, &self.tok, &self.backbone, false)?;
                let ft = finetune_backbone(&self.backbone, &self.tok, &data, &self.cfg.finetune)?;
                let banks = Banks::empty(ft.model.config());
                out.predictions = predict(&ft.model, &self.tok, &banks, &eval, false, &self.cfg.decode)?;
                out.metrics = ft.metrics;
                out.aborted = ft.aborted;
            }
            Method::Prefix => {
                let with_prompt = !spec.flags.no_dp;
                let mask = spec.flags.mask();
                let data = TrainData::from_split(&self.corpus, &split, &self.tok, &self.backbone, with_prompt)?;
                // Row swapping only matters when test-time words differ.
                let swap = |c: &TrainConfig| TrainConfig {
                    seed: spec.seed,
                    word_swap: if spec.flags.no_dw { 0.0 } else { c.word_swap },
                    ..c.clone()
                };
                let trained = if let Some(start) = start {
                    let cfg = swap(&self.cfg.few_shot_train);
                    few_shot_continue(&self.backbone, &self.tok, start, mask, &data, &cfg)?
                } else {
                    let prefix = self.initial_prefix(spec)?;
                    train(&self.backbone, &self.tok, prefix, mask, &data, &swap(&self.cfg.train))?
                };
                let banks = self.test_banks(spec, &trained.prefix)?;
                out.predictions = predict(&self.backbone, &self.tok, &banks, &eval, with_prompt, &self.cfg.decode)?;
                out.metrics = trained.metrics;
                out.aborted = trained.aborted;
                out.prefix = Some(trained.prefix);
            }
        }
        out.scores = mean_prediction_f1(&out.predictions);
        Ok(out)
    }

    /// Embedding and fitted MLP for a zero-shot prefix run.
    pub fn initial_prefix(&self, spec: &RunSpec) -> Result<DomainPrefix> {
        Ok(self.fit_prefix(spec)?.0)
    }

    /// Like [`Self::initial_prefix`], also returning the fit report when a
    /// fit took place.
    pub fn fit_prefix(&self, spec: &RunSpec) -> Result<(DomainPrefix, Option<FitReport>)> {
        if spec.flags.no_dw {
            let tokens = placeholder_tokens(spec.prefix_len);
            return Ok((DomainPrefix::new(&tokens, &self.backbone, self.cfg.alpha_init, spec.seed)?, None));
        }
        let x_dw = self.training_words(spec)?;
        let mut prefix = DomainPrefix::new(&x_dw, &self.backbone, self.cfg.alpha_init, spec.seed)?;
        let targets = precompute_targets(&self.backbone, &self.tok, &x_dw)?;
        let report = fit_mlp(&prefix.embedding, &mut prefix.mlp, &targets, &self.cfg.fit)?;
        log::debug!("fit {}: mse {:.4} -> {:.4}", spec.label(), report.initial_mse, report.final_mse);
        Ok((prefix, Some(report)))
    }

    /// Test examples scored for `spec`.
    pub fn eval_examples(&self, spec: &RunSpec) -> Result<Vec<&DialogueExample>> {
        let split = self.split(spec)?;
        let eval = self.corpus.select(split.eval_ids(self.cfg.eval_limit))?;
        if eval.is_empty() {
            return Err(DopError::contract(format!("no test examples left for {}", spec.target)));
        }
        Ok(eval)
    }

    /// Test-time banks of a trained prefix: the target domain's words
    /// mapped through it, or its own rows when domain words are ablated.
    pub fn test_banks(&self, spec: &RunSpec, prefix: &DomainPrefix) -> Result<Banks> {
        let mask = spec.flags.mask();
        if spec.flags.no_dw {
            prefix.banks(self.backbone.config(), mask)
        } else {
            let words = self.target_words(spec)?;
            Ok(banks_for_target_domain(&words, prefix, &self.backbone, &self.tok, mask)?.0)
        }
    }

    fn metadata(&self) -> RunMetadata {
        RunMetadata {
            config_hash: self.cfg.hash(),
            seeds: self.cfg.seeds.clone(),
            split_hashes: BTreeMap::new(),
            durations: Vec::new(),
        }
    }

    /// Runs every seed of `spec` and folds the results into an aggregate,
    /// recording split hashes and failures in `report`.
    fn aggregate(&mut self, template: &RunSpec, report: &mut ExperimentReport) -> Aggregate {
        let mut scores = Vec::new();
        let mut failures = 0;
        for &seed in &self.cfg.seeds.clone() {
            let spec = RunSpec {
                seed,
                ..template.clone()
            };
            match self.run(&spec) {
                Ok(out) => {
                    let key = format!(
                        "{}/seed{}/k{}/n{}",
                        spec.target,
                        seed,
                        spec.few_shot_k,
                        spec.source_limit.map_or("all".to_string(), |n| n.to_string())
                    );
                    match report.metadata.split_hashes.get(&key) {
                        Some(h) if *h != out.split_hash => {
                            failures += 1;
                            report.failures.push(format!("{}: split hash differs from earlier runs", spec.label()));
                            continue;
                        }
                        _ => {
                            report.metadata.split_hashes.insert(key, out.split_hash.clone());
                        }
                    }
                    if let Some(msg) = &out.aborted {
                        report.failures.push(format!("{}: {msg}", spec.label()));
                        failures += 1;
                    } else {
                        scores.push(out.scores);
                    }
                }
                Err(e) => {
                    log::error!("{}: {e}", spec.label());
                    report.failures.push(format!("{}: {e}", spec.label()));
                    failures += 1;
                }
            }
        }
        Aggregate::from_scores(&scores, failures)
    }

    fn finish(&self, mut report: ExperimentReport, since: usize) -> ExperimentReport {
        report.metadata.durations = self.durations[since..].to_vec();
        report
    }
}

fn load_or_pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    tok: &Tokenizer,
    cache_dir: Option<&Path>,
) -> Result<EncoderDecoderModel> {
    let model_cfg = ModelConfig {
        vocab_size: tok.len(),
        ..cfg.model.clone()
    };
    let key = config_hash(&(&model_cfg, &cfg.pretrain, cfg.backbone_seed, corpus.examples(), tok.vocab()));
    let path = cache_dir.map(|d| d.join(format!("backbone-{}.bin", &key[..16])));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let archive = Archive::load(p, None)?;
        log::info!("loaded backbone from {}", p.display());
        return EncoderDecoderModel::from_archive(&archive, model_cfg);
    }
    let mut model = EncoderDecoderModel::new(model_cfg, cfg.backbone_seed)?;
    let dialogues: Vec<&DialogueExample> = corpus.examples().iter().collect();
    let report = pretrain_backbone(&mut model, tok, &dialogues, &cfg.pretrain)?;
    log::info!("pretraining loss curve {:?}", report.loss_curve);
    model.freeze();
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| DopError::io(dir, e))?;
        }
        model.to_archive().save(&p)?;
    }
    Ok(model)
}

/// Every domain in turn as the target: DOP against prefix-tuning, full
/// fine-tuning, Lead-3 and the extractive oracle.
pub fn run_zero_shot(bench: &mut Bench) -> ExperimentReport {
    let since = bench.durations.len();
    let mut report = ExperimentReport::new(bench.metadata());
    let methods = [
        (Method::Prefix, bench.cfg.flags),
        (Method::Prefix, AblationFlags::prefix_tuning()),
        (Method::FineTune, AblationFlags::default()),
        (Method::Lead3, AblationFlags::default()),
        (Method::Oracle, AblationFlags::default()),
    ];
    let mut table = ScoreTable::new(
        "Zero-shot ROUGE by target domain",
        "target",
        methods.iter().map(|(m, f)| m.label(*f).to_string()).collect(),
    );
    for target in bench.domains() {
        let cells = methods
            .iter()
            .map(|&(m, f)| {
                let spec = bench.spec(m, &target, 0, f);
                bench.aggregate(&spec, &mut report)
            })
            .collect();
        table.rows.push(TableRow { label: target, cells });
    }
    report.tables.push(table);
    bench.finish(report, since)
}

/// The six ablation variants on the configured target domain, with shared
/// seeds and splits.
pub fn run_ablations(bench: &mut Bench) -> ExperimentReport {
    let since = bench.durations.len();
    let mut report = ExperimentReport::new(bench.metadata());
    let target = bench.cfg.target_domain.clone();
    let mut table = ScoreTable::new(&format!("Ablations on {target}"), "variant", vec!["DOP".into()]);
    for (label, flags) in AblationFlags::variants() {
        let spec = bench.spec(Method::Prefix, &target, 0, flags);
        let cell = bench.aggregate(&spec, &mut report);
        table.rows.push(TableRow {
            label: label.to_string(),
            cells: vec![cell],
        });
    }
    report.tables.push(table);
    bench.finish(report, since)
}

/// Prefix-length, noise, few-shot and source-size series on the configured
/// target domain. Empty lists are skipped.
pub fn run_sweeps(bench: &mut Bench) -> Result<ExperimentReport> {
    let sweeps = bench.cfg.sweeps.clone();
    if sweeps.is_empty() {
        return Err(DopError::contract("every sweep list is empty"));
    }
    let since = bench.durations.len();
    let mut report = ExperimentReport::new(bench.metadata());
    let target = bench.cfg.target_domain.clone();
    let base = bench.spec(Method::Prefix, &target, 0, bench.cfg.flags);
    let mut series = |name: &str, x_label: &str, specs: Vec<(f64, RunSpec)>, report: &mut ExperimentReport| {
        let points = specs
            .into_iter()
            .map(|(x, spec)| SeriesPoint {
                x,
                score: bench.aggregate(&spec, report),
            })
            .collect();
        report.series.push(Series {
            name: name.to_string(),
            x_label: x_label.to_string(),
            points,
        });
    };
    let with = |f: &dyn Fn(&mut RunSpec)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };
    let specs = |xs: Vec<f64>, f: &dyn Fn(&mut RunSpec, f64)| -> Vec<(f64, RunSpec)> {
        xs.into_iter().map(|x| (x, with(&|s| f(s, x)))).collect()
    };
    if !sweeps.prefix_lens.is_empty() {
        let xs = sweeps.prefix_lens.iter().map(|&p| p as f64).collect();
        series("prefix_len", "prefix length", specs(xs, &|s, x| s.prefix_len = x as usize), &mut report);
    }
    if !sweeps.noise_fractions.is_empty() {
        series("noise", "noise fraction", specs(sweeps.noise_fractions.clone(), &|s, x| s.noise = x), &mut report);
    }
    if !sweeps.few_shot_ks.is_empty() {
        let xs = sweeps.few_shot_ks.iter().map(|&k| k as f64).collect();
        series("few_shot", "target examples k", specs(xs, &|s, x| s.few_shot_k = x as usize), &mut report);
    }
    if !sweeps.source_sizes.is_empty() {
        let xs = sweeps.source_sizes.iter().map(|&n| n as f64).collect();
        series("source_size", "source examples", specs(xs, &|s, x| s.source_limit = Some(x as usize)), &mut report);
    }
    Ok(bench.finish(report, since))
}
