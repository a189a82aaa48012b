use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dop_core::data::{corpus_stats, stats_markdown};
use dop_core::domain_words::extract_domain_words;
use dop_core::evaluation::{mean_prediction_f1, predict, write_predictions};
use dop_core::experiments::{
    emit_report, run_ablations, run_sweeps, run_zero_shot, Bench, ExperimentConfig, ExperimentReport, Method,
    RunSpec,
};
use dop_core::prefix::DomainPrefix;
use dop_core::training::write_metrics_csv;
use dop_core::{DopError, Result};

#[derive(Parser)]
#[command(name = "dop", version, about = "Domain-oriented prefix-tuning for dialogue summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// JSON experiment config; unset fields take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    target_domain: Option<String>,
    /// Seed of a single run; experiments then use only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    prefix_len: Option<usize>,
    #[arg(long, global = true)]
    few_shot_k: Option<usize>,
    #[arg(long, global = true, default_value = "dop-out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    no_dw: bool,
    #[arg(long, global = true)]
    no_dp: bool,
    #[arg(long, global = true)]
    no_enc_prefix: bool,
    #[arg(long, global = true)]
    no_dec_prefix: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the corpus as JSONL with per-domain statistics.
    GenCorpus,
    /// Extracts LDA domain words for every domain.
    ExtractWords,
    /// Builds the source-domain prefix and fits its MLP.
    FitPrefix,
    /// Trains a prefix on the source domains and scores the target.
    Train,
    /// Scores a saved prefix on the target domain.
    Eval {
        /// Defaults to `prefix.bin` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every domain as target against the baselines.
    ZeroShot,
    /// The six ablation variants on the target domain.
    Ablate,
    /// Prefix-length, noise, few-shot and source-size series.
    Sweep,
    /// Merges saved report.json files and re-emits them.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Opts {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = &self.target_domain {
            cfg.target_domain = t.clone();
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(p) = self.prefix_len {
            cfg.prefix_len = p;
        }
        cfg.flags.no_dw |= self.no_dw;
        cfg.flags.no_dp |= self.no_dp;
        cfg.flags.no_enc_prefix |= self.no_enc_prefix;
        cfg.flags.no_dec_prefix |= self.no_dec_prefix;
        cfg.validate()?;
        Ok(cfg)
    }

    fn bench(&self) -> Result<Bench> {
        Bench::new(self.config()?, Some(&self.out_dir.join("cache")))
    }

    /// The single prefix run the flags describe.
    fn spec(&self, bench: &Bench) -> RunSpec {
        let cfg = &bench.cfg;
        RunSpec {
            few_shot_k: self.few_shot_k.unwrap_or(0),
            ..bench.spec(Method::Prefix, &cfg.target_domain, cfg.seeds[0], cfg.flags)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DopError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DopError::contract(e.to_string()))?;
    text.push('\n');
    write(path, text)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_hash: String,
    spec: &'a RunSpec,
    split_hash: &'a str,
    checkpoint: Option<&'a str>,
    r1: f64,
    r2: f64,
    rl: f64,
    aborted: Option<&'a str>,
}

/// Runs a subcommand; `Ok(false)` means it finished with recorded failures.
fn run(cli: &Cli) -> Result<bool> {
    let o = &cli.opts;
    std::fs::create_dir_all(&o.out_dir).map_err(|e| DopError::io(&o.out_dir, e))?;
    let out = |name: &str| o.out_dir.join(name);
    match &cli.command {
        Command::GenCorpus => {
            let corpus = o.config()?.load_corpus()?;
            corpus.write_jsonl(&out("corpus.jsonl"))?;
            write(&out("corpus_stats.md"), stats_markdown(&corpus_stats(&corpus)))?;
            println!("wrote {} examples to {}", corpus.examples().len(), out("corpus.jsonl").display());
        }
        Command::ExtractWords => {
            let cfg = o.config()?;
            let corpus = cfg.load_corpus()?;
            let k = cfg.sweeps.prefix_lens.iter().copied().chain([cfg.prefix_len]).max().unwrap_or(cfg.prefix_len);
            let lists = extract_domain_words(&corpus, &cfg.lda, k)?;
            write_json(&out("domain_words.json"), &lists)?;
            for l in &lists {
                println!("{}: {}", l.domain, l.words.join(" "));
            }
        }
        Command::FitPrefix => {
            let bench = o.bench()?;
            let spec = o.spec(&bench);
            let (prefix, report) = bench.fit_prefix(&spec)?;
            prefix.save(&out("prefix-init.bin"), bench.backbone.config())?;
            #[derive(Serialize)]
            struct Fit<'a> {
                x_dw: &'a [String],
                report: Option<dop_core::prefix::FitReport>,
            }
            write_json(&out("fit.json"), &Fit { x_dw: prefix.tokens(), report: report.clone() })?;
            match report {
                Some(r) => println!("fitted {} words: mse {:.6} -> {:.6}", prefix.prefix_len(), r.initial_mse, r.final_mse),
                None => println!("placeholder prefix of {} rows, no fit", prefix.prefix_len()),
            }
        }
        Command::Train => {
            let mut bench = o.bench()?;
            let spec = o.spec(&bench);
            let res = bench.run(&spec)?;
            let prefix = res.prefix.as_ref().ok_or_else(|| DopError::contract("prefix run kept no prefix"))?;
            prefix.save(&out("prefix.bin"), bench.backbone.config())?;
            write_metrics_csv(&out("metrics.csv"), &res.metrics)?;
            write_predictions(&out("predictions.jsonl"), &res.predictions)?;
            write_json(
                &out("run.json"),
                &RunSummary {
                    config_hash: bench.cfg.hash(),
                    spec: &spec,
                    split_hash: &res.split_hash,
                    checkpoint: Some("prefix.bin"),
                    r1: res.scores[0],
                    r2: res.scores[1],
                    rl: res.scores[2],
                    aborted: res.aborted.as_deref(),
                },
            )?;
            print_scores(&spec, res.scores);
            if let Some(msg) = &res.aborted {
                eprintln!("training aborted: {msg}");
                return Ok(false);
            }
        }
        Command::Eval { checkpoint } => {
            let bench = o.bench()?;
            let spec = o.spec(&bench);
            let path = checkpoint.clone().unwrap_or_else(|| out("prefix.bin"));
            let prefix = DomainPrefix::load(&path, bench.backbone.config())?;
            let banks = bench.test_banks(&spec, &prefix)?;
            let eval = bench.eval_examples(&spec)?;
            let preds = predict(&bench.backbone, &bench.tok, &banks, &eval, !spec.flags.no_dp, &bench.cfg.decode)?;
            let scores = mean_prediction_f1(&preds);
            write_predictions(&out("eval_predictions.jsonl"), &preds)?;
            write_json(
                &out("eval.json"),
                &RunSummary {
                    config_hash: bench.cfg.hash(),
                    spec: &spec,
                    split_hash: &bench.split(&spec)?.hash(),
                    checkpoint: path.strip_prefix(&o.out_dir).unwrap_or(&path).to_str(),
                    r1: scores[0],
                    r2: scores[1],
                    rl: scores[2],
                    aborted: None,
                },
            )?;
            print_scores(&spec, scores);
        }
        Command::ZeroShot => return emit(run_zero_shot(&mut o.bench()?), &o.out_dir),
        Command::Ablate => return emit(run_ablations(&mut o.bench()?), &o.out_dir),
        Command::Sweep => return emit(run_sweeps(&mut o.bench()?)?, &o.out_dir),
        Command::Report { inputs } => {
            let mut merged: Option<ExperimentReport> = None;
            for p in inputs {
                let text = std::fs::read_to_string(p).map_err(|e| DopError::io(p, e))?;
                let r: ExperimentReport = serde_json::from_str(&text).map_err(|e| DopError::Parse {
                    location: p.display().to_string(),
                    detail: e.to_string(),
                })?;
                match merged.as_mut() {
                    Some(m) => m.merge(r)?,
                    None => merged = Some(r),
                }
            }
            return emit(merged.expect("clap requires an input"), &o.out_dir);
        }
    }
    Ok(true)
}

fn print_scores(spec: &RunSpec, s: [f64; 3]) {
    println!("{}: R-1 {:.4} R-2 {:.4} R-L {:.4}", spec.label(), s[0], s[1], s[2]);
}

fn emit(report: ExperimentReport, dir: &Path) -> Result<bool> {
    let files = emit_report(&report, dir)?;
    print!("{}", report.markdown());
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    for f in &report.failures {
        eprintln!("failure: {f}");
    }
    Ok(!report.has_failures())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
