//! `expo`: generate corpora, train, evaluate, estimate decision entropy and
//! run the ablation grid.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use expo_core::cde::{
    chain_rule_cde, dataset_cde, enumerate_cde, logit_free_cde, policy_sampler, CdeEstimate, CdeItem, DecisionProbe,
    EstimatorMethod, ExampleEntropies,
};
use expo_core::curriculum::{entropy_ratio, expo_hm_pipeline, read_run_log, run_grid, TrainMethod};
use expo_core::eval::{emit_report, evaluate, EvalReport};
use expo_core::policy::{load_checkpoint, Snapshot};
use expo_core::rng;
use expo_core::task::{build_prompt, generate_dataset, read_corpus, write_corpus, Example, PolicyManual, PromptMode, Split, TaskVocab};

use config::{file_sha256, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "expo", version, about = "Reason-then-answer post-training of a toy policy")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file and EXPO_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override such as `train.grpo.group_size=4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus.
    GenData,
    /// Warm up and post-train a policy.
    Train {
        #[arg(long, value_enum, default_value = "expo")]
        method: Method,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate conditional decision entropy of a checkpoint.
    Cde {
        #[arg(long, value_enum, default_value = "mc-dataset")]
        method: CdeMethod,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarise a finished run, optionally against a baseline run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the four-row ablation grid over `grid_seeds`.
    Grid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Sft,
    Dpo,
    Grpo,
    Expo,
}

impl From<Method> for TrainMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Sft => TrainMethod::Sft,
            Method::Dpo => TrainMethod::Dpo,
            Method::Grpo => TrainMethod::Grpo,
            Method::Expo => TrainMethod::Expo,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CdeMethod {
    Exact,
    McDataset,
    ChainRule,
    LogitFree,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    seed: u64,
    config: RunConfig,
    artifacts: Vec<Artifact>,
}

fn write_manifest(cfg: &RunConfig, command: &str, out: &Path, paths: &[PathBuf]) -> Result<PathBuf> {
    let mut artifacts = paths
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(p);
            Ok(Artifact { path: rel.to_string_lossy().replace('\\', "/"), sha256: file_sha256(p)? })
        })
        .collect::<Result<Vec<_>>>()?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    artifacts.dedup_by(|a, b| a.path == b.path);
    let mut config = cfg.clone();
    config.out_dir = None;
    let m = Manifest { command, config_digest: cfg.digest()?, seed: cfg.seed, config, artifacts };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Corpus from `cfg.corpus`, or freshly generated and written under `out`.
fn load_corpus(cfg: &RunConfig, tv: &TaskVocab, out: &Path, written: &mut Vec<PathBuf>) -> Result<Vec<Example>> {
    if let Some(p) = &cfg.corpus {
        return Ok(read_corpus(p, tv)?);
    }
    let corpus = generate_dataset(&cfg.dataset, tv)?;
    let p = out.join("corpus.jsonl");
    write_corpus(&corpus, tv, &p)?;
    written.push(p);
    Ok(corpus)
}

fn load_policy(path: &Path, tv: &TaskVocab) -> Result<Snapshot<f64>> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(Snapshot::new(load_checkpoint::<f64>(path, tv.vocab())?.params))
}

fn fine_grained_items<'a>(corpus: &'a [Example], split: Split, tv: &TaskVocab) -> Result<Vec<(CdeItem, &'a Example)>> {
    corpus
        .iter()
        .filter(|e| e.split == split && e.task.is_fine_grained())
        .map(|e| {
            let x = build_prompt(e, PromptMode::Plain, &PolicyManual::standard(e.task, tv), tv)?;
            Ok((CdeItem { id: e.id, x }, e))
        })
        .collect()
}

fn estimate_cde(cfg: &RunConfig, method: CdeMethod, snap: &Snapshot<f64>, corpus: &[Example], tv: &TaskVocab) -> Result<CdeEstimate> {
    let est = &cfg.eval.estimator;
    let pairs = fine_grained_items(corpus, cfg.eval.split, tv)?;
    if pairs.is_empty() {
        bail!("no fine-grained examples in the {:?} split", cfg.eval.split);
    }
    let items: Vec<CdeItem> = pairs.iter().map(|(i, _)| i.clone()).collect();
    let probe = DecisionProbe::template(tv, cfg.eval.max_response_len.saturating_sub(5).max(1));
    let seed = rng::derive_seed(cfg.seed, "cde", &[]);
    let mut r = rng::stream(seed, "cde-base", &[]);
    Ok(match method {
        CdeMethod::McDataset => dataset_cde(snap, &items, &probe, est, &mut r)?,
        CdeMethod::ChainRule => chain_rule_cde(snap, &items, &probe, est, &mut r)?,
        CdeMethod::Exact => {
            let probe = DecisionProbe { max_explanation_len: cfg.exact_max_explanation_len, ..probe };
            let per = items
                .iter()
                .map(|i| {
                    let e = enumerate_cde(snap, &i.x, &probe, est.top_k, 1_000_000)?;
                    Ok(ExampleEntropies { id: i.id, entropies: vec![e.decision] })
                })
                .collect::<Result<Vec<_>>>()?;
            CdeEstimate::from_parts(EstimatorMethod::Exact, 1, est.top_k, per)
        }
        CdeMethod::LogitFree => {
            let per = pairs
                .iter()
                .map(|(i, e)| {
                    let mut r = rng::stream(seed, "cde-logit-free", &[i.id]);
                    let sampler = policy_sampler(snap, &i.x, e.task, tv, est.temperature, cfg.eval.max_response_len);
                    let h = logit_free_cde(sampler, est.k, &mut r)?;
                    Ok(ExampleEntropies { id: i.id, entropies: vec![h.entropy] })
                })
                .collect::<Result<Vec<_>>>()?;
            CdeEstimate::from_parts(EstimatorMethod::LogitFree, est.k, est.top_k, per)
        }
    })
}

#[derive(Serialize)]
struct Summary {
    fine_grained_f1: f64,
    per_task_f1: std::collections::BTreeMap<String, f64>,
    mean_cde: f64,
    mean_judge: f64,
    format_rate: f64,
    mean_cde_correct: Option<f64>,
    mean_cde_wrong: Option<f64>,
    mean_policy_entropy: Option<f64>,
    entropy_ratio: Option<expo_core::curriculum::EntropyRatio>,
}

fn read_report(run: &Path) -> Result<EvalReport> {
    let p = run.join("eval").join("report.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides { config: cli.config, sets: cli.sets, seed: cli.seed, out: cli.out };
    let cfg = RunConfig::load(&overrides).map_err(Failure::Config)?;
    execute(&cli.command, &cfg).map_err(Failure::Runtime)
}

fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    let tv = TaskVocab::standard();
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let name = match command {
        Command::GenData => {
            let corpus = generate_dataset(&cfg.dataset, &tv)?;
            let p = out.join("corpus.jsonl");
            write_corpus(&corpus, &tv, &p)?;
            written.push(p);
            "gen-data"
        }
        Command::Train { method } => {
            let corpus = load_corpus(cfg, &tv, &out, &mut written)?;
            let m: TrainMethod = (*method).into();
            let o = expo_hm_pipeline(&cfg.pipeline(m), &corpus, &tv, Some(&out))?;
            written.extend(o.artifacts);
            "train"
        }
        Command::Eval { checkpoint } => {
            let snap = load_policy(checkpoint, &tv)?;
            let corpus = load_corpus(cfg, &tv, &out, &mut written)?;
            let report = evaluate(&snap, &corpus, &cfg.eval_config(), &tv, rng::derive_seed(cfg.seed, "eval", &[]))?;
            written.extend(emit_report(&report, &out.join("eval"))?);
            "eval"
        }
        Command::Cde { method, checkpoint } => {
            let snap = load_policy(checkpoint, &tv)?;
            let corpus = load_corpus(cfg, &tv, &out, &mut written)?;
            let est = estimate_cde(cfg, *method, &snap, &corpus, &tv)?;
            let p = out.join(format!("cde_{}.json", est.method.name()));
            fs::write(&p, est.to_json()? + "\n").with_context(|| format!("writing {}", p.display()))?;
            println!("{} CDE = {:.6}", est.method.name(), est.mean);
            written.push(p);
            "cde"
        }
        Command::Report { run, baseline } => {
            let report = read_report(run)?;
            let log = run.join("run_log.jsonl");
            let log = if log.is_file() { Some(read_run_log(&log)?) } else { None };
            let ratio = match (baseline, &log) {
                (Some(b), Some(l)) => Some(entropy_ratio(l, &read_run_log(&b.join("run_log.jsonl"))?)?),
                (Some(_), None) => bail!("run {} has no run log for the entropy ratio", run.display()),
                _ => None,
            };
            let dir = out.join("report");
            written.extend(emit_report(&report, &dir)?);
            let s = Summary {
                fine_grained_f1: report.fine_grained_f1,
                per_task_f1: report.per_task_f1.clone(),
                mean_cde: report.cde(),
                mean_judge: report.mean_judge,
                format_rate: report.format_rate,
                mean_cde_correct: report.cde_by_correctness.correct.as_ref().map(|g| g.mean),
                mean_cde_wrong: report.cde_by_correctness.wrong.as_ref().map(|g| g.mean),
                mean_policy_entropy: log
                    .as_ref()
                    .filter(|l| !l.is_empty())
                    .map(|l| l.iter().map(|r| r.policy_entropy).sum::<f64>() / l.len() as f64),
                entropy_ratio: ratio,
            };
            let p = dir.join("summary.json");
            fs::write(&p, serde_json::to_string_pretty(&s)? + "\n").with_context(|| format!("writing {}", p.display()))?;
            written.push(p);
            "report"
        }
        Command::Grid => {
            let corpus = load_corpus(cfg, &tv, &out, &mut written)?;
            let dir = out.join("grid");
            let g = run_grid(&cfg.pipeline(TrainMethod::Expo), &cfg.grid_seeds, &corpus, &tv, Some(&dir))?;
            for s in &g.summary {
                println!("{:<16} f1 {:.4}  cde {:.4}  judge {:.3}", s.row, s.fine_grained_f1, s.mean_cde, s.mean_judge);
            }
            written.extend(collect_files(&dir)?);
            "grid"
        }
    };
    write_manifest(cfg, name, &out, &written)?;
    Ok(())
}

fn collect_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn error_json(kind: &str, e: &anyhow::Error) -> String {
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    serde_json::json!({ "error": kind, "message": chain.join(": ") }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("{}", error_json("config", &e));
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", error_json("runtime", &e));
            ExitCode::from(1)
        }
    }
}
