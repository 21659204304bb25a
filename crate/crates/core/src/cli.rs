//! Command implementations behind the `ssm-prune` binary. Every command is a thin wrapper
//! over library calls and returns its CSV together with JSON metadata, so the binary's
//! output can be reproduced in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    average_flow, bench_csv, flops_estimate, flops_rows, flow_rows, information_flow, metrics_csv,
    redundancy_profile, redundancy_rows, wall_clock_bench, BenchSpec, MetricRow, Tap,
};
use crate::error::{Error, Result};
use crate::harness::{
    eval_prompt_label, gen_keytoken_task_with, keytask_deviation, keytoken_model, load_corpus,
    load_items, perplexity_with_context, sample_documents, EvalSpec, KeyTaskParams, LabelEvalSpec,
    PplReport, PromptLabelItem,
};
use crate::model::{forward_pruned, Model, ModelConfig, PruneConfig, PruneRequest};
use crate::pruning::{linear_schedule, Aggregator, Criterion};

pub const DEFAULT_RATIOS: [f64; 7] = [0.9, 0.8, 0.7, 0.6, 0.5, 0.3, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Ppl,
    Prompt,
    Keytask,
}

/// Effective settings of a run: defaults, then the `--config` file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub criterion: Criterion,
    pub ratio: f64,
    pub aggregator: Aggregator,
    pub exclude_bias: bool,
    pub chunk_size: Option<usize>,
    pub snippet_len: usize,
    pub context_lengths: Vec<usize>,
    pub max_docs: Option<usize>,
    pub task: Task,
    pub criteria: Vec<Criterion>,
    pub ratios: Vec<f64>,
    pub normalize: bool,
    pub tap: Tap,
    /// Sequence length for analyze (default 256), flops (1024) and keytask (64).
    pub seq_len: Option<usize>,
    pub n_keys: usize,
    pub key_span: usize,
    pub weak_fraction: f64,
    pub key_layers: usize,
    pub n_seeds: usize,
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub model_config: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalSpec::default();
        Self {
            model: None,
            corpus: None,
            items: None,
            out: None,
            seed: 0,
            threads: None,
            criterion: Criterion::Influence,
            ratio: 1.0,
            aggregator: Aggregator::Max,
            exclude_bias: true,
            chunk_size: None,
            snippet_len: eval.snippet_len,
            context_lengths: eval.context_lengths,
            max_docs: None,
            task: Task::Ppl,
            criteria: Criterion::ALL.to_vec(),
            ratios: DEFAULT_RATIOS.to_vec(),
            normalize: false,
            tap: Tap::Post,
            seq_len: None,
            n_keys: 3,
            key_span: 2,
            weak_fraction: 0.25,
            key_layers: 6,
            n_seeds: 30,
            lengths: vec![1024, 2048, 4096],
            repetitions: 3,
            warmup: 1,
            model_config: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn prune(&self) -> PruneConfig {
        self.prune_with(self.criterion)
    }

    fn prune_with(&self, criterion: Criterion) -> PruneConfig {
        PruneConfig {
            criterion,
            aggregator: self.aggregator,
            exclude_bias: self.exclude_bias,
            seed: self.seed,
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            snippet_len: self.snippet_len,
            context_lengths: self.context_lengths.clone(),
            ratio: self.ratio,
            prune: self.prune(),
            max_docs: self.max_docs,
            chunk_size: self.chunk_size,
            seed: self.seed,
        }
    }

    pub fn key_params(&self) -> KeyTaskParams {
        KeyTaskParams {
            key_span: self.key_span,
            weak_fraction: self.weak_fraction,
            ..KeyTaskParams::new(self.seq_len.unwrap_or(64), self.n_keys)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| r > 0.0 && r <= 1.0;
        if !ratio_ok(self.ratio) {
            return Err(Error::Config(format!(
                "ratio {} must lie in (0, 1]",
                self.ratio
            )));
        }
        if let Some(r) = self.ratios.iter().find(|&&r| !ratio_ok(r)) {
            return Err(Error::Config(format!("ratio {r} must lie in (0, 1]")));
        }
        if self.chunk_size == Some(0) {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ssm-prune",
    version,
    about = "Token pruning for selective state-space models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Write a randomly initialized checkpoint to --out.
    Init,
    /// Perplexity of fixed snippets under growing contexts.
    Ppl,
    /// Criterion x ratio grid over a task.
    Sweep,
    /// Adjacent-token redundancy and information flow per layer.
    Analyze,
    /// Operation counts of a pruning schedule.
    Flops,
    /// Dense vs pruned prefill latency.
    Bench,
}

/// Flags override fields of the same name in the `--config` file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Text file, `.ids` file or directory of them.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// JSON lines of prompt/label items.
    #[arg(long, global = true)]
    pub items: Option<PathBuf>,
    /// Output path; the metadata sidecar goes next to it with a `.json` extension.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub criterion: Option<Criterion>,
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    #[arg(long, global = true)]
    pub aggregator: Option<Aggregator>,
    #[arg(long, global = true)]
    pub exclude_bias: Option<bool>,
    #[arg(long, global = true)]
    pub chunk_size: Option<usize>,
    #[arg(long, global = true)]
    pub snippet_len: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub context_lengths: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub max_docs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub task: Option<Task>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub criteria: Option<Vec<Criterion>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub normalize: Option<bool>,
    #[arg(long, global = true)]
    pub tap: Option<Tap>,
    #[arg(long, global = true)]
    pub seq_len: Option<usize>,
    #[arg(long, global = true)]
    pub n_keys: Option<usize>,
    #[arg(long, global = true)]
    pub key_span: Option<usize>,
    #[arg(long, global = true)]
    pub weak_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub key_layers: Option<usize>,
    #[arg(long, global = true)]
    pub n_seeds: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub n_layers: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub expand: Option<usize>,
    #[arg(long, global = true)]
    pub d_state: Option<usize>,
    #[arg(long, global = true)]
    pub d_conv: Option<usize>,
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    #[arg(long, global = true)]
    pub dt_rank: Option<usize>,
}

impl Flags {
    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*};
        }
        macro_rules! set_opt {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { cfg.$f = Some(v.clone()); })*};
        }
        macro_rules! set_model {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.model_config.$f = v; })*};
        }
        set!(
            seed,
            criterion,
            ratio,
            aggregator,
            exclude_bias,
            snippet_len,
            context_lengths
        );
        set!(
            task,
            criteria,
            ratios,
            normalize,
            tap,
            n_keys,
            key_span,
            weak_fraction
        );
        set!(key_layers, n_seeds, lengths, repetitions, warmup);
        set_opt!(model, corpus, items, out, threads, chunk_size, max_docs, seq_len);
        set_model!(n_layers, d_model, expand, d_state, d_conv, vocab_size, dt_rank);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// CSV text and JSON metadata of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub csv: String,
    pub meta: Value,
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    Model::load(require(&cfg.model, "model")?)
}

fn model_or_init(cfg: &RunConfig) -> Result<Model> {
    match &cfg.model {
        Some(path) => Model::load(path),
        None => Model::init(cfg.model_config.clone(), cfg.seed),
    }
}

pub fn ppl_csv(report: &PplReport) -> String {
    let mut out = String::from("context_len,n_docs,perplexity\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{}", r.context_len, r.n_docs, r.perplexity);
    }
    out
}

/// Pruned over dense operation count of a prefill of `seq_len` tokens whose first
/// `prefix` tokens follow a linear schedule (or chunked linear schedules) and whose
/// remaining tokens are always kept.
pub fn relative_flops(
    config: &ModelConfig,
    prefix: usize,
    seq_len: usize,
    ratio: f64,
    chunk: Option<usize>,
) -> Result<f64> {
    let l = config.n_layers;
    let dense = flops_estimate(config, &vec![seq_len; l], seq_len)?.total;
    let pruned = match chunk {
        None => {
            let keep = linear_schedule(prefix, l, ratio, 1)?
                .with_fixed_suffix(seq_len - prefix)
                .keep;
            flops_estimate(config, &keep, seq_len)?.total
        }
        Some(c) => {
            let mut total = 0;
            for start in (0..seq_len).step_by(c) {
                let end = (start + c).min(seq_len);
                let fixed = (start.max(prefix - 1)..end).count().max(1);
                let keep = linear_schedule(end - start, l, ratio, fixed)?.keep;
                total += flops_estimate(config, &keep, end - start)?.total;
            }
            total
        }
    };
    Ok(pruned as f64 / dense as f64)
}

pub fn cmd_init(cfg: &RunConfig) -> Result<Output> {
    let out = require(&cfg.out, "out")?;
    let model = Model::init(cfg.model_config.clone(), cfg.seed)?;
    model.save(out)?;
    Ok(Output {
        csv: String::new(),
        meta: json!({ "checkpoint": out, "model_config": model.config }),
    })
}

pub fn cmd_ppl(cfg: &RunConfig) -> Result<Output> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let report = perplexity_with_context(&model, &corpus, &cfg.eval_spec())?;
    Ok(Output {
        csv: ppl_csv(&report),
        meta: json!({ "report": report, "model_config": model.config }),
    })
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Output> {
    let mut csv = String::new();
    let mut cells = Vec::new();
    let model_config;
    match cfg.task {
        Task::Ppl => {
            let model = load_model(cfg)?;
            let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
            model_config = model.config.clone();
            csv.push_str("criterion,keep_ratio,relative_flops,context_len,n_docs,perplexity\n");
            for &criterion in &cfg.criteria {
                for &ratio in &cfg.ratios {
                    let spec = EvalSpec {
                        ratio,
                        prune: cfg.prune_with(criterion),
                        ..cfg.eval_spec()
                    };
                    let report = perplexity_with_context(&model, &corpus, &spec)?;
                    for r in &report.rows {
                        let len = r.context_len + cfg.snippet_len - 1;
                        let f = relative_flops(
                            &model.config,
                            r.context_len,
                            len,
                            ratio,
                            cfg.chunk_size,
                        )?;
                        let _ = writeln!(
                            csv,
                            "{criterion},{ratio},{f},{},{},{}",
                            r.context_len, r.n_docs, r.perplexity
                        );
                    }
                    cells.push(json!({ "criterion": criterion, "ratio": ratio, "report": report }));
                }
            }
        }
        Task::Prompt => {
            let model = load_model(cfg)?;
            let items = load_items(require(&cfg.items, "items")?)?;
            model_config = model.config.clone();
            csv.push_str("criterion,keep_ratio,relative_flops,accuracy\n");
            for &criterion in &cfg.criteria {
                for &ratio in &cfg.ratios {
                    let spec = LabelEvalSpec {
                        ratio,
                        prune: cfg.prune_with(criterion),
                        normalize: cfg.normalize,
                    };
                    let report = eval_prompt_label(&model, &items, &spec)?;
                    let f = prompt_flops(&model.config, &items, ratio)?;
                    let _ = writeln!(csv, "{criterion},{ratio},{f},{}", report.accuracy);
                    cells.push(json!({
                        "criterion": criterion,
                        "ratio": ratio,
                        "correct": report.correct,
                        "n_items": items.len(),
                    }));
                }
            }
        }
        Task::Keytask => {
            let params = cfg.key_params();
            let model = keytoken_model(cfg.key_layers, params.n_groups)?;
            model_config = model.config.clone();
            let tasks = (0..cfg.n_seeds as u64)
                .map(|s| gen_keytoken_task_with(cfg.seed + s, &params))
                .collect::<Result<Vec<_>>>()?;
            if tasks.is_empty() {
                return Err(Error::Config("n_seeds must be >= 1".into()));
            }
            csv.push_str("criterion,keep_ratio,relative_flops,median_deviation\n");
            let t = params.seq_len;
            for &criterion in &cfg.criteria {
                for &ratio in &cfg.ratios {
                    let devs = tasks
                        .iter()
                        .enumerate()
                        .map(|(i, task)| {
                            keytask_deviation(
                                &model,
                                &task.ids,
                                criterion,
                                ratio,
                                cfg.seed + i as u64,
                            )
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    let med = median(devs);
                    let f = relative_flops(&model.config, t, t, ratio, None)?;
                    let _ = writeln!(csv, "{criterion},{ratio},{f},{med}");
                    cells.push(json!({ "criterion": criterion, "ratio": ratio, "median": med }));
                }
            }
        }
    }
    Ok(Output {
        csv,
        meta: json!({ "cells": cells, "model_config": model_config }),
    })
}

/// Median of a non-empty sample; the mean of the two middle values for even sizes.
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn prompt_flops(config: &ModelConfig, items: &[PromptLabelItem], ratio: f64) -> Result<f64> {
    let (mut pruned, mut dense) = (0.0, 0.0);
    for it in items {
        for label in &it.candidates {
            let len = it.prompt.len() + label.len() - 1;
            let d = flops_estimate(config, &vec![len; config.n_layers], len)?.total as f64;
            pruned += d * relative_flops(config, it.prompt.len(), len, ratio, None)?;
            dense += d;
        }
    }
    Ok(pruned / dense)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<Output> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let len = cfg.seq_len.unwrap_or(256);
    let docs: Vec<Vec<u32>> = sample_documents(&corpus, None, cfg.seed)
        .into_iter()
        .filter(|d| d.ids.len() >= len)
        .take(cfg.max_docs.unwrap_or(usize::MAX))
        .map(|d| d.ids[..len].to_vec())
        .collect();
    if docs.is_empty() {
        return Err(Error::NoInput(format!("no document has {len} tokens")));
    }
    let redundancy = redundancy_profile(&model, &docs, cfg.tap)?;
    let schedule = linear_schedule(len, model.config.n_layers, cfg.ratio, 1)?;
    let prune = cfg.prune();
    let profiles = docs
        .iter()
        .map(|ids| {
            let rec = forward_pruned(
                &model,
                ids,
                &PruneRequest {
                    schedule: &schedule,
                    config: &prune,
                    protected: &[],
                    target: None,
                    record: true,
                },
            )?;
            information_flow(&rec, cfg.aggregator)
        })
        .collect::<Result<Vec<_>>>()?;
    let flow = average_flow(&profiles)?;
    let mut rows = redundancy_rows(&redundancy);
    rows.extend(flow_rows(&flow));
    Ok(Output {
        csv: metrics_csv(&rows),
        meta: json!({
            "n_docs": docs.len(),
            "seq_len": len,
            "bin_bounds": flow.bin_bounds,
            "model_config": model.config,
        }),
    })
}

pub fn cmd_flops(cfg: &RunConfig) -> Result<Output> {
    let config = match &cfg.model {
        Some(path) => Model::load(path)?.config,
        None => {
            let mut c = cfg.model_config.clone();
            c.validate()?;
            c.dt_rank = c.dt_rank();
            c
        }
    };
    let len = cfg.seq_len.unwrap_or(1024);
    let schedule = linear_schedule(len, config.n_layers, cfg.ratio, 1)?;
    let report = flops_estimate(&config, &schedule.keep, len)?;
    let dense = flops_estimate(&config, &vec![len; config.n_layers], len)?;
    let mut rows = flops_rows(&report);
    rows.push(MetricRow::new(
        "all",
        "relative",
        report.total as f64 / dense.total as f64,
    ));
    Ok(Output {
        csv: metrics_csv(&rows),
        meta: json!({ "keep": schedule.keep, "seq_len": len, "model_config": config }),
    })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Output> {
    let model = model_or_init(cfg)?;
    let rows = wall_clock_bench(
        &model,
        &BenchSpec {
            lengths: cfg.lengths.clone(),
            ratio: cfg.ratio,
            prune: cfg.prune(),
            repetitions: cfg.repetitions,
            warmup: cfg.warmup,
            seed: cfg.seed,
        },
    )?;
    Ok(Output {
        csv: bench_csv(&rows),
        meta: json!({ "rows": rows, "model_config": model.config }),
    })
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<Output> {
    match command {
        Command::Init => cmd_init(cfg),
        Command::Ppl => cmd_ppl(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Analyze => cmd_analyze(cfg),
        Command::Flops => cmd_flops(cfg),
        Command::Bench => cmd_bench(cfg),
    }
}

/// Resolves flags, runs the command and writes the CSV (stdout without
/// `--out`) and the metadata sidecar.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.flags.resolve()?;
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already set up: {e}");
        }
    }
    let output = execute(cli.command, &cfg)?;
    if cli.command == Command::Init {
        return Ok(());
    }
    let sidecar = json!({
        "command": cli.command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "results": output.meta,
    });
    match &cfg.out {
        Some(path) => {
            std::fs::write(path, &output.csv).map_err(|e| Error::file(path, e))?;
            let meta_path = path.with_extension("json");
            let text = serde_json::to_string_pretty(&sidecar)?;
            std::fs::write(&meta_path, text).map_err(|e| Error::file(&meta_path, e))?;
        }
        None => print!("{}", output.csv),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(args: &[&str]) -> RunConfig {
        let mut full = vec!["ssm-prune", "flops"];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap().flags.resolve().unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"ratio": 0.5, "seed": 3, "model_config": {"n_layers": 2}}"#,
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let cfg = flags(&["--config", p]);
        assert_eq!(
            (cfg.ratio, cfg.seed, cfg.model_config.n_layers),
            (0.5, 3, 2)
        );
        let cfg = flags(&["--config", p, "--ratio", "0.7", "--n-layers", "5"]);
        assert_eq!(
            (cfg.ratio, cfg.seed, cfg.model_config.n_layers),
            (0.7, 3, 5)
        );
        let cfg = flags(&["--ratios", "0.5,0.25", "--criteria", "random,uniform"]);
        assert_eq!(cfg.ratios, vec![0.5, 0.25]);
        assert_eq!(cfg.criteria, vec![Criterion::Random, Criterion::Uniform]);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let parse = |args: &[&str]| {
            let mut full = vec!["ssm-prune", "ppl"];
            full.extend_from_slice(args);
            Cli::try_parse_from(full).unwrap().flags.resolve()
        };
        assert!(matches!(parse(&["--ratio", "0"]), Err(Error::Config(_))));
        assert!(matches!(
            parse(&["--chunk-size", "0"]),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"unknown": 1}"#).unwrap();
        let err = parse(&["--config", path.to_str().unwrap()]).unwrap_err();
        assert!(err.is_user_error());
        assert!(Cli::try_parse_from(["ssm-prune", "ppl", "--criterion", "best"]).is_err());
    }

    #[test]
    fn relative_flops_bounds() {
        let c = ModelConfig {
            n_layers: 4,
            ..ModelConfig::default()
        };
        assert_eq!(relative_flops(&c, 100, 100, 1.0, None).unwrap(), 1.0);
        let half = relative_flops(&c, 100, 100, 0.5, None).unwrap();
        assert!(half > 0.5 && half < 1.0);
        let chunked = relative_flops(&c, 100, 120, 0.5, Some(25)).unwrap();
        assert!(chunked < 1.0);
        assert_eq!(relative_flops(&c, 100, 120, 1.0, Some(25)).unwrap(), 1.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
