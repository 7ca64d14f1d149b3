//! `edlm` — decode, benchmark, and validate masked-diffusion cache policies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edlm_core::decoder::{run_decode, run_decode_observed, RunParams};
use edlm_core::harness::{compare_policies, comparison_table, emit_comparison, CompareParams};
use edlm_core::model::{init_weights, read_weights, write_weights, ModelConfig, Weights};
use edlm_core::policy::{PolicyConfig, PolicyKind};
use edlm_core::report::ReportFormat;
use edlm_core::rng::{Rng, STREAM_PROMPT};
use edlm_core::theory::{hard_checks_pass, validate_theory, TheoryRunConfig};
use edlm_core::trace::TraceDumper;
use edlm_core::{EdlmError, Result};

#[derive(Parser)]
#[command(name = "edlm", version, about = "Deterministic masked-diffusion decoding engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Transformer layers.
    #[arg(long, default_value_t = 8)]
    layers: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Hidden width d_model.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Feed-forward width.
    #[arg(long, default_value_t = 256)]
    dff: usize,
    /// Vocabulary size (mask id = vocab-1, eos id = vocab-2).
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Maximum sequence length.
    #[arg(long = "max-pos", default_value_t = 512)]
    max_pos: usize,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.layers, self.heads, self.dim, self.dff, self.vocab, self.max_pos)
    }
}

#[derive(Args, Debug)]
struct PolicyArgs {
    /// Cache policy: no_cache | fixed_interval | block_wise | elastic.
    #[arg(long, default_value = "elastic")]
    policy: String,
    /// Drift trigger threshold in (0, 1].
    #[arg(long, default_value_t = 0.9)]
    gamma: f32,
    /// Sliding window size.
    #[arg(long, default_value_t = 16)]
    beta: usize,
    /// Confidence threshold for parallel unmasking.
    #[arg(long, default_value_t = 0.9)]
    eps: f32,
    /// Tracked tokens per layer.
    #[arg(long = "topk", default_value_t = 1)]
    top_k: usize,
    /// Refresh period for fixed_interval.
    #[arg(long, default_value_t = 8)]
    interval: usize,
    /// Block length for block_wise.
    #[arg(long = "block-size", default_value_t = 32)]
    block_size: usize,
}

impl PolicyArgs {
    fn build(&self, kind: PolicyKind) -> PolicyConfig {
        PolicyConfig {
            kind,
            gamma: self.gamma,
            beta: self.beta,
            eps: self.eps,
            top_k: self.top_k,
            interval: self.interval,
            block_size: self.block_size,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Seed for weights and the synthetic prompt.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic prompt length (ignored with --prompt-file).
    #[arg(long = "prompt-len", default_value_t = 16)]
    prompt_len: usize,
    /// Generation region length.
    #[arg(long = "gen-len", default_value_t = 128)]
    gen_len: usize,
    /// Weight file to load; weights are generated from the seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Whitespace-separated token ids to use as the prompt.
    #[arg(long = "prompt-file")]
    prompt_file: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report format.
    #[arg(long, default_value = "json")]
    format: String,
    /// Dump per-step tensors to this directory (no_cache policy only).
    #[arg(long = "dump-trace")]
    dump_trace: Option<PathBuf>,
    /// Include wall-clock fields in report files (breaks byte determinism).
    #[arg(long, default_value_t = false)]
    timing: bool,
    /// Test hook: force a full cache refresh every step.
    #[arg(long = "force-full-refresh", hide = true, default_value_t = false)]
    force_full_refresh: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic weight file from (seed, config).
    GenWeights {
        #[command(flatten)]
        model: ModelArgs,
        /// Seed for weight initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run one decode and write its report.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run several policies on identical inputs and tabulate them.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated policy list.
        #[arg(long, default_value = "no_cache,fixed_interval,block_wise,elastic")]
        policies: String,
    },
    /// Run the numeric validation suite; nonzero exit on any violation.
    ValidateTheory {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Random pairs per dimension for the softmax check.
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// Sliding window size of the traced run.
        #[arg(long, default_value_t = 16)]
        beta: usize,
        /// Tracked tokens per layer for the stability measurement.
        #[arg(long = "topk", default_value_t = 1)]
        top_k: usize,
    },
}

fn synthetic_prompt(cfg: &ModelConfig, seed: u64, len: usize) -> Vec<u32> {
    // Ids stay below eos/mask so synthetic prompts never contain either.
    let mut rng = Rng::with_stream(seed, STREAM_PROMPT);
    (0..len).map(|_| rng.below(cfg.vocab_size as u64 - 2) as u32).collect()
}

fn load_prompt(cfg: &ModelConfig, run: &RunArgs) -> Result<Vec<u32>> {
    match &run.prompt_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let mut prompt = Vec::new();
            for tok in text.split_whitespace() {
                let id: u32 = tok
                    .parse()
                    .map_err(|_| EdlmError::input(format!("bad prompt token '{tok}'")))?;
                if id as usize >= cfg.vocab_size {
                    return Err(EdlmError::input(format!(
                        "prompt token {id} out of vocabulary ({})",
                        cfg.vocab_size
                    )));
                }
                prompt.push(id);
            }
            if prompt.is_empty() {
                return Err(EdlmError::input("prompt file contains no tokens"));
            }
            Ok(prompt)
        }
        None => {
            if run.prompt_len == 0 {
                return Err(EdlmError::config("prompt-len must be >= 1"));
            }
            Ok(synthetic_prompt(cfg, run.seed, run.prompt_len))
        }
    }
}

fn load_weights(cfg: &ModelConfig, seed: u64, path: &Option<PathBuf>) -> Result<(ModelConfig, Weights)> {
    match path {
        Some(p) => {
            let (file_cfg, w) = read_weights(p)?;
            Ok((file_cfg, w))
        }
        None => Ok((cfg.clone(), init_weights(seed, cfg))),
    }
}

fn cmd_gen_weights(model: &ModelArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = model.build()?;
    let w = init_weights(seed, &cfg);
    write_weights(out, &cfg, &w)?;
    println!("wrote {} (seed {seed})", out.display());
    Ok(())
}

fn cmd_decode(model: &ModelArgs, policy: &PolicyArgs, run: &RunArgs) -> Result<()> {
    let kind = PolicyKind::parse(&policy.policy)?;
    let flag_cfg = model.build()?;
    let (cfg, weights) = load_weights(&flag_cfg, run.seed, &run.weights)?;
    let prompt = load_prompt(&cfg, run)?;
    let params = RunParams {
        prompt,
        gen_len: run.gen_len,
        seed: run.seed,
        policy: policy.build(kind),
        force_full_refresh: run.force_full_refresh,
        check_layer1: false,
        timing: run.timing,
    };

    let outcome = match &run.dump_trace {
        Some(dir) => {
            if kind != PolicyKind::NoCache {
                return Err(EdlmError::config(
                    "--dump-trace requires --policy no_cache (full coverage)",
                ));
            }
            let mut dumper = TraceDumper::create(dir)?;
            let outcome = run_decode_observed(&cfg, &weights, &params, &mut dumper)?;
            dumper.finish()?;
            outcome
        }
        None => run_decode(&cfg, &weights, &params)?,
    };

    let agg = &outcome.report.aggregates;
    println!("policy: {}", outcome.report.policy.kind.label());
    println!("steps: {}", agg.total_steps);
    println!("qkv_projections: {}", agg.total_qkv_token_layer_projections);
    println!("mean_rho: {}", agg.mean_rho);
    println!("effective_tokens: {}", agg.effective_tokens);
    if let Some(w) = agg.wall_seconds {
        println!("wall_seconds: {w}");
        if let Some(tps) = agg.tokens_per_second {
            println!("tokens_per_second: {tps}");
        }
    }
    let tokens: Vec<String> = outcome.final_tokens.iter().map(|t| t.to_string()).collect();
    println!("tokens: {}", tokens.join(" "));

    if let Some(path) = &run.report {
        outcome.report.emit(path, ReportFormat::parse(&run.format)?)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn parse_threads() -> Result<usize> {
    match std::env::var("EDLM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| EdlmError::config(format!("invalid EDLM_THREADS value '{v}'"))),
        Err(_) => Ok(4),
    }
}

fn cmd_compare(
    model: &ModelArgs,
    policy: &PolicyArgs,
    run: &RunArgs,
    policies: &str,
) -> Result<()> {
    let flag_cfg = model.build()?;
    let (cfg, weights) = load_weights(&flag_cfg, run.seed, &run.weights)?;
    let prompt = load_prompt(&cfg, run)?;
    let list: Vec<PolicyConfig> = policies
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|name| PolicyKind::parse(name.trim()).map(|k| policy.build(k)))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(EdlmError::config("no policies requested"));
    }
    let params = CompareParams {
        prompt,
        gen_len: run.gen_len,
        seed: run.seed,
        timing: run.timing,
        max_threads: parse_threads()?,
    };
    let rows = compare_policies(&cfg, &weights, &list, &params)?;
    print!("{}", comparison_table(&rows));
    if let Some(path) = &run.report {
        emit_comparison(&rows, path, ReportFormat::parse(&run.format)?)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn cmd_validate_theory(
    model: &ModelArgs,
    run: &RunArgs,
    trials: u64,
    beta: usize,
    top_k: usize,
) -> Result<bool> {
    let flag_cfg = model.build()?;
    let (cfg, weights) = load_weights(&flag_cfg, run.seed, &run.weights)?;
    let prompt = load_prompt(&cfg, run)?;
    let trc = TheoryRunConfig {
        seed: run.seed,
        prompt,
        gen_len: run.gen_len,
        beta,
        top_k,
        lipschitz_trials: trials,
        lipschitz_dims: vec![8, 64, 512],
        row_slack: 1e-5,
        logit_slack: 1e-5,
        kv_slack: 1e-5,
    };
    let outcome = validate_theory(&cfg, &weights, &trc)?;
    let summary = outcome.report.drift.as_ref().expect("summary attached");
    for l in &summary.lipschitz {
        println!(
            "softmax_lipschitz dim={} trials={} violations={} worst_ratio={} [{}]",
            l.dim,
            l.trials,
            l.violations,
            l.worst_ratio,
            if l.passed() { "PASS" } else { "FAIL" }
        );
    }
    for (name, scan) in [
        ("kv_drift_bound", &summary.kv_drift_scan),
        ("kv_drift_bound_per_layer", &summary.kv_drift_scan_per_layer),
        ("attention_row_bound", &summary.attention_row_scan),
        ("logit_change_bound", &summary.logit_change_scan),
    ] {
        println!(
            "{name} checks={} violations={} worst_margin={} [{}]",
            scan.checks,
            scan.violations,
            scan.worst_margin,
            if scan.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "layer_drift_mean: {}",
        summary
            .layer_drift_mean
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!(
        "tracked_stability: tracked={} all={}",
        summary.tracked_stability_tracked, summary.tracked_stability_all
    );
    if let Some(path) = &run.report {
        outcome.report.emit(path, ReportFormat::Json)?;
        println!("report: {}", path.display());
    }
    Ok(hard_checks_pass(summary))
}

fn dispatch(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenWeights { model, seed, weights } => {
            cmd_gen_weights(model, *seed, weights)?;
            Ok(true)
        }
        Command::Decode { model, policy, run } => {
            cmd_decode(model, policy, run)?;
            Ok(true)
        }
        Command::Compare { model, policy, run, policies } => {
            cmd_compare(model, policy, run, policies)?;
            Ok(true)
        }
        Command::ValidateTheory { model, run, trials, beta, top_k } => {
            cmd_validate_theory(model, run, *trials, *beta, *top_k)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                EdlmError::Config(_) | EdlmError::Input(_) => 2,
                EdlmError::Io(_) => 3,
                EdlmError::Internal(_) => 1,
            };
            ExitCode::from(code)
        }
    }
}
