//! Multi-policy comparison harness.
//!
//! Runs each requested policy on identical inputs, scores agreement against
//! a recompute-everything oracle, and reports work in (token, layer) QKV
//! projection units. Projection counts are exact and machine-independent;
//! wall-clock is measured but never asserted on.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::{run_decode, RunOutcome, RunParams};
use crate::error::Result;
use crate::model::{ModelConfig, Weights};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::report::ReportFormat;

/// One policy's comparison results.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub total_steps: u64,
    pub total_qkv: u64,
    pub mean_rho: f64,
    pub effective_tokens: u64,
    /// Fraction of generated positions matching the oracle's final tokens.
    pub agreement: f64,
    /// Oracle work divided by this policy's work.
    pub work_reduction: f64,
    pub wall_seconds: Option<f64>,
}

/// Inputs shared by every run of one comparison.
#[derive(Debug, Clone)]
pub struct CompareParams {
    pub prompt: Vec<u32>,
    pub gen_len: usize,
    pub seed: u64,
    pub timing: bool,
    /// Upper bound on concurrent policy runs.
    pub max_threads: usize,
}

/// Replays QKV work from step records alone: reuse layers contribute the
/// query-set size, fully recomputed layers contribute all positions. Serves
/// as the independent cross-check of the decoder's runtime counters.
///
/// The block policy appends its end-of-block refresh to a complete reuse
/// pass, so its refreshed layers add to the step rather than replacing
/// reuse layers.
pub fn count_qkv_work(
    kind: PolicyKind,
    steps: &[crate::report::StepRecord],
    num_layers: usize,
    n_total: usize,
) -> u64 {
    let layers = num_layers as u64;
    steps
        .iter()
        .map(|s| {
            let refreshed = (s.rho * num_layers as f64).round() as u64;
            match kind {
                PolicyKind::BlockWise => layers * s.queries + refreshed * n_total as u64,
                _ => (layers - refreshed) * s.queries + refreshed * n_total as u64,
            }
        })
        .sum()
}

fn agreement(oracle: &[u32], candidate: &[u32], prompt_len: usize) -> f64 {
    let gen_oracle = &oracle[prompt_len..];
    let gen_candidate = &candidate[prompt_len..];
    if gen_oracle.is_empty() {
        return 1.0;
    }
    let matches = gen_oracle
        .iter()
        .zip(gen_candidate.iter())
        .filter(|(a, b)| a == b)
        .count();
    matches as f64 / gen_oracle.len() as f64
}

/// Runs every policy on identical inputs and scores them against the
/// no_cache oracle. Row order matches the input order.
pub fn compare_policies(
    cfg: &ModelConfig,
    weights: &Weights,
    policies: &[PolicyConfig],
    params: &CompareParams,
) -> Result<Vec<CompareRow>> {
    let oracle_params = RunParams {
        prompt: params.prompt.clone(),
        gen_len: params.gen_len,
        seed: params.seed,
        policy: PolicyConfig::new(PolicyKind::NoCache),
        force_full_refresh: false,
        check_layer1: false,
        timing: params.timing,
    };
    let oracle = run_decode(cfg, weights, &oracle_params)?;
    let oracle_work = oracle
        .report
        .aggregates
        .total_qkv_token_layer_projections
        .max(1);

    let mut outcomes: Vec<Option<Result<RunOutcome>>> = Vec::new();
    outcomes.resize_with(policies.len(), || None);
    let chunk = params.max_threads.max(1);
    for batch in (0..policies.len()).collect::<Vec<_>>().chunks(chunk) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &idx in batch {
                let policy = policies[idx].clone();
                let run = RunParams {
                    prompt: params.prompt.clone(),
                    gen_len: params.gen_len,
                    seed: params.seed,
                    policy,
                    force_full_refresh: false,
                    check_layer1: false,
                    timing: params.timing,
                };
                handles.push((idx, scope.spawn(move || run_decode(cfg, weights, &run))));
            }
            for (idx, handle) in handles {
                outcomes[idx] = Some(handle.join().expect("policy run panicked"));
            }
        });
    }

    let mut rows = Vec::with_capacity(policies.len());
    for outcome in outcomes {
        let out = outcome.expect("all runs scheduled")?;
        let agg = &out.report.aggregates;
        rows.push(CompareRow {
            label: out.report.policy.kind.label().to_string(),
            total_steps: agg.total_steps,
            total_qkv: agg.total_qkv_token_layer_projections,
            mean_rho: agg.mean_rho,
            effective_tokens: agg.effective_tokens,
            agreement: agreement(&oracle.final_tokens, &out.final_tokens, out.report.prompt_len),
            work_reduction: oracle_work as f64
                / agg.total_qkv_token_layer_projections.max(1) as f64,
            wall_seconds: agg.wall_seconds,
        });
    }
    Ok(rows)
}

fn fmt_f64(x: f64) -> String {
    debug_assert!(x.is_finite());
    format!("{x}")
}

/// Fixed-column-order JSON document for a comparison.
pub fn comparison_to_json(rows: &[CompareRow]) -> String {
    let mut s = String::from("{\n  \"rows\": [\n");
    for (i, r) in rows.iter().enumerate() {
        let wall = match r.wall_seconds {
            Some(w) => fmt_f64(w),
            None => "null".into(),
        };
        let _ = write!(
            s,
            "    {{\"policy\": \"{}\", \"total_steps\": {}, \"total_qkv\": {}, \
             \"mean_rho\": {}, \"effective_tokens\": {}, \"agreement\": {}, \
             \"work_reduction\": {}, \"wall_seconds\": {}}}{}\n",
            r.label,
            r.total_steps,
            r.total_qkv,
            fmt_f64(r.mean_rho),
            r.effective_tokens,
            fmt_f64(r.agreement),
            fmt_f64(r.work_reduction),
            wall,
            if i + 1 < rows.len() { "," } else { "" }
        );
    }
    s.push_str("  ]\n}\n");
    s
}

pub fn comparison_to_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from(
        "policy,total_steps,total_qkv,mean_rho,effective_tokens,agreement,work_reduction,wall_seconds\n",
    );
    for r in rows {
        let wall = r.wall_seconds.map(|w| fmt_f64(w)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.total_steps,
            r.total_qkv,
            fmt_f64(r.mean_rho),
            r.effective_tokens,
            fmt_f64(r.agreement),
            fmt_f64(r.work_reduction),
            wall
        );
    }
    s
}

/// Human-readable table with a stable column order.
pub fn comparison_table(rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>6} {:>12} {:>9} {:>10} {:>10} {:>10}",
        "policy", "steps", "qkv_work", "mean_rho", "eff_toks", "agreement", "reduction"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>12} {:>9.4} {:>10} {:>10.4} {:>9.2}x",
            r.label,
            r.total_steps,
            r.total_qkv,
            r.mean_rho,
            r.effective_tokens,
            r.agreement,
            r.work_reduction
        );
    }
    s
}

pub fn emit_comparison(rows: &[CompareRow], path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => comparison_to_json(rows),
        ReportFormat::Csv => comparison_to_csv(rows),
    };
    std::fs::write(path, body)?;
    Ok(())
}
