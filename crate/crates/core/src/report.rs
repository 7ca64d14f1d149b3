//! Run reports and their serialization.
//!
//! Reports are emitted with a hand-rolled writer so that key order is fixed
//! and floats use Rust's shortest round-trip formatting; identical runs must
//! produce byte-identical files. Wall-clock fields are null unless timing
//! was explicitly requested, since they would break that guarantee.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::policy::PolicyConfig;

/// One decode step's bookkeeping.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: u64,
    /// 0-based layer index where the drift trigger fired, if it did.
    pub l_star: Option<usize>,
    /// Fraction of layers whose cache was fully recomputed this step.
    pub rho: f64,
    /// Drift cosine per layer; None for layers that ran the update branch
    /// (or policies that never test drift).
    pub sigma: Vec<Option<f32>>,
    /// Positions committed by this step's prediction.
    pub decoded: Vec<usize>,
    /// Query rows processed by reuse layers this step.
    pub queries: u64,
    /// (token, layer) QKV projection units spent this step.
    pub qkv_projections: u64,
}

/// Aggregates over a run.
#[derive(Debug, Clone, Default)]
pub struct Aggregates {
    pub total_steps: u64,
    pub total_qkv_token_layer_projections: u64,
    /// Cost of the step-0 cache initialization forward; informational,
    /// not part of the total (decode work only).
    pub init_qkv_projections: u64,
    pub mean_rho: f64,
    /// Generated positions up to and including the first EOS.
    pub effective_tokens: u64,
    pub wall_seconds: Option<f64>,
    pub tokens_per_second: Option<f64>,
    pub agreement_with_oracle: Option<f64>,
}

/// Summary emitted by the theory validation lab.
#[derive(Debug, Clone)]
pub struct DriftSummary {
    pub w_max_estimate: f64,
    pub w_max_inflated: f64,
    pub r_per_layer: Vec<f64>,
    pub lambda_per_layer: Vec<f64>,
    pub layer_drift_mean: Vec<f64>,
    pub attention_gap_mean: Vec<f64>,
    pub tracked_stability_tracked: f64,
    pub tracked_stability_all: f64,
    pub lipschitz: Vec<LipschitzResult>,
    pub kv_drift_scan: BoundScan,
    pub kv_drift_scan_per_layer: BoundScan,
    pub attention_row_scan: BoundScan,
    pub logit_change_scan: BoundScan,
}

/// Result of the standalone softmax Lipschitz check at one dimension.
#[derive(Debug, Clone)]
pub struct LipschitzResult {
    pub dim: usize,
    pub trials: u64,
    pub violations: u64,
    pub worst_ratio: f64,
}

impl LipschitzResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Tally of one inequality scanned over a whole trace.
#[derive(Debug, Clone, Default)]
pub struct BoundScan {
    pub checks: u64,
    pub violations: u64,
    /// Largest observed lhs - rhs (negative while the bound holds).
    pub worst_margin: f64,
}

impl BoundScan {
    pub fn record(&mut self, lhs: f64, rhs: f64) {
        self.checks += 1;
        let margin = lhs - rhs;
        if margin > self.worst_margin || self.checks == 1 {
            self.worst_margin = margin;
        }
        if lhs > rhs {
            self.violations += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Everything a single decode run reports.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub policy: PolicyConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub force_full_refresh: bool,
    pub steps: Vec<StepRecord>,
    pub aggregates: Aggregates,
    pub drift: Option<DriftSummary>,
    pub final_tokens: Vec<u32>,
}

// ── Formatting helpers ──────────────────────────────────────────────────────

fn fmt_f32(x: f32) -> String {
    debug_assert!(x.is_finite());
    format!("{x}")
}

fn fmt_f64(x: f64) -> String {
    debug_assert!(x.is_finite());
    format!("{x}")
}

fn fmt_opt_f64(x: Option<f64>) -> String {
    match x {
        Some(v) => fmt_f64(v),
        None => "null".to_string(),
    }
}

fn json_usize_list(xs: &[usize]) -> String {
    let items: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(","))
}

fn json_f64_list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", items.join(","))
}

// ── JSON emission ───────────────────────────────────────────────────────────

impl RunReport {
    /// Fixed-key-order JSON document.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        let _ = write!(
            s,
            "  \"run\": {{\"policy\": \"{}\", \"seed\": {}, \"prompt_len\": {}, \"gen_len\": {}, \
             \"gamma\": {}, \"beta\": {}, \"eps\": {}, \"top_k\": {}, \"interval\": {}, \
             \"block_size\": {}, \"force_full_refresh\": {}}},\n",
            self.policy.kind.label(),
            self.seed,
            self.prompt_len,
            self.gen_len,
            fmt_f32(self.policy.gamma),
            self.policy.beta,
            fmt_f32(self.policy.eps),
            self.policy.top_k,
            self.policy.interval,
            self.policy.block_size,
            self.force_full_refresh,
        );
        let m = &self.model;
        let _ = write!(
            s,
            "  \"model\": {{\"layers\": {}, \"heads\": {}, \"d_model\": {}, \"d_k\": {}, \
             \"d_ff\": {}, \"vocab_size\": {}, \"max_positions\": {}, \"mask_token_id\": {}, \
             \"eos_token_id\": {}}},\n",
            m.num_layers,
            m.num_heads,
            m.d_model,
            m.d_k,
            m.d_ff,
            m.vocab_size,
            m.max_positions,
            m.mask_token_id,
            m.eos_token_id,
        );
        s.push_str("  \"steps\": [\n");
        for (i, st) in self.steps.iter().enumerate() {
            let l_star = match st.l_star {
                Some(l) => l.to_string(),
                None => "null".to_string(),
            };
            let sigma: Vec<String> = st
                .sigma
                .iter()
                .map(|o| match o {
                    Some(v) => fmt_f32(*v),
                    None => "null".to_string(),
                })
                .collect();
            let _ = write!(
                s,
                "    {{\"t\": {}, \"l_star\": {}, \"rho\": {}, \"sigma\": [{}], \
                 \"decoded\": {}, \"queries\": {}, \"qkv_projections\": {}}}{}\n",
                st.t,
                l_star,
                fmt_f64(st.rho),
                sigma.join(","),
                json_usize_list(&st.decoded),
                st.queries,
                st.qkv_projections,
                if i + 1 < self.steps.len() { "," } else { "" },
            );
        }
        s.push_str("  ],\n");
        let a = &self.aggregates;
        let _ = write!(
            s,
            "  \"aggregates\": {{\"total_steps\": {}, \"total_qkv_token_layer_projections\": {}, \
             \"init_qkv_projections\": {}, \"mean_rho\": {}, \"effective_tokens\": {}, \
             \"wall_seconds\": {}, \"tokens_per_second\": {}, \"agreement_with_oracle\": {}}},\n",
            a.total_steps,
            a.total_qkv_token_layer_projections,
            a.init_qkv_projections,
            fmt_f64(a.mean_rho),
            a.effective_tokens,
            fmt_opt_f64(a.wall_seconds),
            fmt_opt_f64(a.tokens_per_second),
            fmt_opt_f64(a.agreement_with_oracle),
        );
        if let Some(d) = &self.drift {
            let lipschitz: Vec<String> = d
                .lipschitz
                .iter()
                .map(|l| {
                    format!(
                        "{{\"dim\": {}, \"trials\": {}, \"violations\": {}, \"worst_ratio\": {}}}",
                        l.dim,
                        l.trials,
                        l.violations,
                        fmt_f64(l.worst_ratio)
                    )
                })
                .collect();
            let scan = |b: &BoundScan| {
                format!(
                    "{{\"checks\": {}, \"violations\": {}, \"worst_margin\": {}}}",
                    b.checks,
                    b.violations,
                    fmt_f64(b.worst_margin)
                )
            };
            let _ = write!(
                s,
                "  \"drift\": {{\"w_max_estimate\": {}, \"w_max_inflated\": {}, \
                 \"r_per_layer\": {}, \"lambda_per_layer\": {}, \"layer_drift_mean\": {}, \
                 \"attention_gap_mean\": {}, \"tracked_stability_tracked\": {}, \
                 \"tracked_stability_all\": {}, \"lipschitz\": [{}], \"kv_drift_scan\": {}, \
                 \"kv_drift_scan_per_layer\": {}, \"attention_row_scan\": {}, \
                 \"logit_change_scan\": {}}},\n",
                fmt_f64(d.w_max_estimate),
                fmt_f64(d.w_max_inflated),
                json_f64_list(&d.r_per_layer),
                json_f64_list(&d.lambda_per_layer),
                json_f64_list(&d.layer_drift_mean),
                json_f64_list(&d.attention_gap_mean),
                fmt_f64(d.tracked_stability_tracked),
                fmt_f64(d.tracked_stability_all),
                lipschitz.join(","),
                scan(&d.kv_drift_scan),
                scan(&d.kv_drift_scan_per_layer),
                scan(&d.attention_row_scan),
                scan(&d.logit_change_scan),
            );
        }
        let tokens: Vec<String> = self.final_tokens.iter().map(|t| t.to_string()).collect();
        let _ = write!(s, "  \"final_tokens\": [{}]\n", tokens.join(","));
        s.push_str("}\n");
        s
    }

    /// CSV: header, one row per step, and a `total` footer row carrying
    /// mean rho (rho column), effective tokens (decoded_count column) and
    /// the total projection count (qkv column).
    pub fn to_csv(&self) -> String {
        let num_layers = self.model.num_layers;
        let mut s = String::new();
        s.push_str("t,l_star,rho,decoded_count,queries,qkv_projections");
        for l in 0..num_layers {
            let _ = write!(s, ",sigma_{l}");
        }
        s.push('\n');
        for st in &self.steps {
            let l_star = st.l_star.map(|l| l.to_string()).unwrap_or_default();
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                st.t,
                l_star,
                fmt_f64(st.rho),
                st.decoded.len(),
                st.queries,
                st.qkv_projections
            );
            for l in 0..num_layers {
                s.push(',');
                if let Some(Some(v)) = st.sigma.get(l) {
                    s.push_str(&fmt_f32(*v));
                }
            }
            s.push('\n');
        }
        let a = &self.aggregates;
        let _ = write!(
            s,
            "total,,{},{},,{}",
            fmt_f64(a.mean_rho),
            a.effective_tokens,
            a.total_qkv_token_layer_projections
        );
        for _ in 0..num_layers {
            s.push(',');
        }
        s.push('\n');
        s
    }

    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let body = match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        };
        std::fs::write(path, body)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(crate::EdlmError::config(format!(
                "unknown report format '{other}' (expected json or csv)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyConfig, PolicyKind};

    fn sample_report() -> RunReport {
        let model = ModelConfig::new(2, 2, 8, 16, 32, 16).unwrap();
        RunReport {
            policy: PolicyConfig::new(PolicyKind::Elastic),
            model,
            seed: 7,
            prompt_len: 4,
            gen_len: 3,
            force_full_refresh: false,
            steps: vec![
                StepRecord {
                    t: 1,
                    l_star: None,
                    rho: 0.0,
                    sigma: vec![Some(1.0), Some(0.95)],
                    decoded: vec![4],
                    queries: 5,
                    qkv_projections: 10,
                },
                StepRecord {
                    t: 2,
                    l_star: Some(0),
                    rho: 0.5,
                    sigma: vec![Some(0.4), None],
                    decoded: vec![5, 6],
                    queries: 6,
                    qkv_projections: 13,
                },
            ],
            aggregates: Aggregates {
                total_steps: 2,
                total_qkv_token_layer_projections: 23,
                init_qkv_projections: 14,
                mean_rho: 0.25,
                effective_tokens: 3,
                wall_seconds: None,
                tokens_per_second: None,
                agreement_with_oracle: Some(1.0),
            },
            drift: None,
            final_tokens: vec![1, 2, 3, 4, 9, 9, 9],
        }
    }

    #[test]
    fn json_is_deterministic_and_parses() {
        let r = sample_report();
        let a = r.to_json();
        let b = r.to_json();
        assert_eq!(a, b);
        let value: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(value["aggregates"]["total_steps"], 2);
        assert_eq!(value["steps"][1]["l_star"], 0);
        assert!(value["aggregates"]["wall_seconds"].is_null());
    }

    #[test]
    fn csv_row_count_matches_total_steps() {
        let r = sample_report();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        // header + steps + footer
        assert_eq!(lines.len(), 1 + r.aggregates.total_steps as usize + 1);
        assert!(lines[0].starts_with("t,l_star,rho"));
        assert!(lines.last().unwrap().starts_with("total,"));
    }

    #[test]
    fn bound_scan_tracks_worst_margin() {
        let mut scan = BoundScan::default();
        scan.record(0.5, 1.0);
        scan.record(0.9, 1.0);
        assert!(scan.passed());
        assert!((scan.worst_margin - (-0.1)).abs() < 1e-12);
        scan.record(1.2, 1.0);
        assert!(!scan.passed());
        assert_eq!(scan.violations, 1);
    }
}
