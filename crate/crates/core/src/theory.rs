//! Numeric validation of the inequalities behind the adaptive policy, plus
//! drift measurements.
//!
//! Three families of checks run over a recompute-everything trace:
//!
//! - per-position KV drift is bounded by the hidden-state drift times twice
//!   the largest projection spectral norm;
//! - consecutive-step attention rows move no further than their logit rows
//!   (softmax is 1-Lipschitz in l2);
//! - per-pair logit changes are bounded by projection norms, the hidden
//!   representation radius, and the two positions' hidden drifts.
//!
//! "Hidden state" throughout means the post-layer-norm rows the Q/K/V
//! projections actually consume; the projection is linear in exactly that
//! representation, which is what makes the bounds unconditional. The bound
//! checks recompute projections and logits in f64 from the stored f32
//! states so the scans validate exact arithmetic over the real trajectory
//! rather than accumulated f32 rounding; the softmax Lipschitz check uses
//! the stored f32 logits directly, since the lemma applies to whatever the
//! softmax consumed. Drift curves and stability measurements use the stored
//! f32 cache rows, i.e. the values a cached policy would actually reuse.
//!
//! Layer-depth drift monotonicity and most-attended-token minimal drift
//! depend on trained-model structure that random toy weights do not
//! guarantee; those quantities are measured and reported, never asserted.

use crate::decoder::{
    run_decode_observed, DecodeObserver, LayerObservation, RunOutcome, RunParams, StepContext,
};
use crate::error::Result;
use crate::kernel::{softmax_in_place, spectral_norm_estimate, Matrix};
use crate::model::{head_average, ModelConfig, Weights};
use crate::policy::{most_attended, PolicyConfig, PolicyKind};
use crate::report::{BoundScan, DriftSummary, LipschitzResult};
use crate::rng::Rng;

/// Estimator slack: power iteration approaches the true spectral norm from
/// below, so estimates are inflated by this factor before use in bounds.
pub const W_MAX_INFLATION: f64 = 1.01;
/// Power-iteration budget for the norm probes.
pub const PROBE_ITERS: usize = 50;
/// Max slope of the tanh-approximation GELU, used in the report-only
/// amplification factors.
const GELU_LIPSCHITZ: f64 = 1.084;

// ── Softmax Lipschitz (standalone) ──────────────────────────────────────────

/// Random-pair check that softmax moves no further than its input in l2.
///
/// Inputs and perturbations cycle through several magnitudes; norms are
/// accumulated in f64 over the f32 kernel outputs.
pub fn check_softmax_lipschitz(trials: u64, dim: usize, seed: u64) -> LipschitzResult {
    assert!(trials >= 1 && dim >= 1);
    let mut rng = Rng::with_stream(seed, 0xC0FFEE);
    let scales = [0.5f32, 2.0, 8.0];
    let deltas = [0.01f32, 0.3, 3.0];
    let mut violations = 0u64;
    let mut worst_ratio = 0.0f64;
    for trial in 0..trials {
        let scale = scales[(trial % 3) as usize];
        let delta = deltas[((trial / 3) % 3) as usize];
        let z: Vec<f32> = (0..dim).map(|_| rng.uniform_symmetric(scale)).collect();
        let zp: Vec<f32> = z.iter().map(|&x| x + rng.uniform_symmetric(delta)).collect();
        let mut s = z.clone();
        let mut sp = zp.clone();
        softmax_in_place(&mut s);
        softmax_in_place(&mut sp);
        let lhs = diff_norm_f64(&s, &sp);
        let rhs = diff_norm_f64(&z, &zp);
        if lhs > rhs + 1e-6 {
            violations += 1;
        }
        if rhs > 1e-9 {
            let ratio = lhs / rhs;
            if ratio > worst_ratio {
                worst_ratio = ratio;
            }
        }
    }
    LipschitzResult { dim, trials, violations, worst_ratio }
}

fn diff_norm_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let (xf, yf) = (*x as f64, *y as f64);
        dot += xf * yf;
        na += xf * xf;
        nb += yf * yf;
    }
    if na < 1e-24 || nb < 1e-24 {
        return 1.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

// ── Spectral norm probes ────────────────────────────────────────────────────

/// Inflated spectral-norm estimates for the projection matrices.
#[derive(Debug, Clone)]
pub struct NormProbes {
    pub w_max_estimate: f64,
    pub w_max: f64,
    pub wk_per_layer: Vec<f64>,
    pub wv_per_layer: Vec<f64>,
    pub ffn_lipschitz: f64,
}

pub fn probe_norms(weights: &Weights) -> NormProbes {
    let mut w_max_estimate = 0.0f64;
    let mut wk = Vec::new();
    let mut wv = Vec::new();
    let mut ffn = 0.0f64;
    for lw in &weights.layers {
        let q = spectral_norm_estimate(&lw.w_q, PROBE_ITERS) as f64;
        let k = spectral_norm_estimate(&lw.w_k, PROBE_ITERS) as f64;
        let v = spectral_norm_estimate(&lw.w_v, PROBE_ITERS) as f64;
        w_max_estimate = w_max_estimate.max(q).max(k).max(v);
        wk.push(k * W_MAX_INFLATION);
        wv.push(v * W_MAX_INFLATION);
        let w1 = spectral_norm_estimate(&lw.w1, PROBE_ITERS) as f64;
        let w2 = spectral_norm_estimate(&lw.w2, PROBE_ITERS) as f64;
        ffn = ffn.max(GELU_LIPSCHITZ * w1 * w2);
    }
    NormProbes {
        w_max_estimate,
        w_max: w_max_estimate * W_MAX_INFLATION,
        wk_per_layer: wk,
        wv_per_layer: wv,
        ffn_lipschitz: ffn,
    }
}

// ── Trace checking ──────────────────────────────────────────────────────────

/// One layer's retained tensors for a step.
struct LayerSnapshot {
    /// Post-LN projection input, f32 as produced by the forward.
    x: Matrix,
    /// Stored cache rows (f32), used for drift measurements.
    k: Matrix,
    v: Matrix,
    /// f32 logits and attention weights per head, as the softmax saw them.
    z: Vec<Matrix>,
    s: Vec<Matrix>,
    /// f64 reprojections of `x` through W_K/W_V (exact-arithmetic K/V).
    khat: Vec<Vec<f64>>,
    vhat: Vec<Vec<f64>>,
    /// f64 logits recomputed from f64 reprojections, per head.
    zhat: Vec<Vec<f64>>,
}

struct StepSnapshot {
    t: u64,
    layers: Vec<LayerSnapshot>,
    decoded_before: Vec<usize>,
    window: Vec<usize>,
}

/// Observer that accumulates bound scans and drift measurements over a
/// recompute-everything decode run.
pub struct TheoryLab<'a> {
    cfg: &'a ModelConfig,
    weights: &'a Weights,
    probes: NormProbes,
    /// Constant slack of the KV drift tolerance `slack * (1 + ||dH||)`.
    pub kv_slack: f64,
    /// Additive slack of the attention-row bound.
    pub row_slack: f64,
    /// Additive slack of the logit-change bound.
    pub logit_slack: f64,
    pub top_k: usize,

    pending: Vec<LayerSnapshot>,
    prev: Option<StepSnapshot>,

    kv_scan: BoundScan,
    kv_scan_per_layer: BoundScan,
    row_scan: BoundScan,
    logit_scan: BoundScan,
    r_per_layer: Vec<f64>,
    drift_sum: Vec<f64>,
    drift_steps: u64,
    gap_sum: Vec<f64>,
    gap_steps: u64,
    tracked_cos_sum: f64,
    tracked_cos_count: u64,
    all_cos_sum: f64,
    all_cos_count: u64,
}

impl<'a> TheoryLab<'a> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a Weights) -> Self {
        let probes = probe_norms(weights);
        Self {
            cfg,
            weights,
            probes,
            kv_slack: 1e-5,
            row_slack: 1e-5,
            logit_slack: 1e-5,
            top_k: 1,
            pending: Vec::new(),
            prev: None,
            kv_scan: BoundScan::default(),
            kv_scan_per_layer: BoundScan::default(),
            row_scan: BoundScan::default(),
            logit_scan: BoundScan::default(),
            r_per_layer: vec![0.0; cfg.num_layers],
            drift_sum: vec![0.0; cfg.num_layers],
            drift_steps: 0,
            gap_sum: vec![0.0; cfg.num_layers],
            gap_steps: 0,
            tracked_cos_sum: 0.0,
            tracked_cos_count: 0,
            all_cos_sum: 0.0,
            all_cos_count: 0,
        }
    }

    pub fn probes(&self) -> &NormProbes {
        &self.probes
    }

    fn reproject(&self, layer: usize, x: &Matrix) -> LayerProjection {
        let lw = &self.weights.layers[layer];
        let n = x.rows();
        let d = x.cols();
        let mul = |w: &Matrix| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0f64; d]; n];
            for (i, row) in out.iter_mut().enumerate() {
                let xr = x.row(i);
                for (c, &xc) in xr.iter().enumerate() {
                    let wrow = w.row(c);
                    let xc = xc as f64;
                    for (o, &wv) in row.iter_mut().zip(wrow.iter()) {
                        *o += xc * wv as f64;
                    }
                }
            }
            out
        };
        let qhat = mul(&lw.w_q);
        let khat = mul(&lw.w_k);
        let vhat = mul(&lw.w_v);
        // zhat[h][q * n + k] = qhat_q(head h) . khat_k(head h) / sqrt(d_k)
        let dk = self.cfg.d_k;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut zhat = vec![vec![0.0f64; n * n]; self.cfg.num_heads];
        for (h, zh) in zhat.iter_mut().enumerate() {
            let lo = h * dk;
            for qi in 0..n {
                let qrow = &qhat[qi][lo..lo + dk];
                for ki in 0..n {
                    let krow = &khat[ki][lo..lo + dk];
                    let mut acc = 0.0f64;
                    for (a, b) in qrow.iter().zip(krow.iter()) {
                        acc += a * b;
                    }
                    zh[qi * n + ki] = acc * scale;
                }
            }
        }
        LayerProjection { khat, vhat, zhat }
    }

    fn check_pair(&mut self, prev: &StepSnapshot, cur: &StepSnapshot) {
        let n = cur.decoded_before.len();
        let n_total = cur.layers[0].x.rows();
        for (l, (pl, cl)) in prev.layers.iter().zip(cur.layers.iter()).enumerate() {
            // Hidden drift per position and the representation radius.
            let mut dh = vec![0.0f64; n_total];
            for i in 0..n_total {
                dh[i] = diff_norm_f64(cl.x.row(i), pl.x.row(i));
                let r_cur = cl.x.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                let r_prev = pl.x.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                let r = r_cur.max(r_prev);
                if r > self.r_per_layer[l] {
                    self.r_per_layer[l] = r;
                }
            }

            // KV drift bound over decoded positions, f64 reprojections.
            let mut drift_acc = 0.0f64;
            for &i in &cur.decoded_before {
                let dk_hat = norm_diff(&cl.khat[i], &pl.khat[i]);
                let dv_hat = norm_diff(&cl.vhat[i], &pl.vhat[i]);
                let lhs = dk_hat + dv_hat;
                let tol = self.kv_slack * (1.0 + dh[i]);
                self.kv_scan.record(lhs, 2.0 * self.probes.w_max * dh[i] + tol);
                self.kv_scan_per_layer.record(
                    lhs,
                    (self.probes.wk_per_layer[l] + self.probes.wv_per_layer[l]) * dh[i] + tol,
                );
                // Measured drift uses the stored f32 cache rows.
                drift_acc +=
                    diff_norm_f64(cl.k.row(i), pl.k.row(i)) + diff_norm_f64(cl.v.row(i), pl.v.row(i));
            }
            if n > 0 {
                self.drift_sum[l] += drift_acc / n as f64;
            }

            // Attention-row bound on the stored f32 logits/weights.
            for h in 0..self.cfg.num_heads {
                for q in 0..n_total {
                    let ds = diff_norm_f64(cl.s[h].row(q), pl.s[h].row(q));
                    let dz = diff_norm_f64(cl.z[h].row(q), pl.z[h].row(q));
                    self.row_scan.record(ds, dz + self.row_slack);
                }
            }

            // Logit-change bound on the f64 reprojected logits.
            let r_l = self.r_per_layer[l];
            let coeff = self.probes.w_max * self.probes.w_max * r_l
                / (self.cfg.d_k as f64).sqrt();
            for h in 0..self.cfg.num_heads {
                let (zc, zp) = (&cl.zhat[h], &pl.zhat[h]);
                for q in 0..n_total {
                    let base = q * n_total;
                    for k in 0..n_total {
                        let lhs = (zc[base + k] - zp[base + k]).abs();
                        let rhs = coeff * (dh[q] + dh[k]) + self.logit_slack;
                        self.logit_scan.record(lhs, rhs);
                    }
                }
            }

            // Most-attended stability: cosine of consecutive stored K rows.
            let s_avg = head_average(&cl.s);
            let mut s_window = Matrix::zeros(cur.window.len(), n_total);
            for (r, &pos) in cur.window.iter().enumerate() {
                s_window.copy_row_from(r, s_avg.row(pos));
            }
            if !cur.decoded_before.is_empty() {
                let picks = most_attended(&s_window, &cur.decoded_before, self.top_k)
                    .expect("decoded set non-empty");
                for (tok, _) in &picks {
                    self.tracked_cos_sum += cosine_f64(cl.k.row(*tok), pl.k.row(*tok));
                    self.tracked_cos_count += 1;
                }
                for &i in &cur.decoded_before {
                    self.all_cos_sum += cosine_f64(cl.k.row(i), pl.k.row(i));
                    self.all_cos_count += 1;
                }
            }
        }
        self.drift_steps += 1;
    }

    /// Attention mass per decoded token and the gap between the two largest,
    /// from the current step alone.
    fn measure_gap(&mut self, snap: &StepSnapshot) {
        if snap.decoded_before.len() < 2 {
            return;
        }
        for (l, layer) in snap.layers.iter().enumerate() {
            let s_avg = head_average(&layer.s);
            let mut masses: Vec<f64> = snap
                .decoded_before
                .iter()
                .map(|&k| {
                    snap.window
                        .iter()
                        .map(|&q| s_avg.get(q, k) as f64)
                        .sum::<f64>()
                })
                .collect();
            masses.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let gap = masses[0] - masses[1];
            debug_assert!(gap >= 0.0);
            debug_assert!(masses.iter().sum::<f64>() <= snap.window.len() as f64 + 1e-6);
            self.gap_sum[l] += gap;
        }
        self.gap_steps += 1;
    }

    /// Folds the accumulated scans into the report summary.
    pub fn into_summary(self, lipschitz: Vec<LipschitzResult>) -> DriftSummary {
        let drift_mean: Vec<f64> = self
            .drift_sum
            .iter()
            .map(|&s| if self.drift_steps > 0 { s / self.drift_steps as f64 } else { 0.0 })
            .collect();
        let gap_mean: Vec<f64> = self
            .gap_sum
            .iter()
            .map(|&s| if self.gap_steps > 0 { s / self.gap_steps as f64 } else { 0.0 })
            .collect();
        // Report-only amplification factors from the recursion constants.
        let n_total = 0.0f64.max(self.prev.as_ref().map_or(0.0, |p| p.layers[0].x.rows() as f64));
        let lambda: Vec<f64> = self
            .r_per_layer
            .iter()
            .map(|&r| {
                let c_attn = 2.0 * self.probes.w_max * self.probes.w_max * r * r * n_total
                    / (self.cfg.d_k as f64).sqrt();
                (1.0 + self.probes.ffn_lipschitz) * (1.0 + self.probes.w_max * (1.0 + c_attn))
            })
            .collect();
        DriftSummary {
            w_max_estimate: self.probes.w_max_estimate,
            w_max_inflated: self.probes.w_max,
            r_per_layer: self.r_per_layer,
            lambda_per_layer: lambda,
            layer_drift_mean: drift_mean,
            attention_gap_mean: gap_mean,
            tracked_stability_tracked: if self.tracked_cos_count > 0 {
                self.tracked_cos_sum / self.tracked_cos_count as f64
            } else {
                1.0
            },
            tracked_stability_all: if self.all_cos_count > 0 {
                self.all_cos_sum / self.all_cos_count as f64
            } else {
                1.0
            },
            lipschitz,
            kv_drift_scan: self.kv_scan,
            kv_drift_scan_per_layer: self.kv_scan_per_layer,
            attention_row_scan: self.row_scan,
            logit_change_scan: self.logit_scan,
        }
    }
}

struct LayerProjection {
    khat: Vec<Vec<f64>>,
    vhat: Vec<Vec<f64>>,
    zhat: Vec<Vec<f64>>,
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

impl<'a> DecodeObserver for TheoryLab<'a> {
    fn on_layer(&mut self, _t: u64, obs: &LayerObservation) {
        let proj = self.reproject(obs.layer, obs.norm_input);
        self.pending.push(LayerSnapshot {
            x: obs.norm_input.clone(),
            k: obs.k.clone(),
            v: obs.v.clone(),
            z: obs.z.to_vec(),
            s: obs.s.to_vec(),
            khat: proj.khat,
            vhat: proj.vhat,
            zhat: proj.zhat,
        });
    }

    fn on_step_end(&mut self, ctx: &StepContext) {
        let snap = StepSnapshot {
            t: ctx.t,
            layers: std::mem::take(&mut self.pending),
            decoded_before: ctx.decoded_before.to_vec(),
            window: ctx.window.to_vec(),
        };
        self.measure_gap(&snap);
        if let Some(prev) = self.prev.take() {
            debug_assert_eq!(prev.t + 1, snap.t);
            self.check_pair(&prev, &snap);
        }
        self.prev = Some(snap);
    }
}

// ── Driver ──────────────────────────────────────────────────────────────────

/// Configuration of a full validation run.
#[derive(Debug, Clone)]
pub struct TheoryRunConfig {
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub gen_len: usize,
    pub beta: usize,
    pub top_k: usize,
    pub lipschitz_trials: u64,
    pub lipschitz_dims: Vec<usize>,
    pub row_slack: f64,
    pub logit_slack: f64,
    pub kv_slack: f64,
}

/// Runs a recompute-everything decode under the lab observer plus the
/// standalone Lipschitz trials, and attaches the summary to the run report.
pub fn validate_theory(
    cfg: &ModelConfig,
    weights: &Weights,
    run: &TheoryRunConfig,
) -> Result<RunOutcome> {
    let mut policy = PolicyConfig::new(PolicyKind::NoCache);
    policy.beta = run.beta;
    policy.top_k = run.top_k;
    let params = RunParams::new(run.prompt.clone(), run.gen_len, run.seed, policy);
    let mut lab = TheoryLab::new(cfg, weights);
    lab.top_k = run.top_k;
    lab.row_slack = run.row_slack;
    lab.logit_slack = run.logit_slack;
    lab.kv_slack = run.kv_slack;
    let mut outcome = run_decode_observed(cfg, weights, &params, &mut lab)?;
    let lipschitz: Vec<LipschitzResult> = run
        .lipschitz_dims
        .iter()
        .map(|&dim| check_softmax_lipschitz(run.lipschitz_trials, dim, run.seed))
        .collect();
    outcome.report.drift = Some(lab.into_summary(lipschitz));
    Ok(outcome)
}

/// True when every hard (unconditional) check passed.
pub fn hard_checks_pass(summary: &DriftSummary) -> bool {
    summary.lipschitz.iter().all(|l| l.passed())
        && summary.kv_drift_scan.passed()
        && summary.kv_drift_scan_per_layer.passed()
        && summary.attention_row_scan.passed()
        && summary.logit_change_scan.passed()
}
