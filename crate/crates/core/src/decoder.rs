//! The masked-diffusion decode loop.
//!
//! A run starts from `prompt ++ [MASK; gen_len]`, initializes the cache with
//! one full forward, then repeatedly predicts the sliding window of leftmost
//! masked positions, unmasks every window position whose confidence clears
//! the threshold (always at least one), and updates the cache according to
//! the active policy. Greedy token selection keeps runs deterministic.
//!
//! Query-set composition for the cached policies follows the window
//! identity "previous window = current window + just-decoded": each step
//! recomputes projections for the current window, the positions committed
//! by the previous step (their tokens changed), and — for the adaptive
//! policy — the tracked most-attended tokens, whose fresh attention rows
//! feed the drift test.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::cache::{CacheStore, RefreshedLayer};
use crate::error::{EdlmError, Result};
use crate::kernel::Matrix;
use crate::model::{
    embed, embed_rows, head_average, layer_forward_full, layer_forward_windowed, logits,
    project_layer_kv, FullLayerOut, ModelConfig, Weights,
};
use crate::policy::{drift_test, most_attended, AttentionRecord, PolicyConfig, PolicyKind, TrackedRows};
use crate::report::{Aggregates, RunReport, StepRecord};

/// Mutable decode bookkeeping.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub step: u64,
    pub tokens: Vec<u32>,
    decoded: Vec<bool>,
    masked_count: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub window: Vec<usize>,
    pub finished: bool,
}

impl DecodeState {
    fn new(prompt: &[u32], gen_len: usize, mask_id: u32) -> Self {
        let prompt_len = prompt.len();
        let n_total = prompt_len + gen_len;
        let mut tokens = Vec::with_capacity(n_total);
        tokens.extend_from_slice(prompt);
        tokens.extend(std::iter::repeat(mask_id).take(gen_len));
        let mut decoded = vec![false; n_total];
        for d in decoded.iter_mut().take(prompt_len) {
            *d = true;
        }
        Self {
            step: 0,
            tokens,
            decoded,
            masked_count: gen_len,
            prompt_len,
            gen_len,
            window: Vec::new(),
            finished: gen_len == 0,
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| !self.decoded[i]).collect()
    }

    pub fn decoded_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.decoded[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn is_decoded(&self, pos: usize) -> bool {
        self.decoded[pos]
    }

    /// Commits newly predicted tokens. Decoded positions are never
    /// rewritten.
    fn commit(&mut self, picks: &[(usize, u32)]) {
        for &(pos, tok) in picks {
            debug_assert!(!self.decoded[pos], "position {pos} decoded twice");
            self.tokens[pos] = tok;
            self.decoded[pos] = true;
            self.masked_count -= 1;
        }
        if self.masked_count == 0 {
            self.finished = true;
        }
    }
}

/// The min(beta, |masked|) smallest masked positions.
pub fn select_window(masked: &[usize], beta: usize) -> Vec<usize> {
    let take = beta.min(masked.len());
    masked[..take].to_vec()
}

/// Greedy confidence-thresholded unmasking over the window.
///
/// Row `i` of `dist` is the vocabulary distribution for `window[i]`. Every
/// position whose max probability is at least `eps` unmasks; if none
/// qualifies, the single highest-confidence position unmasks (lowest index
/// on ties), so at least one token commits per step.
pub fn confidence_decode(dist: &Matrix, window: &[usize], eps: f32) -> Vec<(usize, u32)> {
    debug_assert_eq!(dist.rows(), window.len());
    let mut picks = Vec::new();
    let mut best_row = 0usize;
    let mut best_conf = f32::NEG_INFINITY;
    let mut choices = Vec::with_capacity(window.len());
    for (r, &pos) in window.iter().enumerate() {
        let row = dist.row(r);
        let tok = crate::kernel::argmax(row).expect("non-empty vocabulary");
        let conf = row[tok];
        choices.push((pos, tok as u32, conf));
        if conf > best_conf {
            best_conf = conf;
            best_row = r;
        }
    }
    for &(pos, tok, conf) in &choices {
        if conf >= eps {
            picks.push((pos, tok));
        }
    }
    if picks.is_empty() {
        let (pos, tok, _) = choices[best_row];
        picks.push((pos, tok));
    }
    picks
}

/// Per-layer tensors surfaced to observers during full-coverage passes.
pub struct LayerObservation<'a> {
    pub layer: usize,
    /// Post-LN rows actually consumed by the Q/K/V projections.
    pub norm_input: &'a Matrix,
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    /// Scaled pre-softmax scores per head.
    pub z: &'a [Matrix],
    /// Post-softmax weights per head.
    pub s: &'a [Matrix],
}

/// Step summary surfaced to observers after each decode step.
pub struct StepContext<'a> {
    pub t: u64,
    pub window: &'a [usize],
    /// Positions decoded before this step's commit (the argmax candidates).
    pub decoded_before: &'a [usize],
    pub commits: &'a [(usize, u32)],
    pub n_total: usize,
}

/// Hook interface for the validation lab and trace dumps. Full per-layer
/// tensors are only observable on full-coverage passes (the no_cache
/// policy), which is what the theory checks require.
pub trait DecodeObserver {
    fn on_layer(&mut self, _t: u64, _obs: &LayerObservation) {}
    fn on_step_end(&mut self, _ctx: &StepContext) {}
}

/// No-op observer.
pub struct NullObserver;

impl DecodeObserver for NullObserver {}

/// Inputs of one decode run.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub prompt: Vec<u32>,
    pub gen_len: usize,
    pub seed: u64,
    pub policy: PolicyConfig,
    /// Test hook: force a full refresh every step (oracle equivalence).
    pub force_full_refresh: bool,
    /// Verify layer-1 cache exactness after every step.
    pub check_layer1: bool,
    /// Include wall-clock fields in the report (breaks byte determinism).
    pub timing: bool,
}

impl RunParams {
    pub fn new(prompt: Vec<u32>, gen_len: usize, seed: u64, policy: PolicyConfig) -> Self {
        Self {
            prompt,
            gen_len,
            seed,
            policy,
            force_full_refresh: false,
            check_layer1: false,
            timing: false,
        }
    }
}

/// A finished run: the decoded sequence plus its report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_tokens: Vec<u32>,
    pub report: RunReport,
}

/// Runs one decode with the null observer.
pub fn run_decode(cfg: &ModelConfig, weights: &Weights, params: &RunParams) -> Result<RunOutcome> {
    run_decode_observed(cfg, weights, params, &mut NullObserver)
}

/// Runs one decode, surfacing per-layer tensors to `observer` on
/// full-coverage passes.
pub fn run_decode_observed(
    cfg: &ModelConfig,
    weights: &Weights,
    params: &RunParams,
    observer: &mut dyn DecodeObserver,
) -> Result<RunOutcome> {
    params.policy.validate()?;
    cfg.validate()?;
    if params.prompt.is_empty() {
        return Err(EdlmError::config("prompt must be non-empty"));
    }
    if params.gen_len == 0 {
        return Err(EdlmError::config("gen_len must be >= 1"));
    }
    if params.prompt.len() + params.gen_len > cfg.max_positions {
        return Err(EdlmError::config(format!(
            "prompt_len {} + gen_len {} exceeds max_positions {}",
            params.prompt.len(),
            params.gen_len,
            cfg.max_positions
        )));
    }
    for &id in &params.prompt {
        if id as usize >= cfg.vocab_size {
            return Err(EdlmError::input(format!(
                "prompt token id {id} out of vocabulary"
            )));
        }
    }
    if params.force_full_refresh && params.policy.kind != PolicyKind::Elastic {
        return Err(EdlmError::config(
            "--force-full-refresh applies to the elastic policy only",
        ));
    }

    let start = Instant::now();
    let mut runner = Runner::new(cfg, weights, params)?;
    runner.init_cache()?;
    while runner.state.masked_count() > 0 {
        runner.state.step += 1;
        if runner.state.step > params.gen_len as u64 {
            return Err(EdlmError::internal(
                "decode exceeded gen_len steps; progress guarantee broken",
            ));
        }
        match params.policy.kind {
            PolicyKind::NoCache => runner.step_no_cache(observer)?,
            PolicyKind::FixedInterval => runner.step_fixed_interval()?,
            PolicyKind::BlockWise => runner.step_block_wise()?,
            PolicyKind::Elastic => runner.step_elastic()?,
        }
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(runner.finish(wall))
}

struct Runner<'a> {
    cfg: &'a ModelConfig,
    weights: &'a Weights,
    params: &'a RunParams,
    state: DecodeState,
    cache: Option<CacheStore>,
    prev_record: AttentionRecord,
    /// Positions committed by the previous step (D^t of the current step).
    last_decoded: Vec<usize>,
    since_refresh: usize,
    steps: Vec<StepRecord>,
    init_qkv: u64,
    n_total: usize,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ModelConfig, weights: &'a Weights, params: &'a RunParams) -> Result<Self> {
        let state = DecodeState::new(&params.prompt, params.gen_len, cfg.mask_token_id);
        let n_total = state.tokens.len();
        Ok(Self {
            cfg,
            weights,
            params,
            state,
            cache: None,
            prev_record: AttentionRecord::empty(cfg.num_layers),
            // Prompt positions count as decoded at step 1.
            last_decoded: (0..params.prompt.len()).collect(),
            since_refresh: 0,
            steps: Vec::new(),
            init_qkv: 0,
            n_total,
        })
    }

    fn full_forward(&self) -> Result<(Matrix, Vec<FullLayerOut>)> {
        let emb = embed(self.cfg, self.weights, &self.state.tokens)?;
        let mut outs = Vec::with_capacity(self.cfg.num_layers);
        let mut h = emb.clone();
        for l in 0..self.cfg.num_layers {
            let out = layer_forward_full(self.cfg, self.weights, l, &h)?;
            h = out.h_out.clone();
            outs.push(out);
        }
        Ok((emb, outs))
    }

    /// Step-0 full forward that populates the cache (skipped by no_cache).
    fn init_cache(&mut self) -> Result<()> {
        if self.params.policy.kind == PolicyKind::NoCache {
            return Ok(());
        }
        let (emb, outs) = self.full_forward()?;
        self.cache = Some(CacheStore::from_full_forward(emb, &outs));
        self.init_qkv = (self.n_total * self.cfg.num_layers) as u64;
        Ok(())
    }

    /// Recomputes every layer over all positions from current embeddings and
    /// replaces the whole cache. Returns the final hidden state.
    fn refresh_all(&mut self, step: u64) -> Result<Matrix> {
        let (emb, outs) = self.full_forward()?;
        let mut items = Vec::with_capacity(outs.len());
        let mut h_in = emb;
        for (l, out) in outs.iter().enumerate() {
            items.push(RefreshedLayer {
                layer: l,
                h_in: h_in.clone(),
                k: out.k.clone(),
                v: out.v.clone(),
            });
            h_in = out.h_out.clone();
        }
        let cache = self.cache.as_mut().expect("cached policy");
        cache.overwrite_from_layer(0, &items, step)?;
        Ok(h_in)
    }

    fn rows_at(&self, source: &Matrix, order: &[usize], wanted: &[usize]) -> Matrix {
        // `order` maps matrix rows to positions; extract `wanted` positions.
        let index: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(r, &p)| (p, r)).collect();
        let mut out = Matrix::zeros(wanted.len(), source.cols());
        for (r, &pos) in wanted.iter().enumerate() {
            let src = index[&pos];
            out.copy_row_from(r, source.row(src));
        }
        out
    }

    fn decode_and_commit(
        &mut self,
        final_window_rows: &Matrix,
        window: &[usize],
    ) -> Result<Vec<(usize, u32)>> {
        let dist = logits(self.cfg, self.weights, final_window_rows)?;
        let picks = confidence_decode(&dist, window, self.params.policy.eps);
        self.state.window = window.to_vec();
        self.state.commit(&picks);
        self.last_decoded = picks.iter().map(|&(p, _)| p).collect();
        Ok(picks)
    }

    fn verify_layer1(&self) -> Result<()> {
        let cache = match &self.cache {
            Some(c) => c,
            None => return Ok(()),
        };
        let emb = embed(self.cfg, self.weights, &self.state.tokens)?;
        let (k, v) = project_layer_kv(self.cfg, self.weights, 0, &emb)?;
        if cache.keys(0).data() != k.data() || cache.values(0).data() != v.data() {
            return Err(EdlmError::internal(format!(
                "layer-1 cache exactness violated at step {}",
                self.state.step
            )));
        }
        Ok(())
    }

    fn push_step(
        &mut self,
        l_star: Option<usize>,
        rho: f64,
        sigma: Vec<Option<f32>>,
        picks: Vec<(usize, u32)>,
        queries: u64,
        qkv: u64,
    ) {
        self.steps.push(StepRecord {
            t: self.state.step,
            l_star,
            rho,
            sigma,
            decoded: picks.into_iter().map(|(p, _)| p).collect(),
            queries,
            qkv_projections: qkv,
        });
    }

    // ── Policy steps ────────────────────────────────────────────────────

    fn step_no_cache(&mut self, observer: &mut dyn DecodeObserver) -> Result<()> {
        let t = self.state.step;
        let masked = self.state.masked_positions();
        let window = select_window(&masked, self.params.policy.beta);
        let decoded_before = self.state.decoded_positions();
        let (_, outs) = self.full_forward()?;
        for (l, out) in outs.iter().enumerate() {
            observer.on_layer(
                t,
                &LayerObservation {
                    layer: l,
                    norm_input: &out.norm_input,
                    q: &out.q,
                    k: &out.k,
                    v: &out.v,
                    z: &out.attn.z,
                    s: &out.attn.s,
                },
            );
        }
        let all: Vec<usize> = (0..self.n_total).collect();
        let final_rows = self.rows_at(&outs.last().unwrap().h_out, &all, &window);
        let picks = self.decode_and_commit(&final_rows, &window)?;
        observer.on_step_end(&StepContext {
            t,
            window: &window,
            decoded_before: &decoded_before,
            commits: &picks,
            n_total: self.n_total,
        });
        let qkv = (self.n_total * self.cfg.num_layers) as u64;
        self.push_step(
            None,
            0.0,
            vec![None; self.cfg.num_layers],
            picks,
            self.n_total as u64,
            qkv,
        );
        Ok(())
    }

    fn step_fixed_interval(&mut self) -> Result<()> {
        let t = self.state.step;
        let masked = self.state.masked_positions();
        let window = select_window(&masked, self.params.policy.beta);
        self.since_refresh += 1;
        let (rho, queries, qkv, final_rows) = if self.since_refresh >= self.params.policy.interval
        {
            self.since_refresh = 0;
            let h_final = self.refresh_all(t)?;
            let all: Vec<usize> = (0..self.n_total).collect();
            let rows = self.rows_at(&h_final, &all, &window);
            (
                1.0,
                self.n_total as u64,
                (self.n_total * self.cfg.num_layers) as u64,
                rows,
            )
        } else {
            let query_set: Vec<usize> = {
                let mut set: std::collections::BTreeSet<usize> =
                    window.iter().copied().collect();
                set.extend(self.last_decoded.iter().copied());
                set.into_iter().collect()
            };
            let h_final = self.windowed_pass(&query_set, t)?;
            let rows = self.rows_at(&h_final, &query_set, &window);
            (
                0.0,
                query_set.len() as u64,
                (query_set.len() * self.cfg.num_layers) as u64,
                rows,
            )
        };
        if self.params.check_layer1 {
            self.verify_layer1()?;
        }
        let picks = self.decode_and_commit(&final_rows, &window)?;
        self.push_step(None, rho, vec![None; self.cfg.num_layers], picks, queries, qkv);
        Ok(())
    }

    /// Plain cache-reuse pass over a query set, writing window rows to the
    /// cache at every layer. Returns the final hidden rows in query order.
    fn windowed_pass(&mut self, query_set: &[usize], _t: u64) -> Result<Matrix> {
        let emb_q = embed_rows(self.cfg, self.weights, &self.state.tokens, query_set)?;
        let cache = self.cache.as_mut().expect("cached policy");
        cache.write_hidden_rows(0, query_set, &emb_q)?;
        let mut h = emb_q;
        for l in 0..self.cfg.num_layers {
            let cache = self.cache.as_ref().unwrap();
            let out = layer_forward_windowed(
                self.cfg,
                self.weights,
                l,
                &h,
                query_set,
                cache.keys(l),
                cache.values(l),
            )?;
            let cache = self.cache.as_mut().unwrap();
            cache.write_window(l, query_set, &out.k_new, &out.v_new, &out.h_out)?;
            h = out.h_out;
        }
        Ok(h)
    }

    fn step_block_wise(&mut self) -> Result<()> {
        let t = self.state.step;
        let masked = self.state.masked_positions();
        let first = masked[0];
        let bs = self.params.policy.block_size;
        let rel = first - self.state.prompt_len;
        let lo = self.state.prompt_len + (rel / bs) * bs;
        let hi = (lo + bs).min(self.n_total);
        let block: Vec<usize> = (lo..hi).collect();
        let pred_window: Vec<usize> =
            block.iter().copied().filter(|&p| !self.state.is_decoded(p)).collect();

        let h_final = self.windowed_pass(&block, t)?;
        let final_rows = self.rows_at(&h_final, &block, &pred_window);
        let mut qkv = (block.len() * self.cfg.num_layers) as u64;
        if self.params.check_layer1 {
            self.verify_layer1()?;
        }
        let picks = self.decode_and_commit(&final_rows, &pred_window)?;

        // Block finished: refresh every layer over all positions.
        let block_done = block.iter().all(|&p| self.state.is_decoded(p));
        let rho = if block_done {
            self.refresh_all(t)?;
            qkv += (self.n_total * self.cfg.num_layers) as u64;
            1.0
        } else {
            0.0
        };
        self.push_step(
            None,
            rho,
            vec![None; self.cfg.num_layers],
            picks,
            block.len() as u64,
            qkv,
        );
        Ok(())
    }

    fn step_elastic(&mut self) -> Result<()> {
        let t = self.state.step;
        let num_layers = self.cfg.num_layers;
        let masked = self.state.masked_positions();
        let window = select_window(&masked, self.params.policy.beta);
        let decoded_list = self.state.decoded_positions();

        // Q^t = tracked ∪ just-decoded ∪ current window.
        let query_set: Vec<usize> = {
            let mut set: std::collections::BTreeSet<usize> = window.iter().copied().collect();
            set.extend(self.last_decoded.iter().copied());
            set.extend(self.prev_record.tracked_union.iter().copied());
            set.into_iter().collect()
        };
        let q_index: BTreeMap<usize, usize> =
            query_set.iter().enumerate().map(|(r, &p)| (p, r)).collect();

        let emb_q = embed_rows(self.cfg, self.weights, &self.state.tokens, &query_set)?;
        self.cache
            .as_mut()
            .expect("cached policy")
            .write_hidden_rows(0, &query_set, &emb_q)?;

        let mut refresh_from: Option<usize> = self.params.force_full_refresh.then_some(0);
        let mut l_star: Option<usize> = None;
        let mut sigma: Vec<Option<f32>> = vec![None; num_layers];
        let mut avg_rows: Vec<Matrix> = Vec::with_capacity(num_layers);
        let mut full_coverage: Vec<bool> = Vec::with_capacity(num_layers);
        let mut refreshed: Vec<RefreshedLayer> = Vec::new();
        let mut h_window = emb_q;
        let mut h_full: Option<Matrix> = None;
        let mut qkv: u64 = 0;

        for l in 0..num_layers {
            let in_update = refresh_from.is_some_and(|rf| l >= rf);
            if in_update {
                let h_in = match h_full.take() {
                    Some(h) => h,
                    None => self.cache.as_ref().unwrap().hidden(l).clone(),
                };
                let out = layer_forward_full(self.cfg, self.weights, l, &h_in)?;
                avg_rows.push(head_average(&out.attn.s));
                full_coverage.push(true);
                refreshed.push(RefreshedLayer { layer: l, h_in, k: out.k, v: out.v });
                h_full = Some(out.h_out);
                qkv += self.n_total as u64;
            } else {
                let cache = self.cache.as_ref().unwrap();
                let out = layer_forward_windowed(
                    self.cfg,
                    self.weights,
                    l,
                    &h_window,
                    &query_set,
                    cache.keys(l),
                    cache.values(l),
                )?;
                let avg = head_average(&out.attn.s);
                let cache = self.cache.as_mut().unwrap();
                cache.write_window(l, &query_set, &out.k_new, &out.v_new, &out.h_out)?;
                qkv += query_set.len() as u64;

                let mut cur_rows = TrackedRows::new();
                for token in self.prev_record.rows_per_layer[l].keys() {
                    if let Some(&r) = q_index.get(token) {
                        cur_rows.insert(*token, avg.row(r).to_vec());
                    }
                }
                let (sg, triggered) =
                    drift_test(&self.prev_record.rows_per_layer[l], &cur_rows, self.params.policy.gamma);
                sigma[l] = Some(sg);
                if triggered && refresh_from.is_none() {
                    refresh_from = Some(l + 1);
                    l_star = Some(l);
                }
                avg_rows.push(avg);
                full_coverage.push(false);
                h_window = out.h_out;
            }
        }

        if let Some(rf) = refresh_from {
            let cache = self.cache.as_mut().unwrap();
            cache.overwrite_from_layer(rf, &refreshed, t)?;
        }
        let refreshed_layers = refresh_from.map_or(0, |rf| num_layers - rf);
        let rho = refreshed_layers as f64 / num_layers as f64;

        // Track the most-attended decoded tokens per layer from the current
        // window's attention rows, then store their rows for the next step's
        // drift test.
        let mut tracked_per_layer: Vec<Vec<usize>> = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let order: Vec<usize> = if full_coverage[l] {
                (0..self.n_total).collect()
            } else {
                query_set.clone()
            };
            let s_window = self.rows_at(&avg_rows[l], &order, &window);
            let picks = most_attended(&s_window, &decoded_list, self.params.policy.top_k)?;
            tracked_per_layer.push(picks.into_iter().map(|(i, _)| i).collect());
        }
        let mut union: Vec<usize> = tracked_per_layer.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let mut rows_per_layer: Vec<TrackedRows> = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut rows = TrackedRows::new();
            for &token in &union {
                let row = if full_coverage[l] {
                    Some(avg_rows[l].row(token))
                } else {
                    q_index.get(&token).map(|&r| avg_rows[l].row(r))
                };
                if let Some(row) = row {
                    rows.insert(token, row.to_vec());
                }
            }
            rows_per_layer.push(rows);
        }
        self.prev_record = AttentionRecord {
            step: t,
            tracked_per_layer,
            tracked_union: union,
            rows_per_layer,
        };

        if self.params.check_layer1 {
            self.verify_layer1()?;
        }

        // Final hidden rows for the window.
        let final_rows = if *full_coverage.last().unwrap() {
            let all: Vec<usize> = (0..self.n_total).collect();
            self.rows_at(h_full.as_ref().unwrap(), &all, &window)
        } else {
            self.rows_at(&h_window, &query_set, &window)
        };
        let picks = self.decode_and_commit(&final_rows, &window)?;
        self.push_step(l_star, rho, sigma, picks, query_set.len() as u64, qkv);
        Ok(())
    }

    fn finish(self, wall_seconds: f64) -> RunOutcome {
        let total_steps = self.steps.len() as u64;
        let total_qkv: u64 = self.steps.iter().map(|s| s.qkv_projections).sum();
        let mean_rho = if self.steps.is_empty() {
            0.0
        } else {
            self.steps.iter().map(|s| s.rho).sum::<f64>() / self.steps.len() as f64
        };
        let gen_region = &self.state.tokens[self.state.prompt_len..];
        let effective_tokens = effective_length(gen_region, self.cfg.eos_token_id);
        let (wall, tps) = if self.params.timing {
            let tps = if wall_seconds > 0.0 {
                Some(effective_tokens as f64 / wall_seconds)
            } else {
                None
            };
            (Some(wall_seconds), tps)
        } else {
            (None, None)
        };
        let report = RunReport {
            policy: self.params.policy.clone(),
            model: self.cfg.clone(),
            seed: self.params.seed,
            prompt_len: self.state.prompt_len,
            gen_len: self.state.gen_len,
            force_full_refresh: self.params.force_full_refresh,
            steps: self.steps,
            aggregates: Aggregates {
                total_steps,
                total_qkv_token_layer_projections: total_qkv,
                init_qkv_projections: self.init_qkv,
                mean_rho,
                effective_tokens,
                wall_seconds: wall,
                tokens_per_second: tps,
                agreement_with_oracle: None,
            },
            drift: None,
            final_tokens: self.state.tokens,
        };
        RunOutcome { final_tokens: report.final_tokens.clone(), report }
    }
}

/// Generated tokens counted for throughput: everything up to and including
/// the first EOS, or the whole generation region when none is emitted.
pub fn effective_length(gen_tokens: &[u32], eos_token_id: u32) -> u64 {
    match gen_tokens.iter().position(|&t| t == eos_token_id) {
        Some(idx) => (idx + 1) as u64,
        None => gen_tokens.len() as u64,
    }
}

/// Standalone layer-1 exactness probe: cached layer-0 K/V must equal the
/// projections of the current embeddings, bitwise.
pub fn verify_layer1_exactness(
    cfg: &ModelConfig,
    weights: &Weights,
    cache: &CacheStore,
    tokens: &[u32],
) -> Result<()> {
    let emb = embed(cfg, weights, tokens)?;
    let (k, v) = project_layer_kv(cfg, weights, 0, &emb)?;
    if cache.keys(0).data() != k.data() || cache.values(0).data() != v.data() {
        return Err(EdlmError::internal("layer-1 cache exactness violated"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::rng::{Rng, STREAM_PROMPT};

    fn toy_cfg(layers: usize) -> ModelConfig {
        ModelConfig::new(layers, 2, 16, 32, 48, 64).unwrap()
    }

    fn toy_prompt(cfg: &ModelConfig, seed: u64, len: usize) -> Vec<u32> {
        let mut rng = Rng::with_stream(seed, STREAM_PROMPT);
        (0..len).map(|_| rng.below(cfg.vocab_size as u64 - 2) as u32).collect()
    }

    #[test]
    fn effective_length_stops_at_first_eos() {
        assert_eq!(effective_length(&[5, 9, 2, 9], 9), 2);
        assert_eq!(effective_length(&[9, 1, 2], 9), 1);
        assert_eq!(effective_length(&[1, 2, 3], 9), 3);
    }

    #[test]
    fn select_window_takes_smallest() {
        assert_eq!(select_window(&[2, 5, 7, 9], 2), vec![2, 5]);
        assert_eq!(select_window(&[2, 5], 8), vec![2, 5]);
        let contiguous: Vec<usize> = (10..=20).collect();
        assert_eq!(select_window(&contiguous, 4), vec![10, 11, 12, 13]);
    }

    #[test]
    fn confidence_decode_threshold_scan() {
        // Distributions engineered so max-prob is 0.95 / 0.50 / 0.92.
        let dist = Matrix::from_vec(
            3,
            4,
            vec![
                0.95, 0.02, 0.02, 0.01, //
                0.50, 0.30, 0.15, 0.05, //
                0.04, 0.92, 0.02, 0.02,
            ],
        )
        .unwrap();
        let picks = confidence_decode(&dist, &[10, 11, 12], 0.9);
        assert_eq!(picks, vec![(10, 0), (12, 1)]);
    }

    #[test]
    fn confidence_decode_fallback_single_max() {
        let dist = Matrix::from_vec(2, 3, vec![0.4, 0.3, 0.3, 0.5, 0.25, 0.25]).unwrap();
        let picks = confidence_decode(&dist, &[4, 5], 0.99);
        assert_eq!(picks, vec![(5, 0)]);
    }

    #[test]
    fn confidence_decode_zero_eps_unmasks_all() {
        let dist = Matrix::from_vec(2, 3, vec![0.4, 0.3, 0.3, 0.5, 0.25, 0.25]).unwrap();
        let picks = confidence_decode(&dist, &[4, 5], 1e-6);
        assert_eq!(picks.len(), 2);
    }

    #[test]
    fn gen_len_one_all_policies_agree() {
        let cfg = toy_cfg(2);
        let w = init_weights(3, &cfg);
        let prompt = toy_prompt(&cfg, 3, 6);
        let mut outcomes = Vec::new();
        for kind in [
            PolicyKind::NoCache,
            PolicyKind::FixedInterval,
            PolicyKind::BlockWise,
            PolicyKind::Elastic,
        ] {
            let params = RunParams::new(prompt.clone(), 1, 3, PolicyConfig::new(kind));
            let out = run_decode(&cfg, &w, &params).unwrap();
            assert_eq!(out.report.aggregates.total_steps, 1);
            outcomes.push(out.final_tokens);
        }
        for o in &outcomes[1..] {
            assert_eq!(o, &outcomes[0]);
        }
    }

    #[test]
    fn forced_refresh_matches_no_cache_bitwise() {
        let cfg = toy_cfg(3);
        let w = init_weights(11, &cfg);
        let prompt = toy_prompt(&cfg, 11, 8);

        let base = RunParams::new(prompt.clone(), 12, 11, PolicyConfig::new(PolicyKind::NoCache));
        let oracle = run_decode(&cfg, &w, &base).unwrap();

        let mut forced =
            RunParams::new(prompt, 12, 11, PolicyConfig::new(PolicyKind::Elastic));
        forced.force_full_refresh = true;
        forced.check_layer1 = true;
        let elastic = run_decode(&cfg, &w, &forced).unwrap();

        assert_eq!(oracle.final_tokens, elastic.final_tokens);
    }

    #[test]
    fn fixed_interval_one_matches_no_cache() {
        let cfg = toy_cfg(2);
        let w = init_weights(5, &cfg);
        let prompt = toy_prompt(&cfg, 5, 6);

        let oracle = run_decode(
            &cfg,
            &w,
            &RunParams::new(prompt.clone(), 10, 5, PolicyConfig::new(PolicyKind::NoCache)),
        )
        .unwrap();

        let mut p = PolicyConfig::new(PolicyKind::FixedInterval);
        p.interval = 1;
        let fixed = run_decode(&cfg, &w, &RunParams::new(prompt, 10, 5, p)).unwrap();
        assert_eq!(oracle.final_tokens, fixed.final_tokens);
    }

    #[test]
    fn no_cache_is_deterministic() {
        let cfg = toy_cfg(2);
        let w = init_weights(7, &cfg);
        let prompt = toy_prompt(&cfg, 7, 5);
        let params = RunParams::new(prompt, 8, 7, PolicyConfig::new(PolicyKind::NoCache));
        let a = run_decode(&cfg, &w, &params).unwrap();
        let b = run_decode(&cfg, &w, &params).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
        assert_eq!(a.report.to_json(), b.report.to_json());
    }

    #[test]
    fn block_wise_full_block_refreshes_once_and_beats_no_cache_work() {
        let cfg = toy_cfg(2);
        let w = init_weights(9, &cfg);
        let prompt = toy_prompt(&cfg, 9, 8);
        let gen = 12;

        let mut p = PolicyConfig::new(PolicyKind::BlockWise);
        p.block_size = gen;
        let blocked = run_decode(&cfg, &w, &RunParams::new(prompt.clone(), gen, 9, p)).unwrap();
        let refreshes = blocked.report.steps.iter().filter(|s| s.rho == 1.0).count();
        assert_eq!(refreshes, 1);
        assert_eq!(blocked.report.steps.last().unwrap().rho, 1.0);

        let oracle = run_decode(
            &cfg,
            &w,
            &RunParams::new(prompt, gen, 9, PolicyConfig::new(PolicyKind::NoCache)),
        )
        .unwrap();
        assert!(
            blocked.report.aggregates.total_qkv_token_layer_projections
                < oracle.report.aggregates.total_qkv_token_layer_projections
        );
    }

    #[test]
    fn elastic_never_triggering_costs_query_set_times_layers() {
        let cfg = toy_cfg(3);
        let w = init_weights(13, &cfg);
        let prompt = toy_prompt(&cfg, 13, 6);
        let mut p = PolicyConfig::new(PolicyKind::Elastic);
        p.gamma = 1e-6; // effectively never triggers
        let out = run_decode(&cfg, &w, &RunParams::new(prompt, 10, 13, p)).unwrap();
        for step in &out.report.steps {
            assert_eq!(step.l_star, None);
            assert_eq!(
                step.qkv_projections,
                step.queries * cfg.num_layers as u64
            );
        }
    }

    #[test]
    fn masked_set_strictly_shrinks_and_terminates() {
        let cfg = toy_cfg(2);
        let w = init_weights(15, &cfg);
        let prompt = toy_prompt(&cfg, 15, 4);
        for eps in [0.5f32, 0.9, 0.99] {
            for kind in [
                PolicyKind::NoCache,
                PolicyKind::FixedInterval,
                PolicyKind::BlockWise,
                PolicyKind::Elastic,
            ] {
                let mut p = PolicyConfig::new(kind);
                p.eps = eps;
                let gen = 9;
                let out =
                    run_decode(&cfg, &w, &RunParams::new(prompt.clone(), gen, 15, p)).unwrap();
                assert!(out.report.aggregates.total_steps <= gen as u64);
                let mut total = 0usize;
                for s in &out.report.steps {
                    assert!(!s.decoded.is_empty(), "{kind:?} step decoded nothing");
                    total += s.decoded.len();
                }
                assert_eq!(total, gen);
            }
        }
    }

    #[test]
    fn decoded_positions_disjoint_across_steps() {
        let cfg = toy_cfg(2);
        let w = init_weights(17, &cfg);
        let prompt = toy_prompt(&cfg, 17, 4);
        let mut p = PolicyConfig::new(PolicyKind::Elastic);
        p.eps = 0.3;
        let out = run_decode(&cfg, &w, &RunParams::new(prompt, 12, 17, p)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for s in &out.report.steps {
            for &pos in &s.decoded {
                assert!(seen.insert(pos), "position {pos} decoded twice");
            }
        }
    }

    #[test]
    fn elastic_layer1_exactness_holds_every_step() {
        let cfg = toy_cfg(3);
        let w = init_weights(19, &cfg);
        let prompt = toy_prompt(&cfg, 19, 6);
        let mut params =
            RunParams::new(prompt, 10, 19, PolicyConfig::new(PolicyKind::Elastic));
        params.check_layer1 = true;
        run_decode(&cfg, &w, &params).unwrap();
    }

    /// Replay oracle: per-step work must equal
    /// reuse_layers * |Q| + refreshed_layers * N, reconstructed from the
    /// step records alone.
    #[test]
    fn qkv_counter_matches_event_replay() {
        let cfg = toy_cfg(4);
        let w = init_weights(23, &cfg);
        let prompt = toy_prompt(&cfg, 23, 6);
        let mut p = PolicyConfig::new(PolicyKind::Elastic);
        p.gamma = 0.9995; // provoke real triggers on toy weights
        p.beta = 4;
        let out = run_decode(&cfg, &w, &RunParams::new(prompt, 14, 23, p)).unwrap();
        let n_total = out.final_tokens.len() as u64;
        let layers = cfg.num_layers as u64;
        let mut any_trigger = false;
        let mut replay_total = 0u64;
        for s in &out.report.steps {
            let refreshed = (s.rho * layers as f64).round() as u64;
            if s.l_star.is_some() {
                any_trigger = true;
            }
            let want = (layers - refreshed) * s.queries + refreshed * n_total;
            assert_eq!(s.qkv_projections, want, "step {}", s.t);
            replay_total += want;
        }
        assert!(any_trigger, "gamma 0.9995 should trigger on toy weights");
        assert_eq!(
            out.report.aggregates.total_qkv_token_layer_projections,
            replay_total
        );
    }

    /// Once the drift trigger fires at a layer, every deeper layer runs the
    /// update branch that step: sigma is recorded up to and including the
    /// trigger layer and absent above it.
    #[test]
    fn trigger_boundary_is_monotone_within_step() {
        let cfg = toy_cfg(4);
        let w = init_weights(29, &cfg);
        let prompt = toy_prompt(&cfg, 29, 6);
        let mut p = PolicyConfig::new(PolicyKind::Elastic);
        p.gamma = 0.9995;
        p.beta = 4;
        let gamma = p.gamma;
        let out = run_decode(&cfg, &w, &RunParams::new(prompt, 14, 29, p)).unwrap();
        for s in &out.report.steps {
            match s.l_star {
                Some(j) => {
                    for l in 0..cfg.num_layers {
                        if l <= j {
                            assert!(s.sigma[l].is_some(), "t={} layer {l}", s.t);
                        } else {
                            assert!(s.sigma[l].is_none(), "t={} layer {l}", s.t);
                        }
                    }
                    assert!(s.sigma[j].unwrap() < gamma);
                    let expect_rho =
                        (cfg.num_layers - j - 1) as f64 / cfg.num_layers as f64;
                    assert!((s.rho - expect_rho).abs() < 1e-12);
                }
                None => {
                    assert!(s.sigma.iter().all(|x| x.is_some()));
                    assert_eq!(s.rho, 0.0);
                }
            }
        }
    }

    #[test]
    fn config_errors_surface_before_compute() {
        let cfg = toy_cfg(2);
        let w = init_weights(1, &cfg);
        let mut p = PolicyConfig::new(PolicyKind::Elastic);
        p.gamma = 2.0;
        let err =
            run_decode(&cfg, &w, &RunParams::new(vec![1, 2], 4, 1, p)).unwrap_err();
        assert!(matches!(err, EdlmError::Config(_)));

        let params = RunParams::new(vec![], 4, 1, PolicyConfig::new(PolicyKind::NoCache));
        assert!(run_decode(&cfg, &w, &params).is_err());

        let params = RunParams::new(vec![1], 1000, 1, PolicyConfig::new(PolicyKind::NoCache));
        assert!(run_decode(&cfg, &w, &params).is_err());
    }
}
