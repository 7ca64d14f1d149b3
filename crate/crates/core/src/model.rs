//! Toy bidirectional transformer with per-layer access to Q/K/V and
//! attention matrices.
//!
//! The block is pre-norm: `h + MHA(LN1(h))`, then `x + FFN(LN2(x))` with a
//! GELU feed-forward. Position information comes from learned absolute
//! position embeddings, so cached keys stay valid without positional
//! recomputation. The output head is tied to the token embedding. The final
//! layer norm before the head is parameterless (unit gain, zero bias); it
//! owns no tensor in the weight file.
//!
//! Layer-1 determinism matters downstream: a position's key/value at the
//! first layer depend only on (token id, position), which is what lets the
//! cache store be validated against re-projected embeddings at any step.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EdlmError, Result};
use crate::kernel::{layer_norm, matmul, matmul_transpose_b, softmax_rows, Matrix};
use crate::rng::{Rng, STREAM_WEIGHTS};

/// Magic bytes of the binary weight file.
pub const WEIGHT_MAGIC: &[u8; 4] = b"EDLM";
/// Current weight file version.
pub const WEIGHT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub mask_token_id: u32,
    pub eos_token_id: u32,
}

impl ModelConfig {
    /// Standard shape: `d_k = d_v = d_model / heads`, mask id `vocab-1`,
    /// eos id `vocab-2`.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(EdlmError::config(format!(
                "d_model {d_model} must be divisible by num_heads {num_heads}"
            )));
        }
        let d_k = d_model / num_heads;
        let cfg = Self {
            num_layers,
            num_heads,
            d_model,
            d_k,
            d_v: d_k,
            d_ff,
            vocab_size,
            max_positions,
            mask_token_id: vocab_size.saturating_sub(1) as u32,
            eos_token_id: vocab_size.saturating_sub(2) as u32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_layers,
            self.num_heads,
            self.d_model,
            self.d_k,
            self.d_v,
            self.d_ff,
            self.vocab_size,
            self.max_positions,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(EdlmError::config("all model dimensions must be >= 1"));
        }
        if self.d_model != self.num_heads * self.d_k {
            return Err(EdlmError::config(format!(
                "d_model {} != num_heads {} * d_k {}",
                self.d_model, self.num_heads, self.d_k
            )));
        }
        if self.d_v != self.d_k {
            return Err(EdlmError::config("d_v must equal d_k"));
        }
        if self.mask_token_id == self.eos_token_id {
            return Err(EdlmError::config("mask and eos token ids must differ"));
        }
        if self.mask_token_id as usize >= self.vocab_size
            || self.eos_token_id as usize >= self.vocab_size
        {
            return Err(EdlmError::config("mask/eos token id out of vocabulary"));
        }
        Ok(())
    }
}

/// Per-layer parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// Full parameter set. The output head reuses `token_embedding` transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

/// Xavier-uniform initialization from the tagged weight stream.
///
/// Tensors are drawn in declaration order (token embedding, position
/// embedding, then per layer W_Q, W_K, W_V, W_O, W1, W2). Layer-norm gains
/// and biases are constant-initialized and consume no stream values.
pub fn init_weights(seed: u64, cfg: &ModelConfig) -> Weights {
    let mut rng = Rng::with_stream(seed, STREAM_WEIGHTS);
    let mut draw = |rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f32).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_symmetric(bound))
    };
    let token_embedding = draw(cfg.vocab_size, cfg.d_model);
    let position_embedding = draw(cfg.max_positions, cfg.d_model);
    let layers = (0..cfg.num_layers)
        .map(|_| LayerWeights {
            w_q: draw(cfg.d_model, cfg.d_model),
            w_k: draw(cfg.d_model, cfg.d_model),
            w_v: draw(cfg.d_model, cfg.d_model),
            w_o: draw(cfg.d_model, cfg.d_model),
            w1: draw(cfg.d_model, cfg.d_ff),
            w2: draw(cfg.d_ff, cfg.d_model),
            ln1_gain: vec![1.0; cfg.d_model],
            ln1_bias: vec![0.0; cfg.d_model],
            ln2_gain: vec![1.0; cfg.d_model],
            ln2_bias: vec![0.0; cfg.d_model],
        })
        .collect();
    Weights { token_embedding, position_embedding, layers }
}

/// Token + position embedding for every position of `tokens`.
pub fn embed(cfg: &ModelConfig, w: &Weights, tokens: &[u32]) -> Result<Matrix> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    embed_rows(cfg, w, tokens, &positions)
}

/// Embedding rows for a subset of positions, in the order given.
///
/// Each row depends only on (token id, position); repeated calls on
/// unchanged tokens are bitwise identical.
pub fn embed_rows(
    cfg: &ModelConfig,
    w: &Weights,
    tokens: &[u32],
    positions: &[usize],
) -> Result<Matrix> {
    if tokens.len() > cfg.max_positions {
        return Err(EdlmError::input(format!(
            "sequence length {} exceeds max_positions {}",
            tokens.len(),
            cfg.max_positions
        )));
    }
    let mut out = Matrix::zeros(positions.len(), cfg.d_model);
    for (r, &pos) in positions.iter().enumerate() {
        let id = *tokens.get(pos).ok_or_else(|| {
            EdlmError::input(format!("position {pos} out of range for sequence"))
        })?;
        if id as usize >= cfg.vocab_size {
            return Err(EdlmError::input(format!(
                "token id {id} out of vocabulary (size {})",
                cfg.vocab_size
            )));
        }
        let tok = w.token_embedding.row(id as usize);
        let pe = w.position_embedding.row(pos);
        let row = out.row_mut(r);
        for ((o, &t), &p) in row.iter_mut().zip(tok.iter()).zip(pe.iter()) {
            *o = t + p;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation.
fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_56;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn layer_norm_rows(h: &Matrix, gain: &[f32], bias: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for r in 0..h.rows() {
        let normed = layer_norm(h.row(r), gain, bias);
        out.copy_row_from(r, &normed);
    }
    out
}

/// Per-head attention tensors: `z` holds the scaled pre-softmax scores,
/// `s` the post-softmax weights. Rows are query rows, columns cover all
/// cached positions.
#[derive(Debug, Clone)]
pub struct AttnMaps {
    pub z: Vec<Matrix>,
    pub s: Vec<Matrix>,
}

/// Mean of the per-head attention weights.
pub fn head_average(per_head: &[Matrix]) -> Matrix {
    let h = per_head.len();
    let rows = per_head[0].rows();
    let cols = per_head[0].cols();
    let mut out = Matrix::zeros(rows, cols);
    for m in per_head {
        for (o, &x) in out.data_mut().iter_mut().zip(m.data().iter()) {
            *o += x;
        }
    }
    let inv = 1.0 / h as f32;
    for o in out.data_mut() {
        *o *= inv;
    }
    out
}

/// Output of a full-position layer pass.
#[derive(Debug, Clone)]
pub struct FullLayerOut {
    pub h_out: Matrix,
    /// Post-LN1 rows, i.e. what the Q/K/V projections actually consumed.
    pub norm_input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: AttnMaps,
}

/// Output of a windowed layer pass.
#[derive(Debug, Clone)]
pub struct WindowLayerOut {
    pub h_out: Matrix,
    pub k_new: Matrix,
    pub v_new: Matrix,
    pub attn: AttnMaps,
}

/// Scaled per-head scores of `q_rows` against `k_all`, then softmax.
fn attention_per_head(
    cfg: &ModelConfig,
    q_rows: &Matrix,
    k_all: &Matrix,
    v_all: &Matrix,
) -> (AttnMaps, Matrix) {
    let scale = 1.0 / (cfg.d_k as f32).sqrt();
    let n_q = q_rows.rows();
    let n_k = k_all.rows();
    let mut z_heads = Vec::with_capacity(cfg.num_heads);
    let mut s_heads = Vec::with_capacity(cfg.num_heads);
    let mut mixed = Matrix::zeros(n_q, cfg.d_model);
    for h in 0..cfg.num_heads {
        let lo = h * cfg.d_k;
        let hi = lo + cfg.d_k;
        let mut z = Matrix::zeros(n_q, n_k);
        for i in 0..n_q {
            let q_slice = &q_rows.row(i)[lo..hi];
            let z_row = z.row_mut(i);
            for (j, zr) in z_row.iter_mut().enumerate() {
                let k_slice = &k_all.row(j)[lo..hi];
                let mut acc = 0.0f32;
                for (a, b) in q_slice.iter().zip(k_slice.iter()) {
                    acc += a * b;
                }
                *zr = acc * scale;
            }
        }
        let s = softmax_rows(&z);
        // Mix values: out[i] = sum_j s[i,j] * v[j], per head columns.
        for i in 0..n_q {
            let s_row = s.row(i);
            let out_row = &mut mixed.row_mut(i)[lo..hi];
            for (j, &w) in s_row.iter().enumerate() {
                let v_slice = &v_all.row(j)[lo..hi];
                for (o, &vv) in out_row.iter_mut().zip(v_slice.iter()) {
                    *o += w * vv;
                }
            }
        }
        z_heads.push(z);
        s_heads.push(s);
    }
    (AttnMaps { z: z_heads, s: s_heads }, mixed)
}

/// Residual FFN sub-block shared by both pass flavors.
fn ffn_block(lw: &LayerWeights, h: &Matrix) -> Result<Matrix> {
    let normed = layer_norm_rows(h, &lw.ln2_gain, &lw.ln2_bias);
    let mut mid = matmul(&normed, &lw.w1)?;
    for x in mid.data_mut() {
        *x = gelu(*x);
    }
    let ffn = matmul(&mid, &lw.w2)?;
    let mut out = h.clone();
    for (o, &f) in out.data_mut().iter_mut().zip(ffn.data().iter()) {
        *o += f;
    }
    Ok(out)
}

/// K/V projections of `h_in` exactly as the layer pass computes them
/// (post-LN1, same kernel calls). Used to validate cache contents.
pub fn project_layer_kv(
    _cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    h_in: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let lw = &w.layers[layer];
    let norm_input = layer_norm_rows(h_in, &lw.ln1_gain, &lw.ln1_bias);
    let k = matmul(&norm_input, &lw.w_k)?;
    let v = matmul(&norm_input, &lw.w_v)?;
    Ok((k, v))
}

/// One transformer block over all positions.
pub fn layer_forward_full(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    h_in: &Matrix,
) -> Result<FullLayerOut> {
    let lw = &w.layers[layer];
    let norm_input = layer_norm_rows(h_in, &lw.ln1_gain, &lw.ln1_bias);
    let q = matmul(&norm_input, &lw.w_q)?;
    let k = matmul(&norm_input, &lw.w_k)?;
    let v = matmul(&norm_input, &lw.w_v)?;
    let (attn, mixed) = attention_per_head(cfg, &q, &k, &v);
    let proj = matmul(&mixed, &lw.w_o)?;
    let mut h_mid = h_in.clone();
    for (o, &p) in h_mid.data_mut().iter_mut().zip(proj.data().iter()) {
        *o += p;
    }
    let h_out = ffn_block(lw, &h_mid)?;
    Ok(FullLayerOut { h_out, norm_input, q, k, v, attn })
}

/// One transformer block computed only for the query rows, attending
/// against the cached key/value set with the fresh window rows substituted
/// in (the cache as of this step, not the previous one).
///
/// Returns the fresh K/V for the query rows so the caller can write the
/// cache store to match what the attention saw.
pub fn layer_forward_windowed(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    h_window: &Matrix,
    positions: &[usize],
    cached_k: &Matrix,
    cached_v: &Matrix,
) -> Result<WindowLayerOut> {
    if cached_k.rows() != cached_v.rows() || cached_k.cols() != cfg.d_model {
        return Err(EdlmError::internal(format!(
            "cache shape mismatch at layer {layer}: k {}x{}, v {}x{}",
            cached_k.rows(),
            cached_k.cols(),
            cached_v.rows(),
            cached_v.cols()
        )));
    }
    if h_window.rows() != positions.len() {
        return Err(EdlmError::internal(
            "window rows do not match position count",
        ));
    }
    let lw = &w.layers[layer];
    let norm_input = layer_norm_rows(h_window, &lw.ln1_gain, &lw.ln1_bias);
    let q = matmul(&norm_input, &lw.w_q)?;
    let k_new = matmul(&norm_input, &lw.w_k)?;
    let v_new = matmul(&norm_input, &lw.w_v)?;

    let mut k_all = cached_k.clone();
    let mut v_all = cached_v.clone();
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= k_all.rows() {
            return Err(EdlmError::internal(format!(
                "window position {pos} outside cache of {} rows",
                k_all.rows()
            )));
        }
        k_all.copy_row_from(pos, k_new.row(r));
        v_all.copy_row_from(pos, v_new.row(r));
    }

    let (attn, mixed) = attention_per_head(cfg, &q, &k_all, &v_all);
    let proj = matmul(&mixed, &lw.w_o)?;
    let mut h_mid = h_window.clone();
    for (o, &p) in h_mid.data_mut().iter_mut().zip(proj.data().iter()) {
        *o += p;
    }
    let h_out = ffn_block(lw, &h_mid)?;
    Ok(WindowLayerOut { h_out, k_new, v_new, attn })
}

/// Vocabulary distribution per row: parameterless final layer norm, tied
/// embedding projection, softmax.
pub fn logits(cfg: &ModelConfig, w: &Weights, h_rows: &Matrix) -> Result<Matrix> {
    let unit = vec![1.0f32; cfg.d_model];
    let zero = vec![0.0f32; cfg.d_model];
    let normed = layer_norm_rows(h_rows, &unit, &zero);
    let scores = matmul_transpose_b(&normed, &w.token_embedding)?;
    Ok(softmax_rows(&scores))
}

// ── Weight file I/O ─────────────────────────────────────────────────────────
//
// Layout: magic "EDLM", version u32 LE, the ten ModelConfig fields as u32 LE
// in declaration order, then tensors as raw f32 LE row-major in declaration
// order (token embedding, position embedding, per layer W_Q, W_K, W_V, W_O,
// W1, W2, ln1 gain/bias, ln2 gain/bias).

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_vec(buf: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes config + weights to the EDLM byte format.
pub fn weights_to_bytes(cfg: &ModelConfig, w: &Weights) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for field in [
        cfg.num_layers as u32,
        cfg.num_heads as u32,
        cfg.d_model as u32,
        cfg.d_k as u32,
        cfg.d_v as u32,
        cfg.d_ff as u32,
        cfg.vocab_size as u32,
        cfg.max_positions as u32,
        cfg.mask_token_id,
        cfg.eos_token_id,
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    push_matrix(&mut buf, &w.token_embedding);
    push_matrix(&mut buf, &w.position_embedding);
    for lw in &w.layers {
        push_matrix(&mut buf, &lw.w_q);
        push_matrix(&mut buf, &lw.w_k);
        push_matrix(&mut buf, &lw.w_v);
        push_matrix(&mut buf, &lw.w_o);
        push_matrix(&mut buf, &lw.w1);
        push_matrix(&mut buf, &lw.w2);
        push_vec(&mut buf, &lw.ln1_gain);
        push_vec(&mut buf, &lw.ln1_bias);
        push_vec(&mut buf, &lw.ln2_gain);
        push_vec(&mut buf, &lw.ln2_bias);
    }
    buf
}

pub fn write_weights(path: &Path, cfg: &ModelConfig, w: &Weights) -> Result<()> {
    let bytes = weights_to_bytes(cfg, w);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.at + 4;
        if end > self.bytes.len() {
            return Err(EdlmError::input("weight file truncated"));
        }
        let v = u32::from_le_bytes(self.bytes[self.at..end].try_into().unwrap());
        self.at = end;
        Ok(v)
    }

    fn f32_block(&mut self, count: usize) -> Result<Vec<f32>> {
        let end = self.at + count * 4;
        if end > self.bytes.len() {
            return Err(EdlmError::input("weight file truncated"));
        }
        let out = self.bytes[self.at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.at = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f32_block(rows * cols)?)
    }
}

/// Parses the EDLM byte format back into config + weights.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(EdlmError::input("not an EDLM weight file (bad magic)"));
    }
    let mut r = ByteReader { bytes, at: 4 };
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(EdlmError::input(format!(
            "unsupported weight file version {version}"
        )));
    }
    let cfg = ModelConfig {
        num_layers: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        d_model: r.u32()? as usize,
        d_k: r.u32()? as usize,
        d_v: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        max_positions: r.u32()? as usize,
        mask_token_id: r.u32()?,
        eos_token_id: r.u32()?,
    };
    cfg.validate()?;
    let token_embedding = r.matrix(cfg.vocab_size, cfg.d_model)?;
    let position_embedding = r.matrix(cfg.max_positions, cfg.d_model)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let w_q = r.matrix(cfg.d_model, cfg.d_model)?;
        let w_k = r.matrix(cfg.d_model, cfg.d_model)?;
        let w_v = r.matrix(cfg.d_model, cfg.d_model)?;
        let w_o = r.matrix(cfg.d_model, cfg.d_model)?;
        let w1 = r.matrix(cfg.d_model, cfg.d_ff)?;
        let w2 = r.matrix(cfg.d_ff, cfg.d_model)?;
        let ln1_gain = r.f32_block(cfg.d_model)?;
        let ln1_bias = r.f32_block(cfg.d_model)?;
        let ln2_gain = r.f32_block(cfg.d_model)?;
        let ln2_bias = r.f32_block(cfg.d_model)?;
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            w1,
            w2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        });
    }
    if r.at != bytes.len() {
        return Err(EdlmError::input("trailing bytes after weight tensors"));
    }
    Ok((cfg, Weights { token_embedding, position_embedding, layers }))
}

pub fn read_weights(path: &Path) -> Result<(ModelConfig, Weights)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    weights_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{argmax, softmax_in_place};

    fn small_cfg() -> ModelConfig {
        ModelConfig::new(2, 2, 8, 16, 32, 24).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = init_weights(11, &cfg);
        let b = init_weights(11, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_cfg();
        let a = init_weights(1, &cfg);
        let b = init_weights(2, &cfg);
        assert_ne!(a.token_embedding.data(), b.token_embedding.data());
    }

    #[test]
    fn xavier_bounds_hold_for_wq() {
        let cfg = small_cfg();
        let w = init_weights(5, &cfg);
        let bound = (6.0 / (cfg.d_model + cfg.d_model) as f32).sqrt();
        for lw in &w.layers {
            for &x in lw.w_q.data() {
                assert!(x.abs() <= bound, "entry {x} outside xavier bound {bound}");
            }
        }
    }

    #[test]
    fn embed_is_pure_and_positional() {
        let cfg = small_cfg();
        let w = init_weights(3, &cfg);
        let tokens = vec![1u32, 5, cfg.mask_token_id, cfg.mask_token_id];
        let a = embed(&cfg, &w, &tokens).unwrap();
        let b = embed(&cfg, &w, &tokens).unwrap();
        assert_eq!(a.data(), b.data());

        // Two MASK positions differ only via the position embedding.
        for c in 0..cfg.d_model {
            let tok = w.token_embedding.get(cfg.mask_token_id as usize, c);
            assert_eq!(a.get(2, c), tok + w.position_embedding.get(2, c));
            assert_eq!(a.get(3, c), tok + w.position_embedding.get(3, c));
        }

        // Row 0 is exactly token embedding + position embedding 0.
        for c in 0..cfg.d_model {
            assert_eq!(
                a.get(0, c),
                w.token_embedding.get(1, c) + w.position_embedding.get(0, c)
            );
        }
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let cfg = small_cfg();
        let w = init_weights(3, &cfg);
        let err = embed(&cfg, &w, &[cfg.vocab_size as u32]).unwrap_err();
        assert!(matches!(err, EdlmError::Input(_)));
    }

    #[test]
    fn single_position_attention_is_one() {
        let cfg = small_cfg();
        let w = init_weights(7, &cfg);
        let h = embed(&cfg, &w, &[3]).unwrap();
        let out = layer_forward_full(&cfg, &w, 0, &h).unwrap();
        for s in &out.attn.s {
            assert_eq!(s.rows(), 1);
            assert_eq!(s.get(0, 0), 1.0);
        }
    }

    #[test]
    fn zero_hidden_gives_uniform_attention() {
        let cfg = small_cfg();
        let w = init_weights(7, &cfg);
        let h = Matrix::zeros(5, cfg.d_model);
        let out = layer_forward_full(&cfg, &w, 0, &h).unwrap();
        for s in &out.attn.s {
            for r in 0..5 {
                for c in 0..5 {
                    assert!((s.get(r, c) - 0.2).abs() <= 1e-6);
                }
            }
        }
    }

    /// Recomposes the block from scratch (naive loops, no shared helpers)
    /// and compares against layer_forward_full.
    #[test]
    fn full_layer_matches_recomposed_oracle() {
        let cfg = small_cfg();
        let w = init_weights(9, &cfg);
        let tokens = vec![4u32, 9, 2, cfg.mask_token_id];
        let h = embed(&cfg, &w, &tokens).unwrap();
        let out = layer_forward_full(&cfg, &w, 1, &h).unwrap();

        let lw = &w.layers[1];
        let n = tokens.len();
        let d = cfg.d_model;
        // LN1 (naive).
        let mut x = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            let row = h.row(i);
            let mean: f32 = row.iter().sum::<f32>() / d as f32;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            for c in 0..d {
                x[i][c] = (row[c] - mean) / (var + 1e-5).sqrt();
            }
        }
        let proj = |m: &Matrix, x: &[Vec<f32>]| {
            let mut out = vec![vec![0.0f32; d]; n];
            for i in 0..n {
                for j in 0..d {
                    let mut acc = 0.0f32;
                    for k in 0..d {
                        acc += x[i][k] * m.get(k, j);
                    }
                    out[i][j] = acc;
                }
            }
            out
        };
        let q = proj(&lw.w_q, &x);
        let k = proj(&lw.w_k, &x);
        let v = proj(&lw.w_v, &x);
        let mut mixed = vec![vec![0.0f32; d]; n];
        for head in 0..cfg.num_heads {
            let lo = head * cfg.d_k;
            for i in 0..n {
                let mut z: Vec<f32> = (0..n)
                    .map(|j| {
                        let mut acc = 0.0f32;
                        for c in 0..cfg.d_k {
                            acc += q[i][lo + c] * k[j][lo + c];
                        }
                        acc / (cfg.d_k as f32).sqrt()
                    })
                    .collect();
                softmax_in_place(&mut z);
                for j in 0..n {
                    for c in 0..cfg.d_k {
                        mixed[i][lo + c] += z[j] * v[j][lo + c];
                    }
                }
            }
        }
        // Output projection + residual.
        let mut h_mid = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0f32;
                for c in 0..d {
                    acc += mixed[i][c] * lw.w_o.get(c, j);
                }
                h_mid[i][j] = h.get(i, j) + acc;
            }
        }
        // FFN + residual.
        let mut want = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            let mean: f32 = h_mid[i].iter().sum::<f32>() / d as f32;
            let var: f32 =
                h_mid[i].iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let normed: Vec<f32> = h_mid[i]
                .iter()
                .map(|v| (v - mean) / (var + 1e-5).sqrt())
                .collect();
            let mut mid = vec![0.0f32; cfg.d_ff];
            for (j, m) in mid.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for c in 0..d {
                    acc += normed[c] * lw.w1.get(c, j);
                }
                *m = gelu(acc);
            }
            for j in 0..d {
                let mut acc = 0.0f32;
                for (c, m) in mid.iter().enumerate() {
                    acc += m * lw.w2.get(c, j);
                }
                want[i][j] = h_mid[i][j] + acc;
            }
        }
        for i in 0..n {
            for j in 0..d {
                assert!(
                    (out.h_out.get(i, j) - want[i][j]).abs() <= 1e-5,
                    "mismatch at ({i},{j})"
                );
            }
        }
        assert!(out.h_out.all_finite());
        assert!(out.k.all_finite());
        assert!(out.v.all_finite());
    }

    #[test]
    fn windowed_full_window_reduces_to_full_pass() {
        let cfg = small_cfg();
        let w = init_weights(13, &cfg);
        let tokens = vec![1u32, 2, 3, 4, 5];
        let h = embed(&cfg, &w, &tokens).unwrap();
        let full = layer_forward_full(&cfg, &w, 0, &h).unwrap();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let windowed =
            layer_forward_windowed(&cfg, &w, 0, &h, &positions, &full.k, &full.v).unwrap();
        for (a, b) in windowed.h_out.data().iter().zip(full.h_out.data().iter()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn windowed_single_row_softmax_sums_to_one() {
        let cfg = small_cfg();
        let w = init_weights(21, &cfg);
        let tokens = vec![1u32, 2, 3, 4];
        let h = embed(&cfg, &w, &tokens).unwrap();
        let full = layer_forward_full(&cfg, &w, 0, &h).unwrap();
        let h_one = embed_rows(&cfg, &w, &tokens, &[2]).unwrap();
        let out = layer_forward_windowed(&cfg, &w, 0, &h_one, &[2], &full.k, &full.v).unwrap();
        for s in &out.attn.s {
            let sum: f32 = s.row(0).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_one_kv_reproducible_from_embeddings() {
        let cfg = small_cfg();
        let w = init_weights(17, &cfg);
        let tokens = vec![6u32, 1, cfg.mask_token_id, 9];
        let h = embed(&cfg, &w, &tokens).unwrap();
        let full = layer_forward_full(&cfg, &w, 0, &h).unwrap();
        // Re-derive through the windowed path on a subset of positions.
        let h_sub = embed_rows(&cfg, &w, &tokens, &[1, 3]).unwrap();
        let windowed =
            layer_forward_windowed(&cfg, &w, 0, &h_sub, &[1, 3], &full.k, &full.v).unwrap();
        assert_eq!(windowed.k_new.row(0), full.k.row(1));
        assert_eq!(windowed.k_new.row(1), full.k.row(3));
        assert_eq!(windowed.v_new.row(0), full.v.row(1));
        assert_eq!(windowed.v_new.row(1), full.v.row(3));
    }

    #[test]
    fn logits_zero_hidden_is_uniform() {
        let cfg = small_cfg();
        let w = init_weights(19, &cfg);
        let h = Matrix::zeros(2, cfg.d_model);
        let dist = logits(&cfg, &w, &h).unwrap();
        let uniform = 1.0 / cfg.vocab_size as f32;
        for c in 0..cfg.vocab_size {
            assert!((dist.get(0, c) - uniform).abs() <= 1e-6);
        }
        assert_eq!(dist.row(0), dist.row(1));
    }

    #[test]
    fn logits_argmax_matches_bruteforce_scan() {
        let cfg = small_cfg();
        let w = init_weights(23, &cfg);
        let tokens = vec![3u32, 8];
        let h = embed(&cfg, &w, &tokens).unwrap();
        let dist = logits(&cfg, &w, &h).unwrap();
        for r in 0..2 {
            // Brute-force: normalize the row, dot against every embedding.
            let row = h.row(r);
            let mean: f32 = row.iter().sum::<f32>() / cfg.d_model as f32;
            let var: f32 =
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cfg.d_model as f32;
            let normed: Vec<f32> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
            let mut best = 0;
            let mut best_score = f32::NEG_INFINITY;
            for tok in 0..cfg.vocab_size {
                let mut acc = 0.0f32;
                for c in 0..cfg.d_model {
                    acc += normed[c] * w.token_embedding.get(tok, c);
                }
                if acc > best_score {
                    best_score = acc;
                    best = tok;
                }
            }
            assert_eq!(argmax(dist.row(r)).unwrap(), best);
        }
    }

    #[test]
    fn weight_bytes_round_trip_bitwise() {
        let cfg = small_cfg();
        let w = init_weights(29, &cfg);
        let bytes = weights_to_bytes(&cfg, &w);
        assert_eq!(&bytes[..4], WEIGHT_MAGIC);
        let again = weights_to_bytes(&cfg, &w);
        assert_eq!(bytes, again);
        let (cfg2, w2) = weights_from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
    }

    #[test]
    fn bad_magic_is_input_error() {
        let err = weights_from_bytes(b"NOPE....").unwrap_err();
        assert!(matches!(err, EdlmError::Input(_)));
    }
}
