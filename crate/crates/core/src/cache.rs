//! Per-layer cache of keys, values, and layer-input hidden states over all
//! positions.
//!
//! `hidden[l]` stores the *input* of layer `l`, so `hidden[0]` is the
//! embedding matrix and the output of the last layer is never cached.
//! Positions outside the active window keep whatever rows the last full
//! refresh (or window write) produced, including MASK positions far to the
//! right of the decode front.

use std::path::Path;

use crate::error::{EdlmError, Result};
use crate::kernel::Matrix;
use crate::model::FullLayerOut;

/// One layer's recomputed tensors destined for `overwrite_from_layer`.
#[derive(Debug, Clone)]
pub struct RefreshedLayer {
    pub layer: usize,
    /// Input hidden state of this layer over all positions.
    pub h_in: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Cached K/V/H per layer over every position.
#[derive(Debug, Clone)]
pub struct CacheStore {
    n_total: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    hidden: Vec<Matrix>,
    last_refresh_step: Vec<u64>,
}

impl CacheStore {
    /// Builds the cache from the step-0 full forward trace: embeddings plus
    /// one `FullLayerOut` per layer.
    pub fn from_full_forward(embeddings: Matrix, layer_outs: &[FullLayerOut]) -> Self {
        let n_total = embeddings.rows();
        let num_layers = layer_outs.len();
        let mut hidden = Vec::with_capacity(num_layers);
        let mut keys = Vec::with_capacity(num_layers);
        let mut values = Vec::with_capacity(num_layers);
        hidden.push(embeddings);
        for (l, out) in layer_outs.iter().enumerate() {
            keys.push(out.k.clone());
            values.push(out.v.clone());
            if l + 1 < num_layers {
                hidden.push(out.h_out.clone());
            }
        }
        Self {
            n_total,
            keys,
            values,
            hidden,
            last_refresh_step: vec![0; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.values[layer]
    }

    pub fn hidden(&self, layer: usize) -> &Matrix {
        &self.hidden[layer]
    }

    pub fn last_refresh_step(&self, layer: usize) -> u64 {
        self.last_refresh_step[layer]
    }

    /// Overwrites K/V rows of `layer` and hidden rows of `layer + 1` at the
    /// given positions. `h_next` rows feed the next layer's cached input and
    /// are ignored for the last layer.
    pub fn write_window(
        &mut self,
        layer: usize,
        positions: &[usize],
        k_new: &Matrix,
        v_new: &Matrix,
        h_next: &Matrix,
    ) -> Result<()> {
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= self.n_total {
                return Err(EdlmError::internal(format!(
                    "write_window position {pos} out of range ({})",
                    self.n_total
                )));
            }
            self.keys[layer].copy_row_from(pos, k_new.row(r));
            self.values[layer].copy_row_from(pos, v_new.row(r));
            if layer + 1 < self.hidden.len() {
                self.hidden[layer + 1].copy_row_from(pos, h_next.row(r));
            }
        }
        Ok(())
    }

    /// Refreshes rows of the layer-`layer` input hidden state (used each
    /// step to keep `hidden[0]` equal to the current embeddings).
    pub fn write_hidden_rows(
        &mut self,
        layer: usize,
        positions: &[usize],
        rows: &Matrix,
    ) -> Result<()> {
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= self.n_total {
                return Err(EdlmError::internal(format!(
                    "write_hidden_rows position {pos} out of range ({})",
                    self.n_total
                )));
            }
            self.hidden[layer].copy_row_from(pos, rows.row(r));
        }
        Ok(())
    }

    /// Full hidden matrix for `layer`: rows at `window_positions` come from
    /// `computed`, everything else from the cache.
    pub fn assemble_hidden(
        &self,
        layer: usize,
        window_positions: &[usize],
        computed: &Matrix,
    ) -> Matrix {
        let mut out = self.hidden[layer].clone();
        for (r, &pos) in window_positions.iter().enumerate() {
            out.copy_row_from(pos, computed.row(r));
        }
        out
    }

    /// Replaces entire layers starting at `from_layer`; layers below stay
    /// untouched. `items` must cover layers `from_layer..num_layers` in
    /// order, each with full-position tensors.
    pub fn overwrite_from_layer(
        &mut self,
        from_layer: usize,
        items: &[RefreshedLayer],
        step: u64,
    ) -> Result<()> {
        if from_layer + items.len() != self.num_layers() {
            return Err(EdlmError::internal(format!(
                "overwrite_from_layer({from_layer}) expects {} items, got {}",
                self.num_layers() - from_layer,
                items.len()
            )));
        }
        for (offset, item) in items.iter().enumerate() {
            let l = from_layer + offset;
            if item.layer != l {
                return Err(EdlmError::internal(format!(
                    "overwrite_from_layer item {} labeled layer {}, expected {}",
                    offset, item.layer, l
                )));
            }
            if item.k.rows() != self.n_total {
                return Err(EdlmError::internal(
                    "overwrite_from_layer tensors must cover all positions",
                ));
            }
            self.keys[l] = item.k.clone();
            self.values[l] = item.v.clone();
            self.hidden[l] = item.h_in.clone();
            self.last_refresh_step[l] = step;
        }
        Ok(())
    }

    /// Debug dump: per-layer K/V/H tensors as raw f32 LE, one file each.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for l in 0..self.num_layers() {
            for (tag, m) in [("k", &self.keys[l]), ("v", &self.values[l]), ("h", &self.hidden[l])]
            {
                let mut bytes = Vec::with_capacity(m.data().len() * 4);
                for &x in m.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
                std::fs::write(dir.join(format!("layer{l:03}_{tag}.f32le")), bytes)?;
            }
        }
        Ok(())
    }
}
