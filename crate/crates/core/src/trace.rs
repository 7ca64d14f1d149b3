//! Binary trace dumps for external analysis.
//!
//! One `data.bin` holds raw f32 LE tensors appended in visit order; an
//! `index.json` maps (step, layer, tensor) to byte offsets and carries the
//! per-step window and decoded sets. Tensors per layer: `k`, `v`, `h` (the
//! post-LN projection input) and `s` (head-averaged attention rows).
//! Dumps are only meaningful for full-coverage runs, so the writer is used
//! with the recompute-everything policy.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::decoder::{DecodeObserver, LayerObservation, StepContext};
use crate::error::Result;
use crate::kernel::Matrix;
use crate::model::head_average;

struct TensorEntry {
    t: u64,
    layer: usize,
    tensor: &'static str,
    rows: usize,
    cols: usize,
    offset: u64,
    len: u64,
}

struct StepEntry {
    t: u64,
    window: Vec<usize>,
    decoded: Vec<usize>,
}

/// Observer that streams per-layer tensors to disk.
pub struct TraceDumper {
    dir: PathBuf,
    data: BufWriter<File>,
    offset: u64,
    tensors: Vec<TensorEntry>,
    steps: Vec<StepEntry>,
    current_step: u64,
    io_error: Option<std::io::Error>,
}

impl TraceDumper {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let data = BufWriter::new(File::create(dir.join("data.bin"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            data,
            offset: 0,
            tensors: Vec::new(),
            steps: Vec::new(),
            current_step: 0,
            io_error: None,
        })
    }

    fn write_tensor(&mut self, t: u64, layer: usize, tensor: &'static str, m: &Matrix) {
        if self.io_error.is_some() {
            return;
        }
        let mut bytes = Vec::with_capacity(m.data().len() * 4);
        for &x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        if let Err(e) = self.data.write_all(&bytes) {
            self.io_error = Some(e);
            return;
        }
        self.tensors.push(TensorEntry {
            t,
            layer,
            tensor,
            rows: m.rows(),
            cols: m.cols(),
            offset: self.offset,
            len: bytes.len() as u64,
        });
        self.offset += bytes.len() as u64;
    }

    /// Flushes the data file and writes the JSON index.
    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.io_error.take() {
            return Err(e.into());
        }
        self.data.flush()?;
        let mut s = String::from("{\n  \"tensors\": [\n");
        for (i, e) in self.tensors.iter().enumerate() {
            let _ = write!(
                s,
                "    {{\"t\": {}, \"layer\": {}, \"tensor\": \"{}\", \"rows\": {}, \
                 \"cols\": {}, \"offset\": {}, \"len\": {}}}{}\n",
                e.t,
                e.layer,
                e.tensor,
                e.rows,
                e.cols,
                e.offset,
                e.len,
                if i + 1 < self.tensors.len() { "," } else { "" }
            );
        }
        s.push_str("  ],\n  \"steps\": [\n");
        for (i, st) in self.steps.iter().enumerate() {
            let window: Vec<String> = st.window.iter().map(|x| x.to_string()).collect();
            let decoded: Vec<String> = st.decoded.iter().map(|x| x.to_string()).collect();
            let _ = write!(
                s,
                "    {{\"t\": {}, \"window\": [{}], \"decoded\": [{}]}}{}\n",
                st.t,
                window.join(","),
                decoded.join(","),
                if i + 1 < self.steps.len() { "," } else { "" }
            );
        }
        s.push_str("  ]\n}\n");
        std::fs::write(self.dir.join("index.json"), s)?;
        Ok(())
    }
}

impl DecodeObserver for TraceDumper {
    fn on_layer(&mut self, t: u64, obs: &LayerObservation) {
        self.current_step = t;
        let s_avg = head_average(obs.s);
        self.write_tensor(t, obs.layer, "k", obs.k);
        self.write_tensor(t, obs.layer, "v", obs.v);
        self.write_tensor(t, obs.layer, "h", obs.norm_input);
        self.write_tensor(t, obs.layer, "s", &s_avg);
    }

    fn on_step_end(&mut self, ctx: &StepContext) {
        self.steps.push(StepEntry {
            t: ctx.t,
            window: ctx.window.to_vec(),
            decoded: ctx.decoded_before.to_vec(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{run_decode_observed, RunParams};
    use crate::model::{init_weights, ModelConfig};
    use crate::policy::{PolicyConfig, PolicyKind};

    #[test]
    fn dump_writes_consistent_index() {
        let cfg = ModelConfig::new(2, 2, 8, 16, 32, 24).unwrap();
        let w = init_weights(3, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut dumper = TraceDumper::create(dir.path()).unwrap();
        let params = RunParams::new(vec![1, 2, 3], 4, 3, PolicyConfig::new(PolicyKind::NoCache));
        run_decode_observed(&cfg, &w, &params, &mut dumper).unwrap();
        dumper.finish().unwrap();

        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap())
                .unwrap();
        let tensors = index["tensors"].as_array().unwrap();
        let steps = index["steps"].as_array().unwrap();
        assert!(!steps.is_empty());
        // 4 tensors per layer per step.
        assert_eq!(tensors.len(), steps.len() * cfg.num_layers * 4);

        // Entries tile the data file exactly.
        let data = std::fs::read(dir.path().join("data.bin")).unwrap();
        let mut expect_offset = 0u64;
        for e in tensors {
            assert_eq!(e["offset"].as_u64().unwrap(), expect_offset);
            let len = e["len"].as_u64().unwrap();
            let rows = e["rows"].as_u64().unwrap();
            let cols = e["cols"].as_u64().unwrap();
            assert_eq!(len, rows * cols * 4);
            expect_offset += len;
        }
        assert_eq!(expect_offset, data.len() as u64);
    }
}
