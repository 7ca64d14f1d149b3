//! Recomputes the tracked-stability measurement from a dumped trace using
//! only the dump files (test-local parsing, no library readers), and checks
//! it against the validation lab's reported value.

use edlm_core::decoder::{run_decode_observed, RunParams};
use edlm_core::model::{init_weights, ModelConfig};
use edlm_core::policy::{PolicyConfig, PolicyKind};
use edlm_core::rng::{Rng, STREAM_PROMPT};
use edlm_core::theory::{validate_theory, TheoryRunConfig};
use edlm_core::trace::TraceDumper;

struct Tensor {
    rows: usize,
    cols: usize,
    offset: usize,
}

struct Dump {
    data: Vec<u8>,
    tensors: std::collections::HashMap<(u64, usize, String), Tensor>,
    steps: Vec<(u64, Vec<usize>, Vec<usize>)>,
    num_layers: usize,
}

impl Dump {
    fn load(dir: &std::path::Path) -> Self {
        let data = std::fs::read(dir.join("data.bin")).unwrap();
        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("index.json")).unwrap())
                .unwrap();
        let mut tensors = std::collections::HashMap::new();
        let mut num_layers = 0usize;
        for e in index["tensors"].as_array().unwrap() {
            let t = e["t"].as_u64().unwrap();
            let layer = e["layer"].as_u64().unwrap() as usize;
            num_layers = num_layers.max(layer + 1);
            tensors.insert(
                (t, layer, e["tensor"].as_str().unwrap().to_string()),
                Tensor {
                    rows: e["rows"].as_u64().unwrap() as usize,
                    cols: e["cols"].as_u64().unwrap() as usize,
                    offset: e["offset"].as_u64().unwrap() as usize,
                },
            );
        }
        let steps = index["steps"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| {
                let t = s["t"].as_u64().unwrap();
                let win: Vec<usize> = s["window"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_u64().unwrap() as usize)
                    .collect();
                let dec: Vec<usize> = s["decoded"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_u64().unwrap() as usize)
                    .collect();
                (t, win, dec)
            })
            .collect();
        Self { data, tensors, steps, num_layers }
    }

    fn values(&self, t: u64, layer: usize, tensor: &str) -> (usize, usize, Vec<f32>) {
        let e = &self.tensors[&(t, layer, tensor.to_string())];
        let bytes = &self.data[e.offset..e.offset + e.rows * e.cols * 4];
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        (e.rows, e.cols, vals)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na < 1e-24 || nb < 1e-24 {
        return 1.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[test]
fn tracked_stability_recomputed_from_dump_matches_report() {
    let cfg = ModelConfig::new(3, 2, 16, 32, 48, 64).unwrap();
    let weights = init_weights(71, &cfg);
    let mut rng = Rng::with_stream(71, STREAM_PROMPT);
    let prompt: Vec<u32> = (0..8).map(|_| rng.below(cfg.vocab_size as u64 - 2) as u32).collect();
    let gen_len = 10;
    let beta = 4;

    // Lab run.
    let trc = TheoryRunConfig {
        seed: 71,
        prompt: prompt.clone(),
        gen_len,
        beta,
        top_k: 1,
        lipschitz_trials: 10,
        lipschitz_dims: vec![4],
        row_slack: 1e-5,
        logit_slack: 1e-5,
        kv_slack: 1e-5,
    };
    let summary = validate_theory(&cfg, &weights, &trc).unwrap().report.drift.unwrap();

    // Dump run on identical inputs.
    let dir = tempfile::tempdir().unwrap();
    let mut policy = PolicyConfig::new(PolicyKind::NoCache);
    policy.beta = beta;
    let params = RunParams::new(prompt, gen_len, 71, policy);
    let mut dumper = TraceDumper::create(dir.path()).unwrap();
    run_decode_observed(&cfg, &weights, &params, &mut dumper).unwrap();
    dumper.finish().unwrap();

    // Recompute both stability means from the raw files.
    let dump = Dump::load(dir.path());
    assert_eq!(dump.num_layers, cfg.num_layers);
    let mut tracked_sum = 0.0f64;
    let mut tracked_n = 0u64;
    let mut all_sum = 0.0f64;
    let mut all_n = 0u64;
    for i in 1..dump.steps.len() {
        let (t, window, decoded) = &dump.steps[i];
        let (pt, _, _) = &dump.steps[i - 1];
        for l in 0..dump.num_layers {
            let (_, s_cols, s) = dump.values(*t, l, "s");
            let (_, k_cols, k_cur) = dump.values(*t, l, "k");
            let (_, _, k_prev) = dump.values(*pt, l, "k");
            // Column sums over window rows, top-1 by mass then lowest index.
            let mut best = usize::MAX;
            let mut best_mass = f64::NEG_INFINITY;
            for &cand in decoded {
                let mass: f64 = window.iter().map(|&q| s[q * s_cols + cand] as f64).sum();
                if mass > best_mass {
                    best_mass = mass;
                    best = cand;
                }
            }
            let row = |data: &[f32], pos: usize| data[pos * k_cols..(pos + 1) * k_cols].to_vec();
            tracked_sum += cosine(&row(&k_cur, best), &row(&k_prev, best));
            tracked_n += 1;
            for &pos in decoded {
                all_sum += cosine(&row(&k_cur, pos), &row(&k_prev, pos));
                all_n += 1;
            }
        }
    }
    let tracked_mean = tracked_sum / tracked_n as f64;
    let all_mean = all_sum / all_n as f64;
    assert!(
        (tracked_mean - summary.tracked_stability_tracked).abs() <= 1e-6,
        "tracked: {} vs {}",
        tracked_mean,
        summary.tracked_stability_tracked
    );
    assert!(
        (all_mean - summary.tracked_stability_all).abs() <= 1e-6,
        "all: {} vs {}",
        all_mean,
        summary.tracked_stability_all
    );
}
