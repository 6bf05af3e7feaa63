#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenecap::dataio::sfat::ImageRecord;
use scenecap::decoder::{ModelConfig, ModelParams, SceneMode};

pub fn config(h: usize, e: usize, a: usize, s: usize, c: usize, ck: usize, q: usize, k: usize) -> ModelConfig {
    ModelConfig {
        hidden: h,
        embed: e,
        attn: a,
        scenes: s,
        region_dim: c,
        concept_dim: ck,
        vocab_size: q,
        num_concepts: k + 2,
        max_concepts: k,
        max_len: 5,
        tie_output: false,
        length_norm: false,
        scene_mode: SceneMode::Full,
    }
}

/// H=8, E=6, A=5, s=4, C=7, C_k=6, Q=20, K=3.
pub fn tiny_config() -> ModelConfig {
    config(8, 6, 5, 4, 7, 6, 20, 3)
}

/// An image with `l` regions and `k` concepts, drawn from `seed`.
pub fn random_image(cfg: &ModelConfig, l: usize, k: usize, seed: u64) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.region_dim;
    let raw: Vec<f32> = (0..cfg.scenes).map(|_| rng.gen_range(0.05f32..1.0)).collect();
    let sum: f32 = raw.iter().sum();
    let mut ids: Vec<u32> = (0..cfg.num_concepts as u32).collect();
    for i in 0..ids.len() {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    ImageRecord {
        id: format!("rand-{seed}"),
        region_dim: c,
        regions: (0..l * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        concepts: ids[..k].iter().map(|&id| (id, rng.gen_range(0.2f32..1.0))).collect(),
        scene: raw.iter().map(|v| v / sum).collect(),
        captions: vec![],
        raw_captions: vec![],
        references: vec![],
    }
}

/// Overwrites every parameter with uniform draws in `[-range, range]`.
pub fn randomize(params: &mut ModelParams, range: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in params.store.values_mut() {
        for v in m.data_mut() {
            *v = rng.gen_range(-range..=range);
        }
    }
}

pub fn random_params(cfg: &ModelConfig, range: f64, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    randomize(&mut p, range, seed ^ 0xabcdef);
    p
}

pub fn assert_simplex(p: &[f64], tol: f64) {
    assert!(p.iter().all(|&v| v >= 0.0), "{p:?}");
    let s: f64 = p.iter().sum();
    assert!((s - 1.0).abs() <= tol, "sum {s}");
}

/// Writes a synthetic corpus to a temporary directory and loads it back.
pub fn synth_dataset(cfg: &scenecap::dataio::synth::SynthConfig) -> (tempfile::TempDir, scenecap::dataio::manifest::Dataset) {
    use scenecap::dataio::manifest::{load_dataset, save_dataset};
    let dir = tempfile::tempdir().unwrap();
    let syn = scenecap::dataio::synth::gen_synthetic(cfg).unwrap();
    let paths = save_dataset(dir.path(), &syn.records, syn.dims, syn.splits).unwrap();
    let ds = load_dataset(&paths.manifest, 1).unwrap();
    (dir, ds)
}

/// A model sized for `ds` with every width set to `h`.
pub fn model_for(ds: &scenecap::dataio::manifest::Dataset, h: usize) -> ModelConfig {
    let dims = &ds.manifest.dims;
    let mut mc = ModelConfig::with_data_dims(dims.region, dims.s, ds.vocab.len(), ds.concept_id_bound(), dims.k_max);
    mc.hidden = h;
    mc.embed = h;
    mc.attn = h;
    mc.concept_dim = h;
    mc
}
