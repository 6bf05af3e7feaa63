//! Synthetic captioning corpus with a planted scene-to-keyword rule.
//!
//! Every image has one primary concept (its lowest concept id) and a scene
//! id `z`. The caption reads `a <concept> <keyword> on the <place>` with
//! `with a <concept>` appended for each further concept. The keyword is a
//! fixed function of `(z, primary concept)` and the place a function of `z`.
//!
//! Regions hold one cue per *candidate* scene (scene prototype + keyword
//! prototype for that scene), one region per concept, and background
//! noise. The cue set is identical for every scene, so only the scene
//! vector tells which cue is the right one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::manifest::Splits;
use crate::dataio::sfat::{Dims, ImageRecord};
use crate::dataio::vocab::tokenize;
use crate::error::{Error, Result};

pub const MAX_CONCEPTS_PER_IMAGE: usize = 3;

const NOUNS: [&str; 12] = [
    "dog", "cat", "man", "woman", "horse", "bird", "child", "cow", "sheep", "bear", "boy", "girl",
];
const KEYWORDS: [&str; 12] = [
    "laying", "sleeping", "sitting", "standing", "running", "eating", "playing", "walking",
    "jumping", "resting", "waiting", "looking",
];
const PLACES: [&str; 8] = [
    "bed", "grass", "street", "kitchen", "beach", "field", "road", "couch",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub scenes: usize,
    pub concepts: usize,
    pub region_dim: usize,
    /// Recorded in the manifest; the model learns concept embeddings.
    pub concept_dim: usize,
    /// Inclusive bounds on regions per image.
    pub min_regions: usize,
    pub max_regions: usize,
    pub captions_per_image: usize,
    pub val: usize,
    pub test: usize,
    /// Mass placed on the true scene before spreading the rest uniformly.
    pub scene_peak: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 20,
            scenes: 4,
            concepts: 6,
            region_dim: 16,
            concept_dim: 16,
            min_regions: 7,
            max_regions: 9,
            captions_per_image: 1,
            val: 0,
            test: 0,
            scene_peak: 0.9,
            noise: 0.1,
        }
    }
}

pub fn noun(concept: usize) -> String {
    NOUNS.get(concept).map_or_else(|| format!("obj{concept}"), |s| s.to_string())
}

pub fn place(scene: usize) -> String {
    PLACES.get(scene).map_or_else(|| format!("place{scene}"), |s| s.to_string())
}

fn keyword_index(scene: usize, concept: usize, scenes: usize) -> usize {
    (scene + 2 * concept) % (2 * scenes)
}

/// The planted keyword for `(scene, primary concept)`. Distinct scenes give
/// distinct keywords for the same concept.
pub fn keyword(scene: usize, concept: usize, scenes: usize) -> String {
    let k = keyword_index(scene, concept, scenes);
    KEYWORDS.get(k).map_or_else(|| format!("kw{k}"), |s| s.to_string())
}

/// Position of the keyword in a generated caption.
pub const KEYWORD_SLOT: usize = 2;

pub fn caption_for(scene: usize, concepts: &[u32], scenes: usize) -> String {
    let c0 = concepts[0] as usize;
    let mut s = format!(
        "a {} {} on the {}",
        noun(c0),
        keyword(scene, c0, scenes),
        place(scene)
    );
    for &c in &concepts[1..] {
        s.push_str(&format!(" with a {}", noun(c as usize)));
    }
    s
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub records: Vec<ImageRecord>,
    pub dims: Dims,
    pub splits: Splits,
    /// True scene id per record.
    pub scene_ids: Vec<usize>,
}

fn uniform_vec(rng: &mut impl Rng, n: usize, range: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-range..=range)).collect()
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    let counts = [
        ("images", cfg.images),
        ("scenes", cfg.scenes),
        ("concepts", cfg.concepts),
        ("region_dim", cfg.region_dim),
        ("concept_dim", cfg.concept_dim),
        ("captions_per_image", cfg.captions_per_image),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    let k_max = MAX_CONCEPTS_PER_IMAGE.min(cfg.concepts);
    if cfg.min_regions < cfg.scenes + k_max || cfg.max_regions < cfg.min_regions {
        return Err(Error::Config(format!(
            "region range {}..={} must start at scenes + {k_max} = {}",
            cfg.min_regions,
            cfg.max_regions,
            cfg.scenes + k_max
        )));
    }
    if cfg.val + cfg.test > cfg.images {
        return Err(Error::Config("val + test exceeds image count".into()));
    }
    if !(0.0..=1.0).contains(&cfg.scene_peak) {
        return Err(Error::Config("scene_peak must lie in [0, 1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.region_dim;
    let scene_proto: Vec<Vec<f64>> = (0..cfg.scenes).map(|_| uniform_vec(&mut rng, c, 1.0)).collect();
    let action_proto: Vec<Vec<f64>> =
        (0..2 * cfg.scenes).map(|_| uniform_vec(&mut rng, c, 1.0)).collect();
    let concept_proto: Vec<Vec<f64>> =
        (0..cfg.concepts).map(|_| uniform_vec(&mut rng, c, 1.0)).collect();

    let width = (cfg.images.max(1) - 1).to_string().len();
    let mut records = Vec::with_capacity(cfg.images);
    let mut scene_ids = Vec::with_capacity(cfg.images);
    for n in 0..cfg.images {
        let z = rng.gen_range(0..cfg.scenes);
        let k = rng.gen_range(1..=k_max);
        let mut ids: Vec<u32> = (0..cfg.concepts as u32).collect();
        ids.shuffle(&mut rng);
        ids.truncate(k);
        ids.sort_unstable();
        let c0 = ids[0] as usize;

        let l = rng.gen_range(cfg.min_regions..=cfg.max_regions);
        let mut regions: Vec<Vec<f64>> = Vec::with_capacity(l);
        for j in 0..cfg.scenes {
            let action = &action_proto[keyword_index(j, c0, cfg.scenes)];
            regions.push(
                (0..c)
                    .map(|d| 0.5 * scene_proto[j][d] + action[d] + rng.gen_range(-cfg.noise..=cfg.noise))
                    .collect(),
            );
        }
        for &id in &ids {
            let proto = &concept_proto[id as usize];
            regions.push(
                proto
                    .iter()
                    .map(|v| v + rng.gen_range(-cfg.noise..=cfg.noise))
                    .collect(),
            );
        }
        while regions.len() < l {
            regions.push(uniform_vec(&mut rng, c, 3.0 * cfg.noise));
        }
        regions.shuffle(&mut rng);

        let concepts: Vec<(u32, f32)> = ids
            .iter()
            .map(|&id| (id, rng.gen_range(0.7f32..=1.0)))
            .collect();
        let rest = (1.0 - cfg.scene_peak) / cfg.scenes as f64;
        let scene: Vec<f32> = (0..cfg.scenes)
            .map(|j| (if j == z { cfg.scene_peak + rest } else { rest }) as f32)
            .collect();
        let raw = caption_for(z, &ids, cfg.scenes);
        let raw_captions = vec![raw; cfg.captions_per_image];
        records.push(ImageRecord {
            id: format!("img-{n:0width$}"),
            region_dim: c,
            regions: regions.into_iter().flatten().map(|v| v as f32).collect(),
            concepts,
            scene,
            captions: Vec::new(),
            references: raw_captions.iter().map(|s| tokenize(s)).collect(),
            raw_captions,
        });
        scene_ids.push(z);
    }

    let n_train = cfg.images - cfg.val - cfg.test;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let splits = Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + cfg.val].to_vec(),
        test: ids[n_train + cfg.val..].to_vec(),
    };
    let dims = Dims {
        region: c,
        concept: cfg.concept_dim,
        s: cfg.scenes,
        k_max,
    };
    Ok(SynthDataset {
        records,
        dims,
        splits,
        scene_ids,
    })
}
