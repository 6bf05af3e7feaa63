//! BLEU-1..4, ROUGE-L and CIDEr-D over token sequences.
//!
//! Everything is generic over the token type, so scores depend only on
//! token identity. CIDEr-D follows the usual COCO evaluation recipe:
//! TF-IDF n-gram vectors for n = 1..4, idf from per-image document
//! frequencies, count clipping against the reference vector and a
//! Gaussian length penalty with sigma = 6, scaled by 10.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const BLEU_SMOOTH_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped_matches<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_ref_len<T>(c: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Sentence-level BLEU-1..`max_n`; zero precisions are replaced by 1e-9.
pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, total) = clipped_matches(candidate, references, n);
        let p = if m == 0 || total == 0 {
            BLEU_SMOOTH_EPS
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln();
        out.push(bp * (log_sum / n as f64).exp());
    }
    Ok(out)
}

/// Unsmoothed corpus BLEU-1..`max_n`: clipped counts and lengths summed
/// over all pairs before the geometric mean.
pub fn corpus_bleu<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.len() != references.len() || references.iter().any(Vec::is_empty) {
        return Err(Error::EmptyReferences);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let (m, t) = clipped_matches(cand, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let bp = brevity_penalty(c_len, r_len);
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with beta = 1.2, maximized over references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut best = 0.0f64;
    for r in references {
        let lcs = lcs_len(candidate, r);
        if lcs == 0 {
            continue;
        }
        let p = lcs as f64 / candidate.len() as f64;
        let rec = lcs as f64 / r.len() as f64;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    Ok(best)
}

/// Per-image document frequencies of every 1..4-gram in the references.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats<T: Eq + Hash> {
    df: HashMap<Vec<T>, usize>,
    num_images: usize,
}

impl<T: Eq + Hash + Clone> CorpusStats<T> {
    pub fn df(&self, ngram: &[T]) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_ngrams(&self) -> usize {
        self.df.len()
    }
}

/// Each image contributes at most once to an n-gram's frequency.
pub fn build_corpus_stats<T: Eq + Hash + Clone>(reference_sets: &[Vec<Vec<T>>]) -> CorpusStats<T> {
    let mut df: HashMap<Vec<T>, usize> = HashMap::new();
    for refs in reference_sets {
        let mut seen: HashSet<&[T]> = HashSet::new();
        for r in refs {
            for n in 1..=MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    CorpusStats {
        df,
        num_images: reference_sets.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// Count clipping and Gaussian length penalty.
    #[default]
    D,
    Plain,
}

/// Per order, n-grams in first-occurrence order with an index for lookup,
/// so every floating-point sum runs in a fixed order.
struct TfIdf<'a, T> {
    vecs: Vec<Vec<(&'a [T], f64)>>,
    index: Vec<HashMap<&'a [T], usize>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a, T: Eq + Hash + Clone>(tokens: &'a [T], stats: &CorpusStats<T>) -> TfIdf<'a, T> {
    let log_n = (stats.num_images as f64).ln();
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut index = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut pos: HashMap<&[T], usize> = HashMap::new();
        let mut tf: Vec<(&[T], usize)> = Vec::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                let k = *pos.entry(w).or_insert_with(|| {
                    tf.push((w, 0));
                    tf.len() - 1
                });
                tf[k].1 += 1;
            }
        }
        let v: Vec<(&[T], f64)> = tf
            .into_iter()
            .map(|(g, tf)| {
                let df = (stats.df(g).max(1) as f64).ln();
                (g, tf as f64 * (log_n - df))
            })
            .collect();
        norms.push(v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt());
        vecs.push(v);
        index.push(pos);
    }
    TfIdf {
        vecs,
        index,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim<T: Eq + Hash>(hyp: &TfIdf<'_, T>, r: &TfIdf<'_, T>, variant: CiderVariant) -> f64 {
    let delta = hyp.len as f64 - r.len as f64;
    let penalty = match variant {
        CiderVariant::D => (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp(),
        CiderVariant::Plain => 1.0,
    };
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for &(g, hv) in &hyp.vecs[n] {
            let rv = r.index[n].get(g).map_or(0.0, |&k| r.vecs[n][k].1);
            val += match variant {
                CiderVariant::D => hv.min(rv) * rv,
                CiderVariant::Plain => hv * rv,
            };
        }
        if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= hyp.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

pub fn cider_with<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    stats: &CorpusStats<T>,
    variant: CiderVariant,
) -> Result<f64> {
    if stats.num_images == 0 {
        return Err(Error::EmptyStats);
    }
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let hyp = tfidf(candidate, stats);
    let sum: f64 = references
        .iter()
        .map(|r| cider_sim(&hyp, &tfidf(r, stats), variant))
        .sum();
    Ok(10.0 * sum / references.len() as f64)
}

pub fn cider_d<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    stats: &CorpusStats<T>,
) -> Result<f64> {
    cider_with(candidate, references, stats, CiderVariant::D)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub n_images: usize,
}

/// Corpus BLEU, mean ROUGE-L and mean CIDEr-D with document frequencies
/// taken from `references`.
pub fn evaluate<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<MetricReport> {
    if candidates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = build_corpus_stats(references);
    let b = corpus_bleu(candidates, references, MAX_N)?;
    let mut rouge = 0.0;
    let mut cider = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        rouge += rouge_l(c, r)?;
        cider += cider_d(c, r, &stats)?;
    }
    let n = candidates.len() as f64;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge / n,
        cider_d: cider / n,
        n_images: candidates.len(),
    })
}
