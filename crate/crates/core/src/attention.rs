//! Scene-factored attention over region features and object concepts.
//!
//! The hidden-state projection of ordinary soft attention is replaced by
//! `U_h * diag(v_scene) * V_h`, so the query that drives both attention
//! branches is modulated by the scene posterior. The product is never
//! materialized; [`scene_project`] applies the three factors in turn.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lstm::glorot;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Matrix;

/// `u_h`: A x s, `v_h`: s x H, `w_va`: A x C, `w_a`: A x 1,
/// `w_vb`: A x C_k, `w_b`: A x 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnParams {
    pub u_h: ParamId,
    pub v_h: ParamId,
    pub w_va: ParamId,
    pub w_a: ParamId,
    pub w_vb: ParamId,
    pub w_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub attn: usize,
    pub scenes: usize,
    pub hidden: usize,
    pub region: usize,
    pub concept: usize,
}

impl AttnParams {
    pub fn init(store: &mut ParamStore, dims: AttnDims, rng: &mut impl Rng) -> Self {
        let mut add = |name: &str, rows: usize, cols: usize, rng: &mut _| {
            store.add(format!("attn.{name}"), glorot(rng, rows, cols))
        };
        Self {
            u_h: add("u_h", dims.attn, dims.scenes, rng),
            v_h: add("v_h", dims.scenes, dims.hidden, rng),
            w_va: add("w_va", dims.attn, dims.region, rng),
            w_a: add("w_a", dims.attn, 1, rng),
            w_vb: add("w_vb", dims.attn, dims.concept, rng),
            w_b: add("w_b", dims.attn, 1, rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.u_h, self.v_h, self.w_va, self.w_a, self.w_vb, self.w_b]
    }

    /// Dense `U_h * diag(scene) * V_h` (A x H); reference path only.
    pub fn dense_projection(&self, store: &ParamStore, scene: &[f64]) -> Result<Matrix> {
        let u = store.get(self.u_h);
        if scene.len() != u.cols() {
            return Err(Error::Shape {
                op: "dense_projection",
                left: u.shape(),
                right: (scene.len(), 1),
            });
        }
        let us = Matrix::from_fn(u.rows(), u.cols(), |r, c| u.get(r, c) * scene[c]);
        us.matmul(store.get(self.v_h))
    }
}

/// Scene-classifier posterior over `s` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneVector(Vec<f64>);

impl SceneVector {
    /// Normalizes nonnegative scores to sum to one.
    pub fn normalized(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Invalid("empty scene vector".into()));
        }
        if scores.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("scene scores must be finite and nonnegative".into()));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid("scene scores sum to zero".into()));
        }
        Ok(Self(scores.iter().map(|v| v / total).collect()))
    }

    pub fn uniform(s: usize) -> Self {
        Self(vec![1.0 / s as f64; s])
    }

    /// Unnormalized vector, used for ablations such as the all-zero scene.
    pub fn raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Detected object concepts: `K` embeddings of dimension `C_k` with
/// detection scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    pub vectors: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

/// Attention results for one decoding step, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnOutput {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub v_hat_conv: Vec<f64>,
    pub v_hat_obj: Vec<f64>,
    pub v_hat: Vec<f64>,
}

/// Attention results as tape nodes. `alpha` and `beta` are row vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnNodes {
    pub alpha: NodeId,
    pub beta: NodeId,
    pub v_hat_conv: NodeId,
    pub v_hat_obj: NodeId,
    pub v_hat: NodeId,
}

impl AttnNodes {
    pub fn values(&self, tape: &Tape<'_>) -> AttnOutput {
        let get = |n: NodeId| tape.value(n).data().to_vec();
        AttnOutput {
            alpha: get(self.alpha),
            beta: get(self.beta),
            v_hat_conv: get(self.v_hat_conv),
            v_hat_obj: get(self.v_hat_obj),
            v_hat: get(self.v_hat),
        }
    }
}

/// `g = U_h * (scene ⊙ (V_h * h1))`, an A x 1 node.
pub fn scene_project(
    tape: &mut Tape<'_>,
    scene: NodeId,
    h1: NodeId,
    p: &AttnParams,
) -> Result<NodeId> {
    let v = tape.param(p.v_h);
    let vh = tape.matmul(v, h1)?;
    let scaled = tape.mul(scene, vh)?;
    let u = tape.param(p.u_h);
    tape.matmul(u, scaled)
}

/// `W * feats` for a feature block laid out one item per column. This is
/// the step-independent half of the attention logits.
pub fn project_items(tape: &mut Tape<'_>, w: ParamId, feats: NodeId) -> Result<NodeId> {
    let w = tape.param(w);
    tape.matmul(w, feats)
}

/// Softmax of `w^T tanh(projected + g)` over columns; returns the 1 x N
/// weight row.
fn attention_weights(
    tape: &mut Tape<'_>,
    projected: NodeId,
    g: NodeId,
    w: ParamId,
) -> Result<NodeId> {
    let pre = tape.add_col_broadcast(projected, g)?;
    let act = tape.tanh(pre);
    let w = tape.param(w);
    let logits = tape.t_matmul(w, act)?;
    tape.softmax(logits)
}

/// Region attention given `W_va * R` already on the tape. `regions` is
/// C x L, one region per column. Returns `(alpha, v_hat_conv)`.
pub fn attend_projected_regions(
    tape: &mut Tape<'_>,
    regions: NodeId,
    projected: NodeId,
    g: NodeId,
    p: &AttnParams,
) -> Result<(NodeId, NodeId)> {
    if tape.value(regions).cols() == 0 {
        return Err(Error::NoRegions);
    }
    let alpha = attention_weights(tape, projected, g, p.w_a)?;
    let ctx = tape.matmul_t(regions, alpha)?;
    Ok((alpha, ctx))
}

/// `a_i = w_a^T tanh(W_va v_i + g)`, `alpha = softmax(a)`,
/// `v_hat_conv = sum_i alpha_i v_i`.
pub fn attend_regions(
    tape: &mut Tape<'_>,
    regions: NodeId,
    g: NodeId,
    p: &AttnParams,
) -> Result<(NodeId, NodeId)> {
    if tape.value(regions).cols() == 0 {
        return Err(Error::NoRegions);
    }
    let projected = project_items(tape, p.w_va, regions)?;
    attend_projected_regions(tape, regions, projected, g, p)
}

/// Concept attention given `W_vb * C` already on the tape. `concepts` is
/// C_k x K and `scores` is 1 x K. Returns `(beta, v_hat_obj)` where
/// `v_hat_obj = sum_j beta_j * score_j * c_j`.
pub fn attend_projected_concepts(
    tape: &mut Tape<'_>,
    concepts: NodeId,
    scores: NodeId,
    projected: NodeId,
    g: NodeId,
    p: &AttnParams,
) -> Result<(NodeId, NodeId)> {
    if tape.value(concepts).cols() == 0 {
        return Err(Error::NoConcepts);
    }
    let beta = attention_weights(tape, projected, g, p.w_b)?;
    let weighted = tape.mul(beta, scores)?;
    let ctx = tape.matmul_t(concepts, weighted)?;
    Ok((beta, ctx))
}

pub fn attend_concepts(
    tape: &mut Tape<'_>,
    concepts: NodeId,
    scores: NodeId,
    g: NodeId,
    p: &AttnParams,
) -> Result<(NodeId, NodeId)> {
    if tape.value(concepts).cols() == 0 {
        return Err(Error::NoConcepts);
    }
    let projected = project_items(tape, p.w_vb, concepts)?;
    attend_projected_concepts(tape, concepts, scores, projected, g, p)
}

/// `[v_hat_conv, v_hat_obj]`.
pub fn fuse(v_hat_conv: &[f64], v_hat_obj: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v_hat_conv.len() + v_hat_obj.len());
    out.extend_from_slice(v_hat_conv);
    out.extend_from_slice(v_hat_obj);
    out
}

/// Items as columns of a `dim x n` matrix.
pub fn columns_matrix(items: &[Vec<f64>]) -> Result<Matrix> {
    let dim = items.first().map_or(0, Vec::len);
    if let Some(bad) = items.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape {
            op: "columns_matrix",
            left: (dim, 1),
            right: (bad.len(), 1),
        });
    }
    Ok(Matrix::from_fn(dim, items.len(), |r, c| items[c][r]))
}

pub fn scene_project_values(
    store: &ParamStore,
    p: &AttnParams,
    scene: &SceneVector,
    h1: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let s = tape.leaf(Matrix::column(scene.as_slice().to_vec()));
    let h = tape.leaf(Matrix::column(h1.to_vec()));
    let g = scene_project(&mut tape, s, h, p)?;
    Ok(tape.value(g).data().to_vec())
}

pub fn attend_regions_values(
    store: &ParamStore,
    p: &AttnParams,
    regions: &[Vec<f64>],
    g: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    let mut tape = Tape::new(store);
    let r = tape.leaf(columns_matrix(regions)?);
    let g = tape.leaf(Matrix::column(g.to_vec()));
    let (a, v) = attend_regions(&mut tape, r, g, p)?;
    Ok((tape.value(a).data().to_vec(), tape.value(v).data().to_vec()))
}

pub fn attend_concepts_values(
    store: &ParamStore,
    p: &AttnParams,
    concepts: &ConceptSet,
    g: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if concepts.vectors.is_empty() {
        return Err(Error::NoConcepts);
    }
    let mut tape = Tape::new(store);
    let c = tape.leaf(columns_matrix(&concepts.vectors)?);
    let s = tape.leaf(Matrix::row(concepts.scores.clone()));
    let g = tape.leaf(Matrix::column(g.to_vec()));
    let (b, v) = attend_concepts(&mut tape, c, s, g, p)?;
    Ok((tape.value(b).data().to_vec(), tape.value(v).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::lstm::uniform;
    use crate::tensor::{dot, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: AttnDims = AttnDims {
        attn: 5,
        scenes: 4,
        hidden: 6,
        region: 3,
        concept: 2,
    };

    fn setup(seed: u64) -> (ParamStore, AttnParams, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttnParams::init(&mut store, DIMS, &mut rng);
        // Larger weights than the init range so logits are not near-uniform.
        for id in p.ids() {
            *store.get_mut(id) = {
                let m = store.get(id);
                uniform(&mut rng, m.rows(), m.cols(), 1.0)
            };
        }
        (store, p, rng)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_scene_annihilates() {
        let (store, p, mut rng) = setup(1);
        let h = rand_vec(&mut rng, 6);
        let g = scene_project_values(&store, &p, &SceneVector::raw(vec![0.0; 4]), &h).unwrap();
        assert_eq!(g, vec![0.0; 5]);
    }

    #[test]
    fn unit_scene_selects_one_factor() {
        let (store, p, mut rng) = setup(2);
        let h = rand_vec(&mut rng, 6);
        let j = 2;
        let mut e = vec![0.0; 4];
        e[j] = 1.0;
        let g = scene_project_values(&store, &p, &SceneVector::raw(e), &h).unwrap();
        let vh = dot(store.get(p.v_h).row_slice(j), &h);
        let u = store.get(p.u_h);
        let expect: Vec<f64> = (0..5).map(|r| u.get(r, j) * vh).collect();
        assert!(close(&g, &expect, 1e-15));
    }

    #[test]
    fn factored_equals_dense() {
        let (store, p, mut rng) = setup(3);
        for _ in 0..20 {
            let scene: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let h = rand_vec(&mut rng, 6);
            let g = scene_project_values(&store, &p, &SceneVector::raw(scene.clone()), &h).unwrap();
            let dense = p.dense_projection(&store, &scene).unwrap();
            let expect = dense.matmul(&Matrix::column(h)).unwrap();
            assert!(close(&g, expect.data(), 1e-12));
        }
    }

    #[test]
    fn single_region_gets_all_weight() {
        let (store, p, mut rng) = setup(4);
        let v = rand_vec(&mut rng, 3);
        let g = rand_vec(&mut rng, 5);
        let (alpha, ctx) = attend_regions_values(&store, &p, &[v.clone()], &g).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(ctx, v);
    }

    #[test]
    fn identical_regions_uniform() {
        let (store, p, mut rng) = setup(5);
        let v = rand_vec(&mut rng, 3);
        let g = rand_vec(&mut rng, 5);
        let (alpha, ctx) = attend_regions_values(&store, &p, &vec![v.clone(); 4], &g).unwrap();
        assert!(close(&alpha, &[0.25; 4], 1e-15));
        assert!(close(&ctx, &v, 1e-15));
    }

    #[test]
    fn empty_inputs_error() {
        let (store, p, _) = setup(6);
        let err = attend_regions_values(&store, &p, &[], &[0.0; 5]).unwrap_err();
        assert_eq!(err.to_string(), "image has no regions");
        let none = ConceptSet {
            vectors: vec![],
            scores: vec![],
        };
        assert!(matches!(
            attend_concepts_values(&store, &p, &none, &[0.0; 5]),
            Err(Error::NoConcepts)
        ));
    }

    // Straight-line transcription: per-item logit, softmax, weighted sum.
    fn oracle_attend(
        w_item: &Matrix,
        w_out: &Matrix,
        items: &[Vec<f64>],
        weights: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut logits = Vec::new();
        for v in items {
            let mut a = 0.0;
            for r in 0..w_item.rows() {
                let mut pre = g[r];
                for c in 0..w_item.cols() {
                    pre += w_item.get(r, c) * v[c];
                }
                a += w_out.get(r, 0) * pre.tanh();
            }
            logits.push(a);
        }
        let att = softmax(&logits).unwrap();
        let mut ctx = vec![0.0; items[0].len()];
        for (i, v) in items.iter().enumerate() {
            for (c, x) in v.iter().enumerate() {
                ctx[c] += att[i] * weights[i] * x;
            }
        }
        (att, ctx)
    }

    #[test]
    fn regions_match_straight_line_oracle() {
        let (store, p, mut rng) = setup(7);
        let regions: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 3)).collect();
        let g = rand_vec(&mut rng, 5);
        let (alpha, ctx) = attend_regions_values(&store, &p, &regions, &g).unwrap();
        let (ea, ec) = oracle_attend(store.get(p.w_va), store.get(p.w_a), &regions, &[1.0; 3], &g);
        assert!(close(&alpha, &ea, 1e-12));
        assert!(close(&ctx, &ec, 1e-12));
    }

    #[test]
    fn concepts_match_straight_line_oracle() {
        let (store, p, mut rng) = setup(8);
        let set = ConceptSet {
            vectors: (0..4).map(|_| rand_vec(&mut rng, 2)).collect(),
            scores: vec![0.9, 0.3, 1.0, 0.55],
        };
        let g = rand_vec(&mut rng, 5);
        let (beta, ctx) = attend_concepts_values(&store, &p, &set, &g).unwrap();
        let (eb, ec) = oracle_attend(store.get(p.w_vb), store.get(p.w_b), &set.vectors, &set.scores, &g);
        assert!(close(&beta, &eb, 1e-12));
        assert!(close(&ctx, &ec, 1e-12));
    }

    #[test]
    fn degenerate_single_concept() {
        let (store, p, mut rng) = setup(9);
        let c = rand_vec(&mut rng, 2);
        let set = ConceptSet {
            vectors: vec![c.clone()],
            scores: vec![1.0],
        };
        let (beta, ctx) = attend_concepts_values(&store, &p, &set, &rand_vec(&mut rng, 5)).unwrap();
        assert_eq!(beta, vec![1.0]);
        assert_eq!(ctx, c);
    }

    #[test]
    fn identical_concepts_uniform() {
        let (store, p, mut rng) = setup(10);
        let c = rand_vec(&mut rng, 2);
        let set = ConceptSet {
            vectors: vec![c; 3],
            scores: vec![0.7; 3],
        };
        let (beta, _) = attend_concepts_values(&store, &p, &set, &rand_vec(&mut rng, 5)).unwrap();
        assert!(close(&beta, &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn fuse_concatenates() {
        assert_eq!(fuse(&[1.0, 2.0], &[3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse(&[0.0; 2], &[0.0; 3]), vec![0.0; 5]);
        let v = fuse(&[4.0, 5.0, 6.0], &[7.0]);
        let (a, b) = v.split_at(3);
        assert_eq!((a, b), (&[4.0, 5.0, 6.0][..], &[7.0][..]));
    }

    #[test]
    fn zero_scene_makes_attention_query_independent() {
        let (store, p, mut rng) = setup(11);
        let regions: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 3)).collect();
        let zero = SceneVector::raw(vec![0.0; 4]);
        let g1 = scene_project_values(&store, &p, &zero, &rand_vec(&mut rng, 6)).unwrap();
        let g2 = scene_project_values(&store, &p, &zero, &rand_vec(&mut rng, 6)).unwrap();
        let a1 = attend_regions_values(&store, &p, &regions, &g1).unwrap();
        let a2 = attend_regions_values(&store, &p, &regions, &g2).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn gradients_through_attention_match_finite_differences() {
        let (store, p, mut rng) = setup(12);
        let regions = columns_matrix(&(0..3).map(|_| rand_vec(&mut rng, 3)).collect::<Vec<_>>()).unwrap();
        let concepts = columns_matrix(&(0..2).map(|_| rand_vec(&mut rng, 2)).collect::<Vec<_>>()).unwrap();
        let scene = vec![0.1, 0.5, 0.3, 0.1];
        let h = rand_vec(&mut rng, 6);
        let proj = rand_vec(&mut rng, 5);
        let run = |s: &ParamStore, grad: bool| {
            let mut t = Tape::new(s);
            let sc = t.leaf(Matrix::column(scene.clone()));
            let hn = t.leaf(Matrix::column(h.clone()));
            let r = t.leaf(regions.clone());
            let c = t.leaf(concepts.clone());
            let sco = t.leaf(Matrix::row(vec![0.8, 0.4]));
            let g = scene_project(&mut t, sc, hn, &p).unwrap();
            let (_, vc) = attend_regions(&mut t, r, g, &p).unwrap();
            let (_, vo) = attend_concepts(&mut t, c, sco, g, &p).unwrap();
            let v = t.concat(&[vc, vo, g]).unwrap();
            let w = t.leaf(Matrix::column(
                (0..10).map(|k| proj[k % 5] * (k as f64 + 1.0)).collect(),
            ));
            let y = t.mul(v, w).unwrap();
            let y = t.tanh(y);
            let loss = t.sum(y);
            let val = t.value(loss).item();
            (val, grad.then(|| t.backward(loss).unwrap().into_param_grads()))
        };
        let analytic = run(&store, true).1.unwrap();
        let report = finite_diff_check(|s| run(s, false).0, &store, &analytic, 1e-5);
        assert!(report.max_rel_err(1e-8) < 1e-4, "{:?}", report.worst());
    }

    proptest::proptest! {
        #[test]
        fn region_permutation_equivariance(seed in 0u64..500, rot in 1usize..4) {
            let (store, p, mut rng) = setup(seed);
            let regions: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 3)).collect();
            let g = rand_vec(&mut rng, 5);
            let (alpha, ctx) = attend_regions_values(&store, &p, &regions, &g).unwrap();
            let mut perm = regions.clone();
            perm.rotate_left(rot);
            let (alpha_p, ctx_p) = attend_regions_values(&store, &p, &perm, &g).unwrap();
            let mut expect = alpha.clone();
            expect.rotate_left(rot);
            proptest::prop_assert!(close(&alpha_p, &expect, 1e-12));
            proptest::prop_assert!(close(&ctx_p, &ctx, 1e-12));
            let s: f64 = alpha.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9 && alpha.iter().all(|&a| a >= 0.0));
        }
    }
}
