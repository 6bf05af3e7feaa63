//! Two-layer captioning decoder with scene-factored attention.
//!
//! Per step: the word embedding and the previous top-layer state feed the
//! first LSTM; its hidden state drives attention; the attended visual
//! vector and that hidden state feed the second LSTM. Each layer has its
//! own word distribution. Only the second one is read at inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_projected_concepts, attend_projected_regions, project_items, scene_project, AttnDims,
    AttnNodes, AttnParams, SceneVector,
};
use crate::dataio::sfat::ImageRecord;
use crate::dataio::vocab::{BOS, EOS, MAX_CAPTION_TOKENS};
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, uniform, LstmParams, LstmState, INIT_RANGE};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{argmax, Matrix};

/// Init range of the word and concept embedding tables.
pub const EMBED_INIT_RANGE: f64 = 1.0;

/// How the scene vector reaches the attention projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    /// The image's normalized scene posterior.
    #[default]
    Full,
    /// Ablation: every image gets the uniform scene vector.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub attn: usize,
    pub scenes: usize,
    pub region_dim: usize,
    pub concept_dim: usize,
    pub vocab_size: usize,
    /// Rows of the concept-embedding table.
    pub num_concepts: usize,
    pub max_concepts: usize,
    pub max_len: usize,
    #[serde(default)]
    pub tie_output: bool,
    #[serde(default)]
    pub length_norm: bool,
    #[serde(default)]
    pub scene_mode: SceneMode,
}

impl ModelConfig {
    /// Layer sizes used at paper scale, with data-dependent dimensions
    /// left to the caller.
    pub fn with_data_dims(
        region_dim: usize,
        scenes: usize,
        vocab_size: usize,
        num_concepts: usize,
        max_concepts: usize,
    ) -> Self {
        Self {
            hidden: 1000,
            embed: 1000,
            attn: 512,
            scenes,
            region_dim,
            concept_dim: 300,
            vocab_size,
            num_concepts,
            max_concepts,
            max_len: MAX_CAPTION_TOKENS,
            tie_output: false,
            length_norm: false,
            scene_mode: SceneMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("attn", self.attn),
            ("scenes", self.scenes),
            ("region_dim", self.region_dim),
            ("concept_dim", self.concept_dim),
            ("vocab_size", self.vocab_size),
            ("num_concepts", self.num_concepts),
            ("max_concepts", self.max_concepts),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must include BOS and EOS".into()));
        }
        Ok(())
    }
}

/// Every learned block, registered in declaration order: word embedding,
/// first LSTM, second LSTM, attention, output heads, concept table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub w_e: ParamId,
    pub lstm1: LstmParams,
    pub lstm2: LstmParams,
    pub attn: AttnParams,
    pub w_y1: ParamId,
    /// Same id as `w_y1` when the heads are tied.
    pub w_y2: ParamId,
    pub concept_table: ParamId,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let w_e = store.add("w_e", uniform(&mut rng, c.embed, c.vocab_size, EMBED_INIT_RANGE));
        let lstm1 = LstmParams::init(&mut store, "lstm1", c.hidden, c.embed + c.hidden, &mut rng);
        let lstm2 = LstmParams::init(
            &mut store,
            "lstm2",
            c.hidden,
            c.region_dim + c.concept_dim + c.hidden,
            &mut rng,
        );
        let attn = AttnParams::init(
            &mut store,
            AttnDims {
                attn: c.attn,
                scenes: c.scenes,
                hidden: c.hidden,
                region: c.region_dim,
                concept: c.concept_dim,
            },
            &mut rng,
        );
        let w_y1 = store.add("w_y1", uniform(&mut rng, c.vocab_size, c.hidden, INIT_RANGE));
        let w_y2 = if c.tie_output {
            w_y1
        } else {
            store.add("w_y2", uniform(&mut rng, c.vocab_size, c.hidden, INIT_RANGE))
        };
        let concept_table = store.add(
            "concept_table",
            uniform(&mut rng, c.num_concepts, c.concept_dim, EMBED_INIT_RANGE),
        );
        Ok(Self {
            store,
            w_e,
            lstm1,
            lstm2,
            attn,
            w_y1,
            w_y2,
            concept_table,
        })
    }

    /// Rebuilds the id layout for `config` around an existing store, e.g.
    /// one read from a checkpoint, checking every block's shape.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut layout = Self::init(config, 0)?;
        if layout.store.len() != store.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter blocks, found {}",
                layout.store.len(),
                store.len()
            )));
        }
        for id in layout.store.ids() {
            let (want, got) = (layout.store.get(id), store.get(id));
            if want.shape() != got.shape() || layout.store.name(id) != store.name(id) {
                return Err(Error::Dimension(format!(
                    "parameter {} expected {:?}, found {} {:?}",
                    layout.store.name(id),
                    want.shape(),
                    store.name(id),
                    got.shape()
                )));
            }
        }
        layout.store = store;
        Ok(layout)
    }
}

/// Image inputs placed on a tape once and reused by every step.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    /// C x L.
    pub regions: NodeId,
    /// `W_va * regions`, A x L.
    pub regions_proj: NodeId,
    /// C_k x K.
    pub concepts: NodeId,
    /// `W_vb * concepts`, A x K.
    pub concepts_proj: NodeId,
    /// 1 x K.
    pub scores: NodeId,
    /// s x 1.
    pub scene: NodeId,
}

pub fn scene_vector(image: &ImageRecord, config: &ModelConfig) -> Result<SceneVector> {
    match config.scene_mode {
        SceneMode::Uniform => Ok(SceneVector::uniform(config.scenes)),
        SceneMode::Full => {
            let raw: Vec<f64> = image.scene.iter().map(|&v| v as f64).collect();
            SceneVector::normalized(&raw)
        }
    }
}

pub fn encode_image(
    tape: &mut Tape<'_>,
    image: &ImageRecord,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EncodedImage> {
    let l = image.num_regions();
    if l == 0 {
        return Err(Error::NoRegions);
    }
    if image.region_dim != config.region_dim {
        return Err(Error::Record {
            id: image.id.clone(),
            msg: format!(
                "region dim {} does not match model C={}",
                image.region_dim, config.region_dim
            ),
        });
    }
    if image.concepts.is_empty() {
        return Err(Error::NoConcepts);
    }
    if image.concepts.len() > config.max_concepts {
        return Err(Error::Record {
            id: image.id.clone(),
            msg: format!(
                "{} concepts exceeds K_max={}",
                image.concepts.len(),
                config.max_concepts
            ),
        });
    }
    if image.scene.len() != config.scenes {
        return Err(Error::Record {
            id: image.id.clone(),
            msg: format!(
                "scene length {} does not match model s={}",
                image.scene.len(),
                config.scenes
            ),
        });
    }
    let c = config.region_dim;
    let regions = tape.leaf(Matrix::from_fn(c, l, |r, i| image.regions[i * c + r] as f64));
    let regions_proj = project_items(tape, params.attn.w_va, regions)?;
    let ids: Vec<usize> = image.concepts.iter().map(|&(id, _)| id as usize).collect();
    let table = tape.param(params.concept_table);
    let concepts = tape.gather_rows_t(table, &ids)?;
    let concepts_proj = project_items(tape, params.attn.w_vb, concepts)?;
    let scores = tape.leaf(Matrix::row(
        image.concepts.iter().map(|&(_, s)| s as f64).collect(),
    ));
    let scene = tape.leaf(Matrix::column(
        scene_vector(image, config)?.as_slice().to_vec(),
    ));
    Ok(EncodedImage {
        regions,
        regions_proj,
        concepts,
        concepts_proj,
        scores,
        scene,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub s1: LstmState,
    pub s2: LstmState,
    pub last_attn: Option<AttnNodes>,
}

impl DecoderState {
    /// Zero memory and hidden vectors for both layers.
    pub fn initial(tape: &mut Tape<'_>, config: &ModelConfig) -> Self {
        Self {
            s1: LstmState::zeros(tape, config.hidden),
            s2: LstmState::zeros(tape, config.hidden),
            last_attn: None,
        }
    }
}

/// Log-distributions of both heads plus the step's attention.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub logp1: NodeId,
    pub logp2: NodeId,
    pub attn: AttnNodes,
}

impl StepOutput {
    pub fn p1(&self, tape: &Tape<'_>) -> Vec<f64> {
        tape.value(self.logp1).data().iter().map(|v| v.exp()).collect()
    }

    pub fn p2(&self, tape: &Tape<'_>) -> Vec<f64> {
        tape.value(self.logp2).data().iter().map(|v| v.exp()).collect()
    }
}

/// One decoder step consuming `word`.
pub fn decode_step(
    tape: &mut Tape<'_>,
    word: usize,
    state: &DecoderState,
    image: &EncodedImage,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(StepOutput, DecoderState)> {
    if word >= config.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: word,
            size: config.vocab_size,
        });
    }
    let we = tape.param(params.w_e);
    let emb = tape.column(we, word)?;
    let x1 = tape.concat(&[emb, state.s2.h])?;
    let s1 = lstm_step(tape, x1, state.s1, &params.lstm1)?;
    let wy1 = tape.param(params.w_y1);
    let logits1 = tape.matmul(wy1, s1.h)?;
    let logp1 = tape.log_softmax(logits1)?;

    let g = scene_project(tape, image.scene, s1.h, &params.attn)?;
    let (alpha, v_hat_conv) =
        attend_projected_regions(tape, image.regions, image.regions_proj, g, &params.attn)?;
    let (beta, v_hat_obj) = attend_projected_concepts(
        tape,
        image.concepts,
        image.scores,
        image.concepts_proj,
        g,
        &params.attn,
    )?;
    let v_hat = tape.concat(&[v_hat_conv, v_hat_obj])?;
    let x2 = tape.concat(&[v_hat, s1.h])?;
    let s2 = lstm_step(tape, x2, state.s2, &params.lstm2)?;
    let wy2 = tape.param(params.w_y2);
    let logits2 = tape.matmul(wy2, s2.h)?;
    let logp2 = tape.log_softmax(logits2)?;

    let attn = AttnNodes {
        alpha,
        beta,
        v_hat_conv,
        v_hat_obj,
        v_hat,
    };
    Ok((
        StepOutput { logp1, logp2, attn },
        DecoderState {
            s1,
            s2,
            last_attn: Some(attn),
        },
    ))
}

/// Teacher-forced pass over `[BOS, w_1, ..., EOS]`: step t consumes token
/// t-1; both heads target token t.
pub fn forward_teacher(
    tape: &mut Tape<'_>,
    tokens: &[usize],
    image: &EncodedImage,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<StepOutput>> {
    if tokens.len() < 2 {
        return Err(Error::EmptySequence);
    }
    let steps = tokens.len() - 1;
    if steps > config.max_len + 1 {
        return Err(Error::SequenceTooLong {
            len: steps,
            max: config.max_len + 1,
        });
    }
    let mut state = DecoderState::initial(tape, config);
    let mut outs = Vec::with_capacity(steps);
    for &w in &tokens[..steps] {
        let (out, next) = decode_step(tape, w, &state, image, params, config)?;
        outs.push(out);
        state = next;
    }
    Ok(outs)
}

/// A decoded caption (without BOS/EOS) with the attention rows of each
/// emitted word.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Summed log p2 of the emitted tokens, EOS included when emitted.
    pub logprob: f64,
    pub finished: bool,
    pub alphas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

/// Argmax decoding over p2; ties go to the lowest token id.
pub fn greedy_decode(
    image: &ImageRecord,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Decoded> {
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let mut state = DecoderState::initial(&mut tape, config);
    let mut word = BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
        alphas: Vec::new(),
        betas: Vec::new(),
    };
    for _ in 0..config.max_len {
        let (step, next) = decode_step(&mut tape, word, &state, &enc, params, config)?;
        let logp = tape.value(step.logp2).data();
        let tok = argmax(logp);
        out.logprob += logp[tok];
        if tok == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(tok);
        out.alphas.push(tape.value(step.attn.alpha).data().to_vec());
        out.betas.push(tape.value(step.attn.beta).data().to_vec());
        word = tok;
        state = next;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    state: DecoderState,
    alphas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
}

fn ranking_score(score: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        score / len.max(1) as f64
    } else {
        score
    }
}

/// Beam search over summed log p2. Hypotheses that emit EOS retire to a
/// pool; the best retired hypothesis wins, else the best live one at
/// `max_len`.
pub fn beam_decode(
    image: &ImageRecord,
    params: &ModelParams,
    config: &ModelConfig,
    beam_width: usize,
) -> Result<Decoded> {
    if beam_width == 0 {
        return Err(Error::ZeroBeam);
    }
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let init = DecoderState::initial(&mut tape, config);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
        alphas: Vec::new(),
        betas: Vec::new(),
    }];
    let mut finished: Vec<(Hypothesis, f64)> = Vec::new();

    for _ in 0..config.max_len {
        // (hyp index, token, total score, step)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut steps = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let word = h.tokens.last().copied().unwrap_or(BOS);
            let (step, next) = decode_step(&mut tape, word, &h.state, &enc, params, config)?;
            for (tok, &lp) in tape.value(step.logp2).data().iter().enumerate() {
                cands.push((hi, tok, h.score + lp));
            }
            steps.push((step, next));
        }
        let len_of = |hi: usize, tok: usize| live[hi].tokens.len() + usize::from(tok != EOS);
        // Stable sort keeps (hypothesis, token id) order among ties.
        cands.sort_by(|a, b| {
            let ka = ranking_score(a.2, len_of(a.0, a.1), config.length_norm);
            let kb = ranking_score(b.2, len_of(b.0, b.1), config.length_norm);
            kb.total_cmp(&ka)
        });
        cands.truncate(beam_width);

        let mut next_live = Vec::with_capacity(cands.len());
        for (hi, tok, score) in cands {
            let (step, next) = &steps[hi];
            let parent = &live[hi];
            if tok == EOS {
                let mut h = parent.clone();
                h.score = score;
                let rank = ranking_score(score, h.tokens.len(), config.length_norm);
                finished.push((h, rank));
            } else {
                let mut h = parent.clone();
                h.tokens.push(tok);
                h.score = score;
                h.state = *next;
                h.alphas.push(tape.value(step.attn.alpha).data().to_vec());
                h.betas.push(tape.value(step.attn.beta).data().to_vec());
                next_live.push(h);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let pick = |pool: Vec<(Hypothesis, f64)>| {
        let mut best: Option<(Hypothesis, f64)> = None;
        for (h, r) in pool {
            if best.as_ref().map_or(true, |(_, br)| r > *br) {
                best = Some((h, r));
            }
        }
        best.map(|(h, _)| h)
    };
    let is_finished = !finished.is_empty();
    let best = if is_finished {
        pick(finished)
    } else {
        let ranked = live
            .into_iter()
            .map(|h| {
                let r = ranking_score(h.score, h.tokens.len(), config.length_norm);
                (h, r)
            })
            .collect();
        pick(ranked)
    }
    .expect("beam keeps at least one hypothesis");
    Ok(Decoded {
        tokens: best.tokens,
        logprob: best.score,
        finished: is_finished,
        alphas: best.alphas,
        betas: best.betas,
    })
}

/// Draws index `i` with probability `p[i]`.
pub fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Multinomial sampling from p2 at temperature 1.
pub fn sample_decode_with(
    image: &ImageRecord,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<Decoded> {
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let mut state = DecoderState::initial(&mut tape, config);
    let mut word = BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
        alphas: Vec::new(),
        betas: Vec::new(),
    };
    for _ in 0..config.max_len {
        let (step, next) = decode_step(&mut tape, word, &state, &enc, params, config)?;
        let logp = tape.value(step.logp2).data();
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let tok = sample_index(&p, rng);
        out.logprob += logp[tok];
        if tok == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(tok);
        out.alphas.push(tape.value(step.attn.alpha).data().to_vec());
        out.betas.push(tape.value(step.attn.beta).data().to_vec());
        word = tok;
        state = next;
    }
    Ok(out)
}

pub fn sample_decode(
    image: &ImageRecord,
    params: &ModelParams,
    config: &ModelConfig,
    seed: u64,
) -> Result<(Vec<usize>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sample_decode_with(image, params, config, &mut rng)?;
    Ok((d.tokens, d.logprob))
}

/// Fraction of teacher-forced steps whose p2 argmax equals the target,
/// as `(correct, total)`.
pub fn teacher_forced_hits(
    image: &ImageRecord,
    tokens: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(usize, usize)> {
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let outs = forward_teacher(&mut tape, tokens, &enc, params, config)?;
    let hits = outs
        .iter()
        .zip(&tokens[1..])
        .filter(|(o, &t)| argmax(tape.value(o.logp2).data()) == t)
        .count();
    Ok((hits, outs.len()))
}

/// `[BOS] + tokens (+ [EOS] when finished)`, the teacher-forcing input
/// that reproduces a decoded caption.
pub fn with_markers(tokens: &[usize], finished: bool) -> Vec<usize> {
    let mut seq = Vec::with_capacity(tokens.len() + 2);
    seq.push(BOS);
    seq.extend_from_slice(tokens);
    if finished {
        seq.push(EOS);
    }
    seq
}
