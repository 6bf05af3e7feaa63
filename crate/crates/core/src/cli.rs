//! `scenecap` command line: gen, train, caption, eval.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataio::manifest::{load_dataset, save_dataset, Dataset, Split};
use crate::dataio::sfat::ImageRecord;
use crate::dataio::synth::{gen_synthetic, SynthConfig};
use crate::decoder::{beam_decode, greedy_decode, Decoded, ModelParams, SceneMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::training::{train_loop, AdamState, EpochLog, LoopOptions, Phase, TrainState};

pub const THREADS_ENV: &str = "SCENECAP_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const LOG_FILE: &str = "train_log.jsonl";
const DEFAULT_RL_EPOCHS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "scenecap", version, about = "Scene-factored attention captioning")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Argument combinations clap cannot express on its own.
    pub fn check_usage(&self) -> std::result::Result<(), clap::Error> {
        if matches!(self.command, Command::Gen(_)) && self.out.is_none() {
            let mut cmd = Cli::command();
            return Err(cmd.error(
                ErrorKind::MissingRequiredArgument,
                "gen requires --out <DIR>",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest, features, captions).
    Gen(GenArgs),
    /// Train with the dual-head loss, then optionally fine-tune with SCST.
    Train(TrainArgs),
    /// Caption images and optionally dump attention weights.
    Caption(CaptionArgs),
    /// Decode a split and print BLEU/ROUGE-L/CIDEr-D as JSON.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long, default_value_t = 6)]
    pub concepts: usize,
    #[arg(long, default_value_t = 16)]
    pub region_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub concept_dim: usize,
    #[arg(long)]
    pub min_regions: Option<usize>,
    #[arg(long)]
    pub max_regions: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub captions: usize,
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub test: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Total MLE epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run the SCST phase after MLE.
    #[arg(long)]
    pub rl: bool,
    #[arg(long)]
    pub rl_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rl_lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Global-norm clipping threshold; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub attn: Option<usize>,
    #[arg(long)]
    pub concept_dim: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long, value_parser = parse_scene_mode)]
    pub scene_mode: Option<SceneMode>,
    #[arg(long)]
    pub tie_output: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Skip the per-epoch greedy CIDEr evaluation.
    #[arg(long)]
    pub no_eval: bool,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image id; repeatable. Defaults to every image in `--split`.
    #[arg(long = "image")]
    pub images: Vec<String>,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    #[arg(long)]
    pub greedy: bool,
    /// Directory receiving one `<image id>.csv` attention table per image.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub beam: Option<usize>,
}

fn parse_scene_mode(s: &str) -> std::result::Result<SceneMode, String> {
    match s {
        "full" => Ok(SceneMode::Full),
        "uniform" => Ok(SceneMode::Uniform),
        other => Err(format!("unknown scene mode '{other}' (full|uniform)")),
    }
}

/// Worker count from `SCENECAP_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs a parsed command, writing user-facing output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cli, a, stdout),
        Command::Train(a) => cmd_train(&cli, a, stdout),
        Command::Caption(a) => cmd_caption(&cli, a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
    }
}

fn cmd_gen(cli: &Cli, a: &GenArgs, stdout: &mut dyn Write) -> Result<()> {
    let out = cli
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("gen requires --out".into()))?;
    let k = crate::dataio::synth::MAX_CONCEPTS_PER_IMAGE.min(a.concepts);
    let min_regions = a.min_regions.unwrap_or(a.scenes + k);
    let cfg = SynthConfig {
        seed: cli.seed.unwrap_or(0),
        images: a.images,
        scenes: a.scenes,
        concepts: a.concepts,
        region_dim: a.region_dim,
        concept_dim: a.concept_dim,
        min_regions,
        max_regions: a.max_regions.unwrap_or(min_regions + 2),
        captions_per_image: a.captions,
        val: a.val,
        test: a.test,
        ..SynthConfig::default()
    };
    let ds = gen_synthetic(&cfg)?;
    let paths = save_dataset(out, &ds.records, ds.dims, ds.splits)?;
    writeln!(stdout, "{}", paths.manifest.display())?;
    Ok(())
}

fn merged_config(base: RunConfig, cli: &Cli, a: &TrainArgs) -> RunConfig {
    let mut c = base;
    let t = &mut c.train;
    if let Some(v) = cli.seed {
        t.seed = v;
    }
    if let Some(v) = a.gamma {
        t.gamma = v;
    }
    if let Some(v) = a.epochs {
        t.epochs_mle = v;
    }
    if let Some(v) = a.rl_epochs {
        t.epochs_rl = v;
    } else if a.rl && t.epochs_rl == 0 {
        t.epochs_rl = DEFAULT_RL_EPOCHS;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.rl_lr {
        t.rl_lr = v;
    }
    if let Some(v) = a.lr_decay {
        t.lr_decay = v;
    }
    if let Some(v) = a.decay_every {
        t.decay_every = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.grad_clip {
        t.grad_clip_norm = (v > 0.0).then_some(v);
    }
    if let Some(v) = a.hidden {
        c.hidden = v;
    }
    if let Some(v) = a.embed {
        c.embed = v;
    }
    if let Some(v) = a.attn {
        c.attn = v;
    }
    if let Some(v) = a.concept_dim {
        c.concept_dim = v;
    }
    if let Some(v) = a.min_count {
        c.min_count = v;
    }
    if let Some(v) = a.scene_mode {
        c.scene_mode = v;
    }
    if a.tie_output {
        c.tie_output = true;
    }
    if let Some(v) = &a.manifest {
        c.manifest = Some(v.clone());
    }
    if let Some(v) = &cli.out {
        c.out = Some(v.clone());
    }
    c
}

fn cmd_train(cli: &Cli, a: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = match (&cli.config, &resumed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.run.clone(),
        (None, None) => RunConfig::default(),
    };
    let cfg = merged_config(base, cli, a);
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("train requires --manifest".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("train requires --out".into()))?;
    fs::create_dir_all(&out)?;

    let mut ds = load_dataset(&manifest, cfg.min_count)?;
    let (model, mut params, mut state) = match resumed {
        Some(ck) => {
            ds.set_vocab(ck.vocab.clone());
            ck.check_dataset(&ds)?;
            let state = ck.state.clone().unwrap_or_else(|| TrainState::new(&ck.params));
            (ck.model, ck.params, state)
        }
        None => {
            let model = cfg.model_config(&ds);
            let params = ModelParams::init(&model, cfg.train.seed)?;
            let state = TrainState::new(&params);
            (model, params, state)
        }
    };

    let mut stored = cfg.clone();
    stored.out = None;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(out.join(LOG_FILE))?;
    let opts = LoopOptions {
        threads: threads_from_env(),
        skip_eval: a.no_eval,
    };
    let train = {
        let t = ds.split(Split::Train);
        if t.is_empty() {
            ds.split(Split::All)
        } else {
            t
        }
    };
    let vocab = ds.vocab.clone();
    let mut on_epoch = |entry: &EpochLog, p: &ModelParams, s: &TrainState| -> Result<()> {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")?;
        writeln!(stdout, "{line}")?;
        Checkpoint {
            run: stored.clone(),
            model: model.clone(),
            vocab: vocab.clone(),
            params: p.clone(),
            state: Some(s.clone()),
        }
        .save(&ckpt_path)
    };

    train_loop(&train, &mut params, &model, &cfg.train, Phase::Mle, &mut state, opts, &mut on_epoch)?;
    if cfg.train.epochs_rl > 0 {
        if state.rl_epochs_done == 0 {
            state.adam = AdamState::new(&params.store);
        }
        train_loop(&train, &mut params, &model, &cfg.train, Phase::Rl, &mut state, opts, &mut on_epoch)?;
    }
    Checkpoint {
        run: stored,
        model,
        vocab,
        params,
        state: Some(state),
    }
    .save(&ckpt_path)?;
    Ok(())
}

/// Checkpoint plus the dataset re-encoded with its vocabulary.
fn load_for_inference(checkpoint: &Path, manifest: Option<&Path>) -> Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| ck.run.manifest.clone())
        .ok_or_else(|| Error::Config("no --manifest given and none stored in checkpoint".into()))?;
    let mut ds = load_dataset(&manifest, ck.run.min_count)?;
    ds.set_vocab(ck.vocab.clone());
    ck.check_dataset(&ds)?;
    Ok((ck, ds))
}

fn decode(image: &ImageRecord, ck: &Checkpoint, beam: Option<usize>) -> Result<Decoded> {
    match beam {
        Some(w) => beam_decode(image, &ck.params, &ck.model, w),
        None => greedy_decode(image, &ck.params, &ck.model),
    }
}

/// CSV with a header row, then one row per emitted word:
/// `token, alpha_1..alpha_L, beta_1..beta_K`.
pub fn attention_csv(words: &[String], decoded: &Decoded) -> String {
    let l = decoded.alphas.first().map_or(0, Vec::len);
    let k = decoded.betas.first().map_or(0, Vec::len);
    let mut s = String::from("token");
    for i in 1..=l {
        let _ = write!(s, ",alpha_{i}");
    }
    for j in 1..=k {
        let _ = write!(s, ",beta_{j}");
    }
    s.push('\n');
    for ((w, alpha), beta) in words.iter().zip(&decoded.alphas).zip(&decoded.betas) {
        s.push_str(w);
        for v in alpha.iter().chain(beta) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn cmd_caption(_cli: &Cli, a: &CaptionArgs, stdout: &mut dyn Write) -> Result<()> {
    let (ck, ds) = load_for_inference(&a.checkpoint, a.manifest.as_deref())?;
    let images: Vec<&ImageRecord> = if a.images.is_empty() {
        ds.split(a.split.parse()?)
    } else {
        a.images
            .iter()
            .map(|id| {
                ds.get(id).ok_or_else(|| Error::UnknownImage {
                    id: id.clone(),
                    available: ds
                        .records
                        .iter()
                        .map(|r| r.id.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            })
            .collect::<Result<_>>()?
    };
    if let Some(dir) = &a.dump_attn {
        fs::create_dir_all(dir)?;
    }
    for img in images {
        let d = decode(img, &ck, a.beam)?;
        let words = ck.vocab.decode(&d.tokens);
        writeln!(stdout, "{}\t{}", img.id, words.join(" "))?;
        if let Some(dir) = &a.dump_attn {
            fs::write(dir.join(format!("{}.csv", img.id)), attention_csv(&words, &d))?;
        }
    }
    Ok(())
}

/// Decodes `split` and scores it against the references it carries.
pub fn eval_split(ck: &Checkpoint, ds: &Dataset, split: Split, beam: Option<usize>) -> Result<MetricReport> {
    let images: Vec<&ImageRecord> = ds
        .split(split)
        .into_iter()
        .filter(|r| !r.references.is_empty())
        .collect();
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cands = Vec::with_capacity(images.len());
    let mut refs = Vec::with_capacity(images.len());
    for img in images {
        let d = decode(img, &ck, beam)?;
        cands.push(ck.vocab.decode(&d.tokens));
        refs.push(img.references.clone());
    }
    evaluate(&cands, &refs)
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let (ck, ds) = load_for_inference(&a.checkpoint, a.manifest.as_deref())?;
    let report = eval_split(&ck, &ds, a.split.parse()?, a.beam)?;
    writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
