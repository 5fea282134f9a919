use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use chatnmt_core::data::{dialogue_examples, encode_dialogue, load_corpus, ChatExample, CorpusLimits, Dialogue};
use chatnmt_core::model::{load_checkpoint, save_checkpoint, LatentSet, ModelConfig};
use chatnmt_core::train::{prepare_model, train, TrainEvent};
use chatnmt_core::Error;

use crate::assets::Assets;
use crate::settings::{gather, parse_assignment, resolve, resolved_text};

/// Flags shared by `train` and `ablate`. Each setting flag overrides the
/// config key of the same name (`--window` sets `context_window`).
#[derive(Args)]
pub struct RunArgs {
    /// Training corpus (JSONL dialogues).
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Prepared data directory; optional with --init.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Final checkpoint path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// key=value settings file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
    /// Training log (JSONL) [default: <out>.log.jsonl].
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Any setting, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,

    /// Optimizer updates to run.
    #[arg(long, value_name = "N")]
    max_steps: Option<u64>,
    /// Padded token budget per batch.
    #[arg(long, value_name = "N")]
    batch_tokens: Option<usize>,
    /// Steps over which the KL weight grows from 0 to 1.
    #[arg(long, value_name = "N")]
    anneal_steps: Option<u64>,
    /// Preceding turns used as context.
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// forward (src to tgt) or reverse.
    #[arg(long)]
    direction: Option<String>,
    /// Seed for initialization, shuffling, dropout and latent noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Save an intermediate checkpoint every N steps.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    /// Log every N steps.
    #[arg(long, value_name = "N")]
    log_every: Option<u64>,
    /// Multiplier on the inverse-square-root learning rate.
    #[arg(long, value_name = "X")]
    lr_scale: Option<f64>,
    /// Learning-rate warmup steps.
    #[arg(long, value_name = "N")]
    warmup_steps: Option<usize>,
    /// Global gradient norm limit.
    #[arg(long, value_name = "X")]
    clip_norm: Option<f64>,
    /// Allow stage 2 without --init.
    #[arg(long)]
    from_scratch: bool,
    /// Add tokens per second to the log (not reproducible).
    #[arg(long)]
    log_timing: bool,

    /// Model width.
    #[arg(long, value_name = "N")]
    d_model: Option<usize>,
    /// Feed-forward width.
    #[arg(long, value_name = "N")]
    d_ff: Option<usize>,
    /// Attention heads.
    #[arg(long, value_name = "N")]
    heads: Option<usize>,
    /// Encoder layers.
    #[arg(long, value_name = "N")]
    encoder_layers: Option<usize>,
    /// Decoder layers.
    #[arg(long, value_name = "N")]
    decoder_layers: Option<usize>,
    /// Size of each latent variable.
    #[arg(long, value_name = "N")]
    latent_dim: Option<usize>,
    /// Speaker roles.
    #[arg(long, value_name = "N")]
    num_roles: Option<usize>,
    /// Turn embeddings; later turns share the last.
    #[arg(long, value_name = "N")]
    max_turns: Option<usize>,
    /// Longest sequence in tokens.
    #[arg(long, value_name = "N")]
    max_positions: Option<usize>,
    /// Dropout rate.
    #[arg(long, value_name = "X")]
    dropout: Option<f64>,
    /// Label smoothing of the training loss.
    #[arg(long, value_name = "X")]
    label_smoothing: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// 1: sentence level; 2: with latents.
    #[arg(long)]
    stage: Option<u8>,
    /// Latents to leave out in stage 2, e.g. role,dia.
    #[arg(long, value_name = "LIST")]
    ablation: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Latents to leave out, e.g. role,dia.
    #[arg(long, value_name = "LIST")]
    without: String,
    #[command(flatten)]
    run: RunArgs,
}

impl RunArgs {
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! put {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    out.push(($key, v.to_string()));
                })*
            };
        }
        put!(
            max_steps => "max_steps",
            batch_tokens => "batch_tokens",
            anneal_steps => "anneal_steps",
            window => "context_window",
            direction => "direction",
            seed => "seed",
            checkpoint_every => "checkpoint_every",
            log_every => "log_every",
            lr_scale => "lr_scale",
            warmup_steps => "warmup_steps",
            clip_norm => "clip_norm",
            d_model => "d_model",
            d_ff => "d_ff",
            heads => "heads",
            encoder_layers => "encoder_layers",
            decoder_layers => "decoder_layers",
            latent_dim => "latent_dim",
            num_roles => "num_roles",
            max_turns => "max_turns",
            max_positions => "max_positions",
            dropout => "dropout",
            label_smoothing => "label_smoothing",
        );
        if self.from_scratch {
            out.push(("from_scratch", "true".into()));
        }
        if self.log_timing {
            out.push(("log_timing", "true".into()));
        }
        out
    }
}

/// `path` with its extension replaced by `suffix`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(stage) = args.stage {
        extra.push(("stage", stage.to_string()));
    }
    if let Some(a) = &args.ablation {
        extra.push(("ablation", a.clone()));
    }
    execute(&args.run, extra)
}

pub fn run_ablate(args: &AblateArgs) -> Result<()> {
    let without: LatentSet = args.without.parse()?;
    execute(&args.run, vec![("stage", "2".into()), ("ablation", without.to_string())])
}

fn encode_corpus(path: &Path, assets: &Assets, config: &ModelConfig) -> Result<Vec<Dialogue>> {
    let limits = CorpusLimits {
        num_roles: config.num_roles,
        max_turns: config.max_turns,
    };
    let records = load_corpus(path, &limits).with_context(|| format!("loading {}", path.display()))?;
    let dialogues = records
        .iter()
        .map(|r| encode_dialogue(r, &assets.tokenizer, &assets.vocab))
        .collect::<chatnmt_core::Result<Vec<_>>>()?;
    Ok(dialogues)
}

fn execute(run: &RunArgs, extra: Vec<(&'static str, String)>) -> Result<()> {
    let init = match &run.init {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let data = run.data.as_deref().map(Assets::read_dir).transpose()?;
    let assets = match (&init, data) {
        (Some(c), data) => {
            let name = run.init.as_ref().expect("init is set").display().to_string();
            let stored = Assets::from_metadata(&c.metadata, &name)?;
            if data.is_some_and(|d| !d.same_as(&stored)) {
                return Err(Error::Config("--data holds a different vocabulary than the --init checkpoint".into()).into());
            }
            stored
        }
        (None, Some(d)) => d,
        (None, None) => return Err(Error::Config("--data is required unless --init is given".into()).into()),
    };

    let base = init.as_ref().map_or_else(ModelConfig::default, |c| c.model.config.clone());
    let mut flags = run.flags();
    flags.extend(extra);
    let sources = gather(run.config.as_deref(), &run.set, flags)?;
    let settings = resolve(base, init.is_some(), &sources)?;
    let mut mc = settings.model;
    if let Some(v) = settings.vocab_size.filter(|&v| v != assets.vocab.len()) {
        return Err(Error::Config(format!("vocab_size {v} does not match the vocabulary ({})", assets.vocab.len())).into());
    }
    mc.vocab_size = assets.vocab.len();
    mc.validate()?;
    let tc = settings.train;
    tc.validate()?;

    let dialogues = encode_corpus(&run.corpus, &assets, &mc)?;
    let examples: Vec<ChatExample> = dialogues
        .iter()
        .flat_map(|d| dialogue_examples(d, tc.direction, tc.context_window))
        .collect();
    let mut model = prepare_model(init.map(|c| c.model), &mc, &tc)?;
    model.config.dropout = mc.dropout;
    model.config.label_smoothing = mc.label_smoothing;
    log::info!(
        "stage {} on {} examples, {} parameters, latents {}",
        tc.stage,
        examples.len(),
        model.num_parameters(),
        model.config.latents.map_or("none".to_string(), |s| s.to_string())
    );

    let mut meta = BTreeMap::new();
    assets.to_metadata(&mut meta);
    for (k, v) in tc.to_pairs() {
        meta.insert(format!("train.{k}"), v);
    }
    if let Some(dir) = run.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let log_path = run.log.clone().unwrap_or_else(|| sibling(&run.out, ".log.jsonl"));
    let file = std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);

    let outcome = train(model, &examples, &tc, |event| match event {
        TrainEvent::Step(r) => {
            serde_json::to_writer(&mut log, r).map_err(std::io::Error::from)?;
            writeln!(log)?;
            log::info!(
                "step {} loss {:.4} ce {:.4} kl {:.4} lambda {:.3} lr {:.2e}",
                r.step,
                r.loss,
                r.ce,
                r.kl_total,
                r.lambda,
                r.lr
            );
            Ok(())
        }
        TrainEvent::Checkpoint { step, model } if step < tc.max_steps => {
            let mut m = meta.clone();
            m.insert("steps".into(), step.to_string());
            save_checkpoint(&sibling(&run.out, &format!(".step{step}.ckpt")), model, &m)
        }
        TrainEvent::Checkpoint { .. } => Ok(()),
    })?;
    log.flush()?;
    meta.insert("steps".into(), outcome.steps.to_string());
    save_checkpoint(&run.out, &outcome.model, &meta).with_context(|| format!("saving {}", run.out.display()))?;
    let cfg_path = sibling(&run.out, ".cfg");
    std::fs::write(&cfg_path, resolved_text(&mc, &tc)).with_context(|| format!("writing {}", cfg_path.display()))?;
    if let Some(last) = &outcome.last {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}
