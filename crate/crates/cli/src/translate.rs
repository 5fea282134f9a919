use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use chatnmt_core::data::{detokenize, encode_dialogue, load_corpus, CorpusLimits, Dialogue, Direction};
use chatnmt_core::inference::{replay_dialogue, BeamConfig, LatentMode, ReplayMode, TurnTranslation};
use chatnmt_core::model::{load_checkpoint, Checkpoint, Model};
use chatnmt_core::Error;

use crate::assets::Assets;
use crate::records::HypRecord;

#[derive(Args)]
pub struct TranslateArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dialogues to translate (JSONL).
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Beam width.
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Longest output in tokens (also capped by the model).
    #[arg(long, value_name = "N", default_value_t = 100)]
    max_length: usize,
    /// Target-side history: gold, self or back.
    #[arg(long, default_value = "gold")]
    mode: String,
    /// Reverse-direction checkpoint for --mode back.
    #[arg(long, value_name = "PATH")]
    inverse: Option<PathBuf>,
    /// Latent value: mean (prior mean) or sample.
    #[arg(long, default_value = "mean")]
    latent: String,
    /// Preceding turns used as context [default: as trained].
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// forward or reverse [default: as trained].
    #[arg(long)]
    direction: Option<String>,
    /// Seed for latent sampling.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (0: one per core). Output does not depend on it.
    #[arg(long, value_name = "N", default_value_t = 0)]
    threads: usize,
}

fn load(path: &Path) -> Result<(Checkpoint, Assets)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let assets = Assets::from_metadata(&ckpt.metadata, &path.display().to_string())?;
    Ok((ckpt, assets))
}

/// A training setting recorded in the checkpoint.
fn trained<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<Option<T>> {
    let Some(v) = ckpt.metadata.get(&format!("train.{key}")) else {
        return Ok(None);
    };
    let parsed = v
        .parse()
        .map_err(|_| Error::Validation(format!("checkpoint records an invalid {key} {v:?}")))?;
    Ok(Some(parsed))
}

/// Replays every dialogue, spread over `threads` workers in contiguous chunks.
fn translate_all(
    dialogues: &[Dialogue],
    threads: usize,
    replay: impl Fn(&Dialogue) -> chatnmt_core::Result<Vec<TurnTranslation>> + Sync,
) -> chatnmt_core::Result<Vec<Vec<TurnTranslation>>> {
    let chunk = dialogues.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let workers: Vec<_> = dialogues
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&replay).collect::<chatnmt_core::Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(dialogues.len());
        for w in workers {
            out.extend(w.join().expect("translation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn run(args: &TranslateArgs) -> Result<()> {
    let mode: ReplayMode = args.mode.parse()?;
    let latent: LatentMode = args.latent.parse()?;
    let (ckpt, assets) = load(&args.checkpoint)?;
    let direction = match &args.direction {
        Some(d) => d.parse()?,
        None => trained(&ckpt, "direction")?.unwrap_or(Direction::Forward),
    };
    let window = match args.window {
        Some(w) => w,
        None => trained(&ckpt, "context_window")?.unwrap_or(3),
    };
    let inverse: Option<Model> = match (&args.inverse, mode) {
        (Some(path), ReplayMode::BackTranslate) => {
            let (inv, inv_assets) = load(path)?;
            if !inv_assets.same_as(&assets) {
                return Err(Error::Config("--inverse uses a different vocabulary".into()).into());
            }
            if let Some(d) = trained::<Direction>(&inv, "direction")?.filter(|&d| d != direction.inverse()) {
                return Err(Error::Config(format!("--inverse was trained in direction {d}, not {}", direction.inverse())).into());
            }
            Some(inv.model)
        }
        (None, ReplayMode::BackTranslate) => {
            return Err(Error::Config("--mode back needs --inverse".into()).into());
        }
        (Some(_), _) => return Err(Error::Config("--inverse only applies to --mode back".into()).into()),
        (None, _) => None,
    };
    let cfg = BeamConfig {
        beam_size: args.beam,
        alpha: args.alpha,
        max_length: args.max_length,
        latent,
        seed: args.seed,
    };
    cfg.validate()?;

    let model = &ckpt.model;
    let limits = CorpusLimits {
        num_roles: model.config.num_roles,
        max_turns: model.config.max_turns,
    };
    let records = load_corpus(&args.corpus, &limits).with_context(|| format!("loading {}", args.corpus.display()))?;
    let dialogues = records
        .iter()
        .map(|r| encode_dialogue(r, &assets.tokenizer, &assets.vocab))
        .collect::<chatnmt_core::Result<Vec<_>>>()?;
    let threads = match args.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let start = std::time::Instant::now();
    let results = translate_all(&dialogues, threads, |d| {
        replay_dialogue(model, d, direction, mode, inverse.as_ref(), window, &cfg)
    })?;

    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut out = BufWriter::new(sink);
    let (mut turns, mut truncated) = (0, 0);
    for (record, turns_out) in records.iter().zip(&results) {
        for t in turns_out {
            let hyp = HypRecord {
                id: record.id.clone(),
                turn: t.turn,
                hyp: detokenize(&assets.vocab.decode(&t.hypothesis.tokens)),
                truncated: !t.hypothesis.finished,
            };
            turns += 1;
            truncated += usize::from(hyp.truncated);
            serde_json::to_writer(&mut out, &hyp)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    log::info!(
        "translated {turns} turns of {} dialogues in {:.1}s ({truncated} hit the length limit)",
        records.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
