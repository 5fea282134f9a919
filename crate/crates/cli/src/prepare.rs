use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use chatnmt_core::data::synthetic::{synthetic_corpus, SyntheticSpec};
use chatnmt_core::data::{load_corpus, train_bpe, write_corpus, BpeModel, CorpusLimits, Tokenizer, TokenizerMode, Vocabulary};
use chatnmt_core::Error;

use crate::assets::Assets;

#[derive(Args)]
pub struct PrepareArgs {
    /// Dialogue corpus (JSONL) to build the vocabulary from.
    #[arg(long, value_name = "PATH", required_unless_present = "synthetic")]
    corpus: Option<PathBuf>,
    /// Output directory for vocab.txt, merges.txt and tokenizer.cfg.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Tokenizer: whitespace, char or bpe.
    #[arg(long, default_value = "whitespace")]
    tokenizer: String,
    /// Number of BPE merges to learn (bpe only).
    #[arg(long, value_name = "N")]
    merges: Option<usize>,
    /// Generate the synthetic corpus into DIR/corpus.jsonl and prepare it.
    #[arg(long, conflicts_with = "corpus")]
    synthetic: bool,
    /// Dialogues in the synthetic corpus.
    #[arg(long, value_name = "N", requires = "synthetic")]
    dialogues: Option<usize>,
    /// Seed for the synthetic corpus.
    #[arg(long, requires = "synthetic")]
    seed: Option<u64>,
}

pub fn run(args: &PrepareArgs) -> Result<()> {
    let mode: TokenizerMode = args.tokenizer.parse()?;
    if mode != TokenizerMode::Bpe && args.merges.is_some() {
        return Err(Error::Config("--merges needs --tokenizer bpe".into()).into());
    }
    let records = if args.synthetic {
        let mut spec = SyntheticSpec::default();
        spec.dialogues = args.dialogues.unwrap_or(spec.dialogues);
        spec.seed = args.seed.unwrap_or(spec.seed);
        let records = synthetic_corpus(&spec);
        std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        let path = args.out.join("corpus.jsonl");
        write_corpus(&path, &records)?;
        log::info!("wrote {} synthetic dialogues to {}", records.len(), path.display());
        records
    } else {
        let path = args.corpus.as_ref().expect("clap requires --corpus");
        let limits = CorpusLimits {
            num_roles: usize::MAX,
            max_turns: usize::MAX,
        };
        load_corpus(path, &limits).with_context(|| format!("loading {}", path.display()))?
    };
    if records.is_empty() {
        return Err(Error::Validation("the corpus has no dialogues".into()).into());
    }
    let texts: Vec<&str> = records
        .iter()
        .flat_map(|d| d.turns.iter().flat_map(|t| [t.src.as_str(), t.tgt.as_str()]))
        .collect();
    let bpe = match mode {
        TokenizerMode::Bpe => train_bpe(texts.iter().copied(), args.merges.unwrap_or(1000))?,
        _ => BpeModel::default(),
    };
    let tokenizer = Tokenizer::new(mode, bpe);
    let vocab = Vocabulary::build(texts.iter().flat_map(|t| tokenizer.tokenize(t)));
    let assets = Assets { tokenizer, vocab };
    assets.write_dir(&args.out)?;
    println!(
        "dialogues {} turns {} vocab {} merges {}",
        records.len(),
        texts.len() / 2,
        assets.vocab.len(),
        assets.tokenizer.bpe.merges().len()
    );
    Ok(())
}
