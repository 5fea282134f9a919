use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use chatnmt_core::data::{load_corpus, CorpusLimits, DialogueRecord, Direction};
use chatnmt_core::metrics::{
    bleu, coherence_report, corpus_ter, paired_bootstrap, BleuConfig, BleuTokenize, DepthRow, TerConfig, WordVectors,
};
use chatnmt_core::Error;

use crate::records::{read_aligned, references};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Translations: translate output or a corpus file.
    #[arg(long, value_name = "PATH")]
    hyp: PathBuf,
    /// Reference corpus (JSONL dialogues).
    #[arg(long = "ref", value_name = "PATH")]
    reference: PathBuf,
    /// forward scores against tgt, reverse against src.
    #[arg(long, default_value = "forward")]
    direction: String,
    /// Case-insensitive BLEU.
    #[arg(long)]
    lowercase: bool,
    /// BLEU tokenization: 13a or char.
    #[arg(long, default_value = "13a")]
    tokenize: String,
    /// Case-sensitive TER (TER ignores case by default).
    #[arg(long)]
    ter_case_sensitive: bool,
    /// Second system for a paired bootstrap comparison.
    #[arg(long, value_name = "PATH")]
    compare: Option<PathBuf>,
    /// Bootstrap resamples.
    #[arg(long, value_name = "N", default_value_t = 1000)]
    samples: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print one JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct CoherenceArgs {
    /// Translations: translate output or a corpus file.
    #[arg(long, value_name = "PATH")]
    hyp: PathBuf,
    /// Corpus whose target side is the dialogue history.
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Word vectors in text format, with a "count dim" header line.
    #[arg(long, value_name = "PATH")]
    vectors: PathBuf,
    /// Comma-separated distances to the preceding utterance.
    #[arg(long, value_name = "LIST", default_value = "1,2,3")]
    depths: String,
    /// forward: history is tgt; reverse: history is src.
    #[arg(long, default_value = "forward")]
    direction: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    let limits = CorpusLimits {
        num_roles: usize::MAX,
        max_turns: usize::MAX,
    };
    let records = load_corpus(path, &limits).with_context(|| format!("loading {}", path.display()))?;
    if records.iter().all(|d| d.turns.is_empty()) {
        return Err(Error::Validation(format!("{} has no turns", path.display())).into());
    }
    Ok(records)
}

fn flat(v: Vec<Vec<String>>) -> Vec<String> {
    v.into_iter().flatten().collect()
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let direction: Direction = args.direction.parse()?;
    let tokenize = match args.tokenize.as_str() {
        "13a" => BleuTokenize::Standard,
        "char" => BleuTokenize::Char,
        other => return Err(Error::Config(format!("unknown BLEU tokenization `{other}` (13a or char)")).into()),
    };
    let bleu_cfg = BleuConfig {
        lowercase: args.lowercase,
        tokenize,
        ..BleuConfig::default()
    };
    let ter_cfg = TerConfig {
        lowercase: !args.ter_case_sensitive,
        ..TerConfig::default()
    };
    let refs_corpus = corpus(&args.reference)?;
    let refs = flat(references(&refs_corpus, direction));
    let hyps = flat(read_aligned(&args.hyp, &refs_corpus, direction)?);
    let b = bleu(&hyps, &refs, &bleu_cfg)?;
    let t = 100.0 * corpus_ter(&hyps, &refs, &ter_cfg)?;
    let comparison = match &args.compare {
        Some(path) => {
            let other = flat(read_aligned(path, &refs_corpus, direction)?);
            let other_bleu = bleu(&other, &refs, &bleu_cfg)?.score;
            let p = paired_bootstrap(&hyps, &other, &refs, &bleu_cfg, args.samples, args.seed)?;
            Some((path, other_bleu, p))
        }
        None => None,
    };
    if args.json {
        let mut v = json!({
            "bleu": b.score,
            "precisions": b.precisions,
            "brevity_penalty": b.brevity_penalty,
            "hyp_len": b.hyp_len,
            "ref_len": b.ref_len,
            "ter": t,
            "segments": hyps.len(),
        });
        if let Some((path, other, p)) = &comparison {
            v["compare"] = json!({ "path": path, "bleu": other, "p_value": p });
        }
        println!("{v}");
    } else {
        let precisions: Vec<String> = b.precisions.iter().map(|p| format!("{p:.1}")).collect();
        println!(
            "BLEU = {:.2} {} (BP = {:.3} hyp_len = {} ref_len = {})",
            b.score,
            precisions.join("/"),
            b.brevity_penalty,
            b.hyp_len,
            b.ref_len
        );
        println!("TER = {t:.2}");
        if let Some((path, other, p)) = comparison {
            println!("compare {}: BLEU = {other:.2}, bootstrap p = {p:.4}", path.display());
        }
    }
    Ok(())
}

fn parse_depths(s: &str) -> Result<Vec<usize>> {
    let depths = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("bad depth list {s:?}")))?;
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::Config("depths must be positive".into()).into());
    }
    Ok(depths)
}

fn cell(row: Option<&DepthRow>) -> String {
    row.and_then(|r| r.mean).map_or("-".to_string(), |m| format!("{m:.4}"))
}

pub fn run_coherence(args: &CoherenceArgs) -> Result<()> {
    let direction: Direction = args.direction.parse()?;
    let depths = parse_depths(&args.depths)?;
    let records = corpus(&args.corpus)?;
    let history = references(&records, direction);
    let hyps = read_aligned(&args.hyp, &records, direction)?;
    let vectors = WordVectors::read(&args.vectors).with_context(|| format!("reading {}", args.vectors.display()))?;
    let systems = [
        (args.hyp.display().to_string(), coherence_report(&hyps, &history, &vectors, &depths)?),
        ("reference".to_string(), coherence_report(&history, &history, &vectors, &depths)?),
    ];
    let find = |rows: &[DepthRow], d: usize| rows.iter().find(|r| r.depth == d).cloned();
    if args.json {
        let out: Vec<_> = systems
            .iter()
            .map(|(name, rows)| {
                let rows: Vec<_> = rows
                    .iter()
                    .map(|r| json!({"depth": r.depth, "mean": r.mean, "pairs": r.pairs, "skipped": r.skipped}))
                    .collect();
                json!({"system": name, "rows": rows})
            })
            .collect();
        println!("{}", serde_json::Value::from(out));
        return Ok(());
    }
    let width = systems.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut header = format!("{:<width$}", "system");
    for d in &depths {
        header.push_str(&format!("  {:>9}", format!("{d}-th Pr.")));
    }
    println!("{header}");
    for (name, rows) in &systems {
        let mut line = format!("{name:<width$}");
        for &d in &depths {
            line.push_str(&format!("  {:>9}", cell(find(rows, d).as_ref())));
        }
        println!("{line}");
    }
    let mut line = format!("{:<width$}", "pairs");
    for &d in &depths {
        let n = find(&systems[0].1, d).map_or(0, |r| r.pairs);
        line.push_str(&format!("  {n:>9}"));
    }
    println!("{line}");
    Ok(())
}
