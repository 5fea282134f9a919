mod assets;
mod evaluate;
mod prepare;
mod records;
mod settings;
mod train;
mod translate;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use chatnmt_core::Error;

/// Context-aware chat translation with role, dialogue and translation latents.
#[derive(Parser)]
#[command(name = "chatnmt", version, arg_required_else_help = true)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary (and BPE merges) for a corpus.
    Prepare(prepare::PrepareArgs),
    /// Train a sentence-level (stage 1) or latent (stage 2) model.
    Train(train::TrainArgs),
    /// Translate every turn of a corpus, dialogue by dialogue.
    Translate(translate::TranslateArgs),
    /// Score translations with BLEU and TER.
    Evaluate(evaluate::EvaluateArgs),
    /// Similarity of translations to preceding utterances, per depth.
    Coherence(evaluate::CoherenceArgs),
    /// Stage-2 training with some latents removed.
    Ablate(train::AblateArgs),
}

/// Every subcommand's flags, appended to `chatnmt --help`.
fn flag_table(cmd: &clap::Command) -> String {
    let mut out = String::from("Flags by subcommand:\n");
    for sub in cmd.get_subcommands() {
        out.push_str(&format!("\n  {}\n", sub.get_name()));
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            let mut flag = format!("--{long}");
            if arg.get_action().takes_values() {
                let name = arg
                    .get_value_names()
                    .and_then(|n| n.first())
                    .map_or_else(|| arg.get_id().as_str().to_uppercase(), |n| n.to_string());
                flag.push_str(&format!(" <{name}>"));
            }
            let mut help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
            if arg.is_required_set() {
                help.push_str(" (required)");
            }
            let defaults: Vec<String> = arg
                .get_default_values()
                .iter()
                .map(|v| v.to_string_lossy().into_owned())
                .collect();
            if !defaults.is_empty() {
                help.push_str(&format!(" [default: {}]", defaults.join(",")));
            }
            out.push_str(&format!("    {flag:<30} {help}\n"));
        }
    }
    out
}

/// 1 for bad input or settings, 2 for anything that failed while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Validation(_) | Error::Config(_) | Error::Parse { .. } | Error::Contract(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let table = flag_table(&cmd);
    let matches = match cmd.after_long_help(table).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => train::run_train(a),
        Command::Translate(a) => translate::run(a),
        Command::Evaluate(a) => evaluate::run_evaluate(a),
        Command::Coherence(a) => evaluate::run_coherence(a),
        Command::Ablate(a) => train::run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
