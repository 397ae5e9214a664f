use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidmae::Result;
use vidmae_cli::{
    cmd_ablate, cmd_eval, cmd_extract, cmd_finetune, cmd_gen, cmd_pretrain, cmd_temporal, error_line, split_settings,
    RunConfig,
};

/// Masked video autoencoder pretraining, fine-tuning and evaluation on synthetic clips.
///
/// Any config key can be passed as `--key value` after the command, e.g.
/// `vidmae pretrain --strategy surgmae --ratio 0.9 --steps 200`.
#[derive(Parser, Debug)]
#[command(name = "vidmae", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (dataset dir for `gen`, parent of run dirs otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `tiny` (default) or `vit-b`.
    #[arg(long)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Settings {
    /// `--key value` config overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    words: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic long videos (RAWCLIP files + manifests).
    Gen(Settings),
    /// Pretrain the masked autoencoder.
    Pretrain(Settings),
    /// Fine-tune a clip classifier, optionally from `--checkpoint mae.ckpt`.
    Finetune(Settings),
    /// Extract per-clip features with `--checkpoint classifier.ckpt`.
    Extract(Settings),
    /// Train the Bi-GRU on `--features features.ckpt`.
    Temporal(Settings),
    /// Score held-out videos with `--checkpoint classifier.ckpt [--gru gru.ckpt]`.
    Eval(Settings),
    /// Run one full pipeline per value of `--axis` (`--values a,b,...`).
    Ablate(Settings),
}

fn run(cli: Cli) -> Result<()> {
    let (command, words) = match cli.command {
        Command::Gen(s) => ("gen", s.words),
        Command::Pretrain(s) => ("pretrain", s.words),
        Command::Finetune(s) => ("finetune", s.words),
        Command::Extract(s) => ("extract", s.words),
        Command::Temporal(s) => ("temporal", s.words),
        Command::Eval(s) => ("eval", s.words),
        Command::Ablate(s) => ("ablate", s.words),
    };
    let extra: &[&str] = if command == "ablate" { &["axis", "values"] } else { &[] };
    let (mut globals, options) = split_settings(&words, extra)?;
    let mut flags = Vec::new();
    if let Some(p) = cli.preset {
        flags.push(("preset".to_string(), p));
    }
    if let Some(s) = cli.seed {
        flags.push(("seed".to_string(), s.to_string()));
    }
    flags.append(&mut globals.settings);
    globals.config = globals.config.or(cli.config);
    globals.out = globals.out.or(cli.out);
    let cfg = RunConfig::load(globals.config.as_deref(), flags)?;
    log::info!("config {}", cfg.hash());
    match command {
        "gen" => cmd_gen(&cfg, &globals),
        "pretrain" => cmd_pretrain(&cfg, &globals),
        "finetune" => cmd_finetune(&cfg, &globals),
        "extract" => cmd_extract(&cfg, &globals),
        "temporal" => cmd_temporal(&cfg, &globals),
        "eval" => cmd_eval(&cfg, &globals),
        _ => {
            let opt = |k: &str| options.iter().rev().find(|(o, _)| o == k).map(|(_, v)| v.as_str());
            let axis = opt("axis").ok_or_else(|| vidmae::Error::Config("ablate needs `--axis <name>`".into()))?;
            cmd_ablate(&cfg, &globals, axis, opt("values"))
        }
    }
    .map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
