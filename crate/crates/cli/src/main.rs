use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

#[derive(Parser)]
#[command(name = "poirec", version, about = "Next-POI recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and encode a check-in TSV.
    Ingest(Opts),
    /// Train one variant and write a checkpoint and loss log.
    Train(Opts),
    /// Rank the test check-ins with a trained checkpoint.
    Evaluate(Opts),
    /// Train and evaluate several variants with one configuration.
    Ablate(Opts),
    /// Compare backprop gradients with finite differences.
    Gradcheck(Opts),
    /// Write a synthetic corpus with planted periodic routines.
    Synth(Opts),
}

#[derive(Args, Default)]
struct Opts {
    /// key = value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    /// Negatives per positive.
    #[arg(long)]
    neg: Option<String>,
    #[arg(long)]
    dropout_inter: Option<String>,
    #[arg(long)]
    dropout_mlp: Option<String>,
    #[arg(long)]
    s1_window: Option<String>,
    #[arg(long)]
    seq_cap: Option<String>,
    #[arg(long)]
    t_min: Option<String>,
    /// true (default) draws new negatives every epoch.
    #[arg(long)]
    resample_negatives: Option<String>,
    #[arg(long)]
    early_stopping: bool,
    #[arg(long)]
    patience: Option<String>,
    /// Run a gradient check before the first epoch.
    #[arg(long)]
    grad_check: bool,
    /// full, long, short, or a subset such as l+s1+s4.
    #[arg(long)]
    variant: Option<String>,
    /// Variants for `ablate`, separated by spaces or semicolons.
    #[arg(long)]
    variants: Option<String>,
    /// att-qk, att-k or seq-avg.
    #[arg(long)]
    long_setting: Option<String>,
    /// json or csv.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    min_poi_count: Option<String>,
    #[arg(long)]
    max_history: Option<String>,
    #[arg(long)]
    min_history: Option<String>,
    #[arg(long)]
    users: Option<String>,
    #[arg(long)]
    areas: Option<String>,
    #[arg(long)]
    pois_per_area: Option<String>,
    #[arg(long)]
    categories: Option<String>,
    /// Time blocks per day for `synth`.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    routines: Option<String>,
    #[arg(long)]
    checkins_per_user: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    /// Finite-difference step for `gradcheck`.
    #[arg(long)]
    eps: Option<String>,
    /// Coordinates sampled per large leaf in `gradcheck`.
    #[arg(long)]
    coords: Option<String>,
    /// Training instances checked by `gradcheck`.
    #[arg(long)]
    instances: Option<String>,
}

impl Opts {
    fn settings(&self) -> anyhow::Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let mut flags = Settings::default();
        let pairs = [
            ("dataset", &self.dataset),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("adam_eps", &self.adam_eps),
            ("neg", &self.neg),
            ("dropout_inter", &self.dropout_inter),
            ("dropout_mlp", &self.dropout_mlp),
            ("s1_window", &self.s1_window),
            ("seq_cap", &self.seq_cap),
            ("t_min", &self.t_min),
            ("resample_negatives", &self.resample_negatives),
            ("patience", &self.patience),
            ("variant", &self.variant),
            ("variants", &self.variants),
            ("long_setting", &self.long_setting),
            ("format", &self.format),
            ("min_poi_count", &self.min_poi_count),
            ("max_history", &self.max_history),
            ("min_history", &self.min_history),
            ("users", &self.users),
            ("areas", &self.areas),
            ("pois_per_area", &self.pois_per_area),
            ("categories", &self.categories),
            ("blocks", &self.blocks),
            ("routines", &self.routines),
            ("checkins_per_user", &self.checkins_per_user),
            ("noise", &self.noise),
            ("eps", &self.eps),
            ("coords", &self.coords),
            ("instances", &self.instances),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.set(k, v.clone())?;
            }
        }
        if self.early_stopping {
            flags.set("early_stopping", "true")?;
        }
        if self.grad_check {
            flags.set("grad_check", "true")?;
        }
        s.overlay(flags);
        Ok(s)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(o) => commands::ingest(&o.settings()?),
        Command::Train(o) => commands::train(&o.settings()?),
        Command::Evaluate(o) => commands::evaluate(&o.settings()?),
        Command::Ablate(o) => commands::ablate(&o.settings()?),
        Command::Gradcheck(o) => commands::gradcheck(&o.settings()?),
        Command::Synth(o) => commands::synth(&o.settings()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
