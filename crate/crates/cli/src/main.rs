use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use anrlab::attention::HyperArch;
use anrlab::experiment::{run, ExperimentConfig, ExperimentKind, ModelChoice};
use anrlab::sampling::{ClampTarget, SamplerMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "anrlab", version, about = "Localized attention INR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed vs variational coordinates on a 1D multi-tone signal.
    Fit1d {
        #[command(flatten)]
        shared: Shared,
        /// Number of training points on (-1, 1).
        #[arg(long)]
        points: Option<usize>,
        /// Number of target frequencies.
        #[arg(long)]
        frequencies: Option<usize>,
        /// Largest target frequency bin.
        #[arg(long)]
        max_frequency: Option<usize>,
        /// Evaluation grid density factor.
        #[arg(long)]
        upsample: Option<usize>,
        #[command(flatten)]
        mlp: MlpArgs,
    },
    /// Fit ANR and a parameter-matched MLP-INR to one image.
    FitImage {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long, value_enum)]
        model: Option<Model>,
        /// Super-resolution factor of the extra dense reconstruction.
        #[arg(long)]
        sr: Option<usize>,
        #[command(flatten)]
        anr: AnrArgs,
        #[command(flatten)]
        mlp: MlpArgs,
    },
    /// Paired fits with and without the attention threshold.
    AblateThreshold {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        anr: AnrArgs,
    },
    /// Train a toy hypernetwork that predicts R-tokens.
    HypernetDemo {
        #[command(flatten)]
        shared: Shared,
        /// Directory of equal-size PGM/PPM images.
        #[arg(long, conflicts_with = "synthetic")]
        dataset: Option<PathBuf>,
        /// Generate this many synthetic images instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Side length of synthetic images.
        #[arg(long)]
        size: Option<usize>,
        /// Images held out for evaluation.
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[command(flatten)]
        anr: AnrArgs,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
    },
}

#[derive(Args)]
struct Shared {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output root; bundles go to <out>/<experiment>-<seed>/.
    #[arg(long, env = "ANRLAB_OUT")]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention threshold.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    /// Positional-embedding frequency scale.
    #[arg(long)]
    pe_sigma: Option<f64>,
    #[arg(long, value_enum)]
    clamp_target: Option<Clamp>,
    #[arg(long)]
    lr: Option<f64>,
    /// Run consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ImageArgs {
    /// PGM/PPM image; defaults to a procedural test image.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Center crop (or synthetic) side length.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct AnrArgs {
    /// Number of R-tokens.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    pe_features: Option<usize>,
}

#[derive(Args)]
struct MlpArgs {
    #[arg(long)]
    mlp_depth: Option<usize>,
    /// Hidden width; 0 matches the ANR representation size.
    #[arg(long)]
    mlp_width: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Fixed,
    Variational,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clamp {
    V,
    AlphaV,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Anr,
    MlpInr,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    EncoderDecoder,
    EncoderOnly,
}

struct Overrides(Map<String, Value>);

impl Overrides {
    fn set<T: serde::Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.insert(key.to_string(), json!(v));
        }
    }

    fn shared(&mut self, s: &Shared) {
        self.set("seed", s.seed);
        self.set("steps", s.steps);
        self.set("out_dir", s.out.as_ref());
        self.set("m", s.m);
        self.set(
            "sampler",
            s.sampler.map(|v| match v {
                Sampler::Fixed => SamplerMode::Fixed,
                Sampler::Variational => SamplerMode::Variational,
            }),
        );
        self.set("pe_sigma", s.pe_sigma);
        self.set(
            "clamp_target",
            s.clamp_target.map(|v| match v {
                Clamp::V => ClampTarget::V,
                Clamp::AlphaV => ClampTarget::AlphaV,
            }),
        );
        self.set("lr", s.lr);
        self.set("seeds", s.seeds);
    }

    fn anr(&mut self, a: &AnrArgs) {
        self.set("tokens", a.tokens);
        self.set("token_dim", a.token_dim);
        self.set("pe_features", a.pe_features);
    }

    fn mlp(&mut self, a: &MlpArgs) {
        self.set("mlp_depth", a.mlp_depth);
        self.set("mlp_width", a.mlp_width);
    }

    fn image(&mut self, a: &ImageArgs) {
        self.set("image", a.image.as_ref());
        self.set("size", a.size);
    }
}

fn resolve(command: &Command) -> anyhow::Result<(ExperimentConfig, bool, bool)> {
    let mut o = Overrides(Map::new());
    let (kind, shared) = match command {
        Command::Fit1d {
            shared,
            points,
            frequencies,
            max_frequency,
            upsample,
            mlp,
        } => {
            o.set("points", *points);
            o.set("frequencies", *frequencies);
            o.set("max_frequency", *max_frequency);
            o.set("upsample", *upsample);
            o.mlp(mlp);
            (ExperimentKind::Fit1d, shared)
        }
        Command::FitImage {
            shared,
            image,
            model,
            sr,
            anr,
            mlp,
        } => {
            o.image(image);
            o.set(
                "model",
                model.map(|m| match m {
                    Model::Anr => ModelChoice::Anr,
                    Model::MlpInr => ModelChoice::MlpInr,
                    Model::Both => ModelChoice::Both,
                }),
            );
            o.set("sr", *sr);
            o.anr(anr);
            o.mlp(mlp);
            (ExperimentKind::FitImage, shared)
        }
        Command::AblateThreshold { shared, image, anr } => {
            o.image(image);
            o.anr(anr);
            (ExperimentKind::AblateThreshold, shared)
        }
        Command::HypernetDemo {
            shared,
            dataset,
            synthetic,
            size,
            held_out,
            batch,
            arch,
            anr,
        } => {
            o.set("dataset", dataset.as_ref());
            o.set("synthetic", *synthetic);
            o.set("size", *size);
            o.set("held_out", *held_out);
            o.set("batch", *batch);
            o.set(
                "arch",
                arch.map(|a| match a {
                    Arch::EncoderDecoder => HyperArch::EncoderDecoder,
                    Arch::EncoderOnly => HyperArch::EncoderOnly,
                }),
            );
            o.anr(anr);
            (ExperimentKind::HypernetDemo, shared)
        }
        Command::Gradcheck { shared } => (ExperimentKind::Gradcheck, shared),
    };
    o.shared(shared);
    let cfg = ExperimentConfig::resolve(kind, shared.config.as_deref(), o.0)?;
    // Per-seed fan-out applies to single-fit experiments; the others consume `seeds` themselves.
    let fan_out = matches!(kind, ExperimentKind::Fit1d | ExperimentKind::HypernetDemo | ExperimentKind::Gradcheck);
    Ok((cfg, shared.dry_run, fan_out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: &Command) -> anyhow::Result<bool> {
    let (cfg, dry_run, fan_out) = resolve(command)?;
    if dry_run {
        println!("{}", cfg.to_json());
        return Ok(true);
    }
    let configs: Vec<ExperimentConfig> = if fan_out {
        (0..cfg.seeds as u64)
            .map(|i| ExperimentConfig {
                seed: cfg.seed + i,
                seeds: 1,
                ..cfg.clone()
            })
            .collect()
    } else {
        vec![cfg]
    };
    let mut all_passed = true;
    for cfg in &configs {
        let outcome = run(cfg).with_context(|| format!("{} seed {}", cfg.experiment, cfg.seed))?;
        println!("{}", outcome.dir.display());
        for check in &outcome.checks {
            println!("  [{}] {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
        }
        all_passed &= outcome.passed();
    }
    Ok(all_passed)
}
