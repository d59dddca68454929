use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hmrec::checkpoint;
use hmrec::data::synth::{generate, SynthConfig};
use hmrec::data::{
    load_interactions, prepare, split_leave_one_out, time_histogram, Dataset, LoadOptions, RawInputs, SplitOptions,
    INTERACTIONS_FILE,
};
use hmrec::diagnostics;
use hmrec::train::{evaluate, run, CONFIG_FILE};
use hmrec::{Config, Model, Variant};

#[derive(Parser)]
#[command(name = "hmrec", version, about = "Multi-modal sequential recommender with time-aware mixtures of experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw interaction log to its k-core and write a prepared dataset.
    Prepare {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        txt_features: PathBuf,
        #[arg(long)]
        img_features: PathBuf,
        #[arg(long, default_value_t = 5)]
        kcore: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic prepared dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 60)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Let each user's preference move between two interests over time.
        #[arg(long)]
        drift: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; prints one JSON metrics object per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ablation such as -TMoE or -Image.
        #[arg(long, allow_hyphen_values = true)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint; reads the run configuration saved next to it.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Finite-difference gradient check of the tiny model.
    Gradcheck {
        /// Restrict to one parameter group: item, imoe, tmoe, enc, cp or pcl.
        #[arg(long)]
        module: Option<String>,
    },
    /// Equal-width histogram of interaction timestamps.
    Histogram {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_dataset(dir: &Path, config: &Config) -> Result<Dataset> {
    let opts = LoadOptions { text: config.enable_text, image: config.enable_image };
    Dataset::load(dir, opts).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Prepare { interactions, items, txt_features, img_features, kcore, out } => {
            let inputs = RawInputs {
                interactions: &interactions,
                items: &items,
                text_features: &txt_features,
                image_features: &img_features,
            };
            print_json(&prepare(&inputs, kcore, &out)?)?;
        }
        Command::Synth { users, items, seed, drift, out } => {
            let data = generate(&SynthConfig { n_users: users, n_items: items, seed, drift, ..SynthConfig::default() })?;
            print_json(&data.write(&out)?)?;
        }
        Command::Train { data, config, out, variant } => {
            let mut config = match config {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            if let Some(v) = variant {
                config.apply_variant(v);
            }
            let dataset = load_dataset(&data, &config)?;
            let mut failed = None;
            run(&config, &dataset, &out, |report| {
                if let Err(e) = print_json(report) {
                    failed.get_or_insert(e);
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
        }
        Command::Eval { data, checkpoint: path, split } => {
            let cfg_path = path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            let config = Config::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
            let dataset = load_dataset(&data, &config)?;
            let mut model: Model<f32> = Model::new(&config, &dataset)?;
            checkpoint::load(&mut model.params, &path)?;
            let splits = split_leave_one_out(
                &dataset.sequences,
                SplitOptions { max_len: config.max_len, per_target: config.per_target },
            )?;
            let (name, examples) = match split {
                Split::Valid => ("valid", &splits.valid),
                Split::Test => ("test", &splits.test),
            };
            let metrics = evaluate(&model, &dataset, examples, config.batch_size)?;
            let mut value = serde_json::to_value(metrics)?;
            value["split"] = name.into();
            print_json(&value)?;
        }
        Command::Gradcheck { module } => {
            let report = diagnostics::tiny_grad_check(module.as_deref())?;
            for t in &report.tensors {
                let status = if t.max_rel_error <= report.tolerance { "ok" } else { "FAIL" };
                println!("{status:4} {:40} {:>6} entries  rel {:.3e}  abs {:.3e}", t.name, t.entries, t.max_rel_error, t.max_abs_error);
            }
            let failed = report.failures().count();
            println!("{} tensors checked, {failed} above {:e}", report.tensors.len(), report.tolerance);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Histogram { data, bins } => {
            if bins == 0 {
                bail!("--bins must be positive");
            }
            let log = load_interactions(&data.join(INTERACTIONS_FILE))?;
            let counts = time_histogram(&log, bins);
            let lo = log.timestamps().min();
            let hi = log.timestamps().max();
            print_json(&serde_json::json!({ "bins": bins, "min": lo, "max": hi, "counts": counts }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
