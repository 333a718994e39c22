//! Command-line front end: dataset generation, training, evaluation and
//! diagnostics.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use c2fda::checkpoint::{diff, Checkpoint};
use c2fda::config::Config;
use c2fda::detector::Annotation;
use c2fda::domains::{generate_domains, read_dataset, read_ppm, write_dataset, Sample, UnlabeledDataset, SPLITS};
use c2fda::eval::{
    class_features, detect_all, error_analysis, evaluate, export_attention, proxy_a_distance,
    write_errors_csv, EvalReport,
};
use c2fda::trainer::{
    load_state, run as train_run, save_state, Arm, Phase, TrainState, METRICS_HEADER,
};
use c2fda::Error;
use clap::{Args, Parser, Subcommand};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Parser, Debug)]
#[command(name = "c2fda", version, about = "Coarse-to-fine feature adaptation on synthetic detection domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`key = value` lines; may be empty).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the command (`data.seed` for generate,
    /// `train.seed` otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Training {
    /// Dataset root written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the checkpoint every this many iterations.
    #[arg(long, default_value_t = 0)]
    save_every: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the source and target datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on the labelled source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Adapt a pretrained detector to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Pretrained checkpoint (ignored when resuming).
        #[arg(long, required_unless_present = "resume")]
        pretrained: Option<PathBuf>,
        /// full, without_psa, baseline_3dc or source_only.
        #[arg(long, default_value = "full", value_parser = parse_arm)]
        arm: Arm,
    },
    /// mAP on a labelled split, optionally with the gain over a baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the detector to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint whose mAP the gain row is measured against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// One of source/train, source/test, target/train, target/test.
        #[arg(long, default_value = "target/test")]
        split: String,
    },
    /// Proxy A-distance between source and target foreground features.
    Adistance {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the detector to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Error profile of the top-scoring detections.
    Errors {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the detector to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of source/train, source/test, target/train, target/test.
        #[arg(long, default_value = "target/test")]
        split: String,
    },
    /// Write the attention map of an image as a PGM.
    Attention {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding the detector.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM image.
        #[arg(long)]
        image: PathBuf,
    },
    /// List the tensors whose values differ between two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    Arm::parse(s).ok_or_else(|| format!("unknown arm `{s}`"))
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on usage or configuration errors, 2 on data or checkpoint errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

type Result<T> = c2fda::Result<T>;

fn load_config(common: &Common) -> Result<Config> {
    Config::load(&common.config)
}

fn prepare_out(common: &Common, config: &Config) -> Result<()> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    config.write_resolved(&common.out)
}

fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    if !SPLITS.contains(&split) {
        return Err(Error::InvalidArgument(format!(
            "unknown split `{split}`; expected one of {SPLITS:?}"
        )));
    }
    read_dataset(&root.join(split))
}

fn load_detector(path: &Path) -> Result<c2fda::detector::DetectorModel> {
    Ok(load_state(path)?.0.detector)
}

fn open_metrics(out: &Path, append: bool) -> Result<BufWriter<File>> {
    let path = out.join("metrics.csv");
    let existing = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    if !existing {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

/// Trains `state` to `until`, saving every `save_every` iterations and at
/// the end.
#[allow(clippy::too_many_arguments)]
fn train_to(
    state: &mut TrainState,
    config: &Config,
    source: &[Sample],
    target: Option<&UnlabeledDataset>,
    until: usize,
    training: &Training,
    out: &Path,
) -> Result<()> {
    let mut metrics = open_metrics(out, training.resume.is_some())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let step = if training.save_every == 0 { until.max(1) } else { training.save_every };
    while state.iteration < until {
        let next = ((state.iteration / step + 1) * step).min(until);
        let result = train_run(state, &config.train, source, target, next, &mut metrics);
        metrics.flush().map_err(|e| Error::io(out.join("metrics.csv"), e))?;
        result?;
        save_state(&ckpt, state, config)?;
    }
    save_state(&ckpt, state, config)
}

fn resumed(path: &Path, phase: Phase) -> Result<TrainState> {
    let (state, _) = load_state(path)?;
    if state.phase != phase {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} state, not {}",
            path.display(),
            state.phase.name(),
            phase.name()
        )));
    }
    Ok(state)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { common } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.data_seed = seed;
            }
            prepare_out(&common, &config)?;
            let pair = generate_domains(&config.scene, &config.shift, &config.data, config.data_seed)?;
            let splits = [&pair.source_train, &pair.source_test, &pair.target_train, &pair.target_test];
            for (name, samples) in SPLITS.iter().zip(splits) {
                write_dataset(samples, &common.out.join(name))?;
            }
            log::info!("wrote {} images under {}", splits.iter().map(|s| s.len()).sum::<usize>(), common.out.display());
            Ok(())
        }
        Command::Pretrain { common, training } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.train.seed = seed;
            }
            prepare_out(&common, &config)?;
            let source = load_split(&training.data, "source/train")?;
            let mut state = match &training.resume {
                Some(p) => resumed(p, Phase::Pretrain)?,
                None => TrainState::new_pretrain(&config.train)?,
            };
            let until = config.train.pretrain_iters;
            train_to(&mut state, &config, &source, None, until, &training, &common.out)
        }
        Command::Adapt { common, training, pretrained, arm } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.train.seed = seed;
            }
            config.train = arm.apply(&config.train);
            prepare_out(&common, &config)?;
            let source = load_split(&training.data, "source/train")?;
            let target = UnlabeledDataset::new(load_split(&training.data, "target/train")?);
            let mut state = match (&training.resume, &pretrained) {
                (Some(p), _) => resumed(p, Phase::Adapt)?,
                (None, Some(p)) => {
                    let pre = load_state(p)?.0;
                    TrainState::new_adapt(&config.train, &pre, &source, Some(&target))?
                }
                (None, None) => unreachable!("clap requires --pretrained or --resume"),
            };
            let until = config.train.adapt_iters;
            train_to(&mut state, &config, &source, Some(&target), until, &training, &common.out)
        }
        Command::Eval { common, data, checkpoint, baseline, split } => {
            let config = load_config(&common)?;
            prepare_out(&common, &config)?;
            let samples = load_split(&data, &split)?;
            let mut report = evaluate(&load_detector(&checkpoint)?, &samples, &config.eval)?;
            if let Some(b) = baseline {
                let base: EvalReport = evaluate(&load_detector(&b)?, &samples, &config.eval)?;
                report = report.with_baseline(&base);
            }
            report.write_csv(&common.out.join("eval.csv"))?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Adistance { common, data, checkpoint } => {
            let config = load_config(&common)?;
            prepare_out(&common, &config)?;
            let seed = common.seed.unwrap_or(config.train.seed);
            let model = load_detector(&checkpoint)?;
            let src = class_features(&model, &load_split(&data, "source/test")?)?;
            let tgt = class_features(&model, &load_split(&data, "target/test")?)?;
            let mut csv = String::from("class,d_a,epsilon\n");
            for k in 0..model.config().classes {
                let empty = Vec::new();
                let (s, t) = (src.get(&k).unwrap_or(&empty), tgt.get(&k).unwrap_or(&empty));
                match proxy_a_distance(s, t, &config.eval, seed) {
                    Ok(d) => csv.push_str(&format!("{k},{},{}\n", d.d_a, d.epsilon)),
                    Err(e) => {
                        log::warn!("class {k}: {e}");
                        csv.push_str(&format!("{k},undefined,undefined\n"));
                    }
                }
            }
            let pooled = |m: &std::collections::BTreeMap<usize, Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
                m.values().flatten().cloned().collect()
            };
            let d = proxy_a_distance(&pooled(&src), &pooled(&tgt), &config.eval, seed)?;
            csv.push_str(&format!("pooled,{},{}\n", d.d_a, d.epsilon));
            let path = common.out.join("adistance.csv");
            fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
            Ok(())
        }
        Command::Errors { common, data, checkpoint, split } => {
            let config = load_config(&common)?;
            prepare_out(&common, &config)?;
            let model = load_detector(&checkpoint)?;
            let samples = load_split(&data, &split)?;
            let dets = detect_all(&model, &samples, &config.eval)?;
            let gts: Vec<Vec<Annotation>> = samples.iter().map(|s| s.annotations.clone()).collect();
            let profile = error_analysis(&dets, &gts, model.config().classes)?;
            write_errors_csv(&profile, &common.out.join("errors.csv"))?;
            print!("{}", profile.to_csv());
            Ok(())
        }
        Command::Attention { common, checkpoint, image } => {
            let config = load_config(&common)?;
            prepare_out(&common, &config)?;
            let model = load_detector(&checkpoint)?;
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let out = common.out.join(format!("{stem}_attention.pgm"));
            export_attention(&model, &read_ppm(&image)?, &out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Diff { a, b } => {
            let (a, b) = (Checkpoint::load(&a)?, Checkpoint::load(&b)?);
            for name in diff(&a, &b) {
                println!("{name}");
            }
            Ok(())
        }
    }
}
