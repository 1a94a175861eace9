//! Subcommand implementations. Output goes to a caller-supplied writer.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdunet::graph::{build, export_dot};
use mdunet::metrics::{argmax_classes, evaluate};
use mdunet::par::{set_parallelism, Parallelism};
use mdunet::quant::{run_inq_schedule, InqAbort};
use mdunet::train::{train_loop, Dataset, IterationRecord, TrainConfig};
use mdunet::{ModelGraph, Shape};

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, RunConfig};
use crate::dataset::load_dataset;
use crate::pgm::{load_image, save_pgm, GrayImage};
use crate::synth::{synth_dataset, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "mdunet", version, about = "Densely connected U-Net segmentation toolkit")]
pub struct Cli {
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the variant, per-node shapes and parameter breakdown.
    Describe {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Square input size used for shape inference (default: synth_size).
        #[arg(long)]
        size: Option<usize>,
        /// Also write a Graphviz rendering of the graph here.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Train from scratch and write a checkpoint plus a CSV loss history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Report mean IoU and Dice of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Segment one image and write the mask as a {0,255} PGM.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the incremental quantization schedule, one checkpoint per step.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_prefix: String,
        /// Retraining data between steps.
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args, Clone, Default)]
#[group(multiple = false)]
pub struct DataArgs {
    /// Directory with images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use the generated blob dataset (training split for train/quantize,
    /// held-out split for eval).
    #[arg(long)]
    pub synthetic: bool,
}

enum Split {
    Train,
    Test,
}

/// Held-out synthetic images: a fifth of the training count from a
/// different seed.
pub fn synthetic_test_spec(spec: &SynthSpec) -> SynthSpec {
    SynthSpec {
        count: (spec.count / 5).max(1),
        seed: spec.seed.wrapping_add(0x9e37_79b9),
        ..spec.clone()
    }
}

fn load_data(args: &DataArgs, cfg: &RunConfig, split: Split) -> Result<Option<Dataset>> {
    if let Some(dir) = &args.data {
        return Ok(Some(
            load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        ));
    }
    if args.synthetic {
        let spec = match split {
            Split::Train => cfg.synth.clone(),
            Split::Test => synthetic_test_spec(&cfg.synth),
        };
        return Ok(Some(synth_dataset(&spec)));
    }
    Ok(None)
}

fn require(data: Option<Dataset>) -> Result<Dataset> {
    data.context("no dataset given (use --data DIR or --synthetic)")
}

fn config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn model_from(cfg: &RunConfig) -> Result<ModelGraph> {
    Ok(build(&cfg.arch, cfg.train.seed)?)
}

fn restore(cfg: &RunConfig, ckpt: &Path) -> Result<ModelGraph> {
    let mut model = model_from(cfg)?;
    Checkpoint::load(ckpt)
        .and_then(|c| c.apply_to(&mut model))
        .with_context(|| format!("checkpoint {}", ckpt.display()))?;
    Ok(model)
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("iteration,lr,loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.lr, r.loss));
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn describe(cfg: &RunConfig, size: usize, dot: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let model = model_from(cfg)?;
    let input = Shape::new(1, cfg.arch.input_channels, size, size);
    let shapes = model.shape_infer(input)?;
    writeln!(out, "variant: {}", cfg.arch.variant_name())?;
    writeln!(out, "{:>4}  {:<32} {:<10} {:<6} shape", "id", "node", "op", "level")?;
    for (node, shape) in model.nodes().iter().zip(&shapes) {
        writeln!(
            out,
            "{:>4}  {:<32} {:<10} {:<6} {shape}",
            node.id,
            node.name,
            node.op.label(),
            node.level.to_string()
        )?;
    }
    let pc = model.param_count();
    writeln!(out, "params.total: {}", pc.total)?;
    writeln!(out, "params.baseline: {}", pc.baseline)?;
    writeln!(out, "params.dense_encoder: {}", pc.dense_encoder)?;
    writeln!(out, "params.dense_decoder: {}", pc.dense_decoder)?;
    writeln!(out, "params.cross: {}", pc.cross)?;
    if let Some(path) = dot {
        write_file(path, export_dot(&model, input)?.as_bytes())?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Dataset, ckpt: &Path, history: &Path, out: &mut dyn Write) -> Result<()> {
    let mut model = model_from(cfg)?;
    let hist = train_loop(&mut model, data, &cfg.train, None)?;
    write_file(history, history_csv(&hist).as_bytes())?;
    Checkpoint::from_model(&model).save(ckpt)?;
    if let Some(last) = hist.last() {
        writeln!(out, "iterations: {}", hist.len())?;
        writeln!(out, "final_loss: {}", last.loss)?;
    }
    Ok(())
}

pub fn eval(model: &ModelGraph, data: &Dataset, out: &mut dyn Write) -> Result<()> {
    let m = evaluate(model, data)?;
    writeln!(out, "mean_iou: {}", m.mean_iou)?;
    writeln!(out, "dice: {}", m.dice)?;
    Ok(())
}

pub fn predict(model: &ModelGraph, image: &Path, dest: &Path) -> Result<()> {
    let img = load_image(image).with_context(|| format!("image {}", image.display()))?;
    let logits = model.infer(&img.to_tensor())?;
    let mask = argmax_classes(&logits);
    save_pgm(dest, &GrayImage::from_mask(img.width, img.height, &mask))
        .with_context(|| format!("writing {}", dest.display()))
}

/// Path of the checkpoint written after reaching `fraction`.
pub fn quant_step_path(prefix: &str, fraction: f64) -> PathBuf {
    PathBuf::from(format!("{prefix}{:03}.ckpt", (fraction * 100.0).round() as u32))
}

pub fn quantize(
    cfg: &RunConfig,
    mut model: ModelGraph,
    data: Option<&Dataset>,
    prefix: &str,
    out: &mut dyn Write,
) -> Result<()> {
    if data.is_none() && cfg.quant.retrain_iterations > 0 {
        bail!("retraining needs data (use --data DIR or --synthetic, or set quant_retrain_iterations = 0)");
    }
    let mut write_err = None;
    let result = run_inq_schedule(
        &mut model,
        &cfg.quant,
        |step, m: &mut ModelGraph| -> Result<()> {
            let (Some(data), n @ 1..) = (data, cfg.quant.retrain_iterations) else {
                return Ok(());
            };
            let tc = TrainConfig {
                iterations: Some(n),
                seed: cfg.train.seed.wrapping_add(step as u64 + 1),
                ..cfg.train.clone()
            };
            train_loop(m, data, &tc, None)?;
            Ok(())
        },
        |snap, m| {
            let path = quant_step_path(prefix, snap.fraction);
            match Checkpoint::from_model(m).save(&path) {
                Ok(()) => {
                    let _ = writeln!(out, "fraction {}: {}", snap.fraction, path.display());
                    ControlFlow::Continue(())
                }
                Err(e) => {
                    write_err = Some(anyhow::Error::new(e).context(format!("writing {}", path.display())));
                    ControlFlow::Break(())
                }
            }
        },
    );
    if let Some(e) = write_err {
        return Err(e);
    }
    match result {
        Ok(_) => Ok(()),
        Err(InqAbort { step, error, .. }) => Err(error.context(format!("quantization step {step}"))),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if cli.sequential {
        set_parallelism(Parallelism::Sequential);
    }
    match cli.command {
        Command::Describe { config: c, size, dot } => {
            let cfg = config(&c)?;
            describe(&cfg, size.unwrap_or(cfg.synth.size), dot.as_deref(), out)
        }
        Command::Train {
            config: c,
            data,
            out: ckpt,
            history,
        } => {
            let cfg = config(&c)?;
            let ds = require(load_data(&data, &cfg, Split::Train)?)?;
            let history = history.unwrap_or_else(|| ckpt.with_extension("csv"));
            train(&cfg, &ds, &ckpt, &history, out)
        }
        Command::Eval { config: c, ckpt, data } => {
            let cfg = config(&c)?;
            let ds = require(load_data(&data, &cfg, Split::Test)?)?;
            eval(&restore(&cfg, &ckpt)?, &ds, out)
        }
        Command::Predict {
            config: c,
            ckpt,
            image,
            out: dest,
        } => {
            let cfg = config(&c)?;
            predict(&restore(&cfg, &ckpt)?, &image, &dest)
        }
        Command::Quantize {
            config: c,
            ckpt,
            out_prefix,
            data,
        } => {
            let cfg = config(&c)?;
            let ds = load_data(&data, &cfg, Split::Train)?;
            quantize(&cfg, restore(&cfg, &ckpt)?, ds.as_ref(), &out_prefix, out)
        }
    }
}
