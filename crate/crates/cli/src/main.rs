//! Command-line entry point for the adaptation pipeline.
//!
//! One JSON config tree drives every subcommand; `--set key.path=value`
//! overrides individual leaves and `--seed` is shorthand for the training
//! seed. Flow: `generate-data` writes the paired datasets, `train` runs
//! one phase (pretrain, or adapt from a pretrain checkpoint), `eval`
//! scores a checkpoint or a directory of prediction PNGs on held-out
//! target depth, `predict` writes depth PNGs, `visualize` colormaps them.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use depth_adapt::config::{load_run_config, RunConfig, OUT_ROOT_ENV};
use depth_adapt::data::io::{
    load_depth_png, load_rgb_png, save_color_png, save_depth_png,
};
use depth_adapt::data::synth::generate_datasets;
use depth_adapt::data::{
    filter_split, load_dataset, load_split, DepthMap, Domain,
};
use depth_adapt::eval::{evaluate_pairs, render_table, write_report_files, colorize_depth};
use depth_adapt::ndarray::Array2;
use depth_adapt::networks::checkpoint::{copy_params_into, Checkpoint};
use depth_adapt::networks::DepthUNet;
use depth_adapt::nn::Params;
use depth_adapt::rng::stream_rng;
use depth_adapt::train::{train_phase, Phase, TrainData, Trainer};
use depth_adapt::{Error, Result};

#[derive(Parser)]
#[command(name = "depth-adapt", version, about = "Domain-adaptive monocular depth estimation")]
struct Cli {
    /// JSON config file; absent sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config leaf (repeatable), e.g. --set train.lr=2e-4.
    #[arg(long = "set", global = true, value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,
    /// Random seed; shorthand for --set train.seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the paired synthetic datasets under data_root.
    GenerateData,
    /// Runs the configured training phase into an output directory.
    Train {
        /// Pretrain checkpoint that seeds the adapt phase.
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// Mid-run checkpoint of the same phase and config to continue.
        #[arg(long, value_name = "CKPT", conflicts_with = "from")]
        resume: Option<PathBuf>,
        /// Output directory; default <out_root>/<phase>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Scores target-split predictions against held-out depth.
    Eval {
        /// Checkpoint whose depth network produces the predictions.
        #[arg(long, value_name = "CKPT", required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Directory of <id>.png depth maps to score instead.
        #[arg(long, value_name = "DIR", conflicts_with = "checkpoint")]
        pred_dir: Option<PathBuf>,
        /// Split file under <data_root>/splits.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory; default <out_root>/eval.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Writes 16-bit depth PNGs for RGB images.
    Predict {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// RGB PNGs; each side must be a multiple of 16 pixels.
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
        /// Output directory; default <out_root>/predict.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Renders depth PNGs as color PNGs.
    Visualize {
        /// Depth PNGs as written by predict or the generator.
        #[arg(required = true, value_name = "DEPTH")]
        depths: Vec<PathBuf>,
        /// Nearest depth of the color range, meters.
        #[arg(long, default_value_t = 0.5)]
        near: f64,
        /// Farthest depth of the color range, meters.
        #[arg(long, default_value_t = 80.0)]
        far: f64,
        /// Output directory; default <out_root>/visualize.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Diverged { .. } => 4,
                _ => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.set.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("train.seed={seed}"));
    }
    // Any failure while assembling the config is a config error for exit
    // code purposes, even when it surfaces as an IO or JSON problem.
    let cfg = load_run_config(cli.config.as_deref(), &sets).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })?;
    let out_root = cfg.out_root_with(std::env::var_os(OUT_ROOT_ENV));

    match cli.cmd {
        Cmd::GenerateData => {
            let summary = generate_datasets(&cfg.synth, cfg.train.seed, &cfg.data_root)?;
            println!(
                "wrote {} source samples ({} instances) and {} target samples ({} instances) under {}",
                summary.n_source,
                summary.instances_source,
                summary.n_target,
                summary.instances_target,
                cfg.data_root.display()
            );
        }
        Cmd::Train { from, resume, out } => {
            let out_dir = out.unwrap_or_else(|| out_root.join(cfg.train.phase.as_str()));
            let outcome = if let Some(ckpt) = resume {
                let data = TrainData::<f32>::prepare(&cfg.data_root, &cfg.train)?;
                let mut trainer = Trainer::resume(cfg.train.clone(), data, &ckpt)?;
                trainer.run(&out_dir)?
            } else {
                if cfg.train.phase == Phase::Adapt && from.is_none() {
                    return Err(Error::Config(
                        "the adapt phase requires --from <pretrain checkpoint>".into(),
                    ));
                }
                train_phase(&cfg.data_root, &out_dir, &cfg.train, from.as_deref())?
            };
            println!(
                "{} finished after {} iterations; checkpoint {}",
                cfg.train.phase.as_str(),
                outcome.iterations_run,
                outcome.checkpoint_path.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            pred_dir,
            split,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| out_root.join("eval"));
            let outcome = run_eval(&cfg, checkpoint.as_deref(), pred_dir.as_deref(), &split)?;
            write_report_files(&out_dir, &outcome)?;
            println!("{}", render_table(&outcome.report));
            println!("report written to {}", out_dir.display());
        }
        Cmd::Predict {
            checkpoint,
            images,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| out_root.join("predict"));
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let (net, params) = load_depth_net(&cfg, &checkpoint)?;
            for src in &images {
                let image = load_rgb_png(src)?;
                let pred = predict_depth(&net, &params, &image)?;
                let name = output_name(src, "_depth.png")?;
                let dst = out_dir.join(name);
                save_depth_png(&dst, &pred)?;
                println!("{} -> {}", src.display(), dst.display());
            }
        }
        Cmd::Visualize {
            depths,
            near,
            far,
            out,
        } => {
            if !(near > 0.0 && far > near) {
                return Err(Error::Config(format!(
                    "need 0 < near < far, got near={near} far={far}"
                )));
            }
            let out_dir = out.unwrap_or_else(|| out_root.join("visualize"));
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for src in &depths {
                let depth = load_depth_png(src)?;
                let values = depth.values.mapv(f64::from);
                let img = colorize_depth(&values, &depth.valid_mask, (near, far));
                let name = output_name(src, "_color.png")?;
                let dst = out_dir.join(name);
                save_color_png(&dst, &img)?;
                println!("{} -> {}", src.display(), dst.display());
            }
        }
    }
    Ok(())
}

/// Rebuilds the depth network at the configured width and fills it from
/// the checkpoint's depth section.
fn load_depth_net(cfg: &RunConfig, ckpt_path: &Path) -> Result<(DepthUNet, Params<f32>)> {
    let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
    let mut params = Params::new();
    // Weights are about to be overwritten; any stream seeds the shapes.
    let mut rng = stream_rng(0, 0);
    let net = DepthUNet::new(&mut params, &mut rng, "depth", 3, cfg.train.network.base_width);
    let section = ckpt.section("depth").ok_or_else(|| Error::Checkpoint {
        path: ckpt_path.to_path_buf(),
        message: "missing depth section".into(),
    })?;
    copy_params_into(&section.params, &mut params)?;
    Ok((net, params))
}

/// Full-resolution prediction for one image, as an always-valid map.
fn predict_depth(net: &DepthUNet, params: &Params<f32>, image: &Array3f) -> Result<DepthMap> {
    let (preds, _) = net.forward_depth(params, image)?;
    let full = preds[0].index_axis(depth_adapt::ndarray::Axis(0), 0).to_owned();
    let valid = Array2::from_elem(full.dim(), true);
    Ok(DepthMap {
        values: full,
        valid_mask: valid,
    })
}

type Array3f = depth_adapt::ndarray::Array3<f32>;

fn run_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
    split: &str,
) -> Result<depth_adapt::eval::EvalOutcome> {
    let ids = load_split(&cfg.data_root, split)?;
    let target = load_dataset(&cfg.data_root, Domain::Target)?;
    let samples = filter_split(target.samples, &ids);
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "split {split:?} selects no target samples under {}",
            cfg.data_root.display()
        )));
    }
    let net = match checkpoint {
        Some(path) => Some(load_depth_net(cfg, path)?),
        None => None,
    };
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in &samples {
        let gt = depth_adapt::data::io::load_eval_depth(&cfg.data_root, &sample.id)?;
        let pred: Array2<f64> = match (&net, pred_dir) {
            (Some((net, params)), _) => {
                let map = predict_depth(net, params, &sample.image)?;
                map.values.mapv(f64::from)
            }
            (None, Some(dir)) => {
                let map = load_depth_png(&dir.join(format!("{}.png", sample.id)))?;
                map.values.mapv(f64::from)
            }
            (None, None) => unreachable!("clap enforces checkpoint xor pred_dir"),
        };
        pairs.push((sample.id.clone(), pred, gt));
    }
    evaluate_pairs(pairs, &cfg.eval)
}

/// `dir/name.png -> name<suffix>`, rejecting paths without a UTF-8 stem.
fn output_name(src: &Path, suffix: &str) -> Result<String> {
    let stem = src
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("cannot derive an output name from {}", src.display())))?;
    Ok(format!("{stem}{suffix}"))
}
