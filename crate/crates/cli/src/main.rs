use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sttn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sttn::config::TrainConfig;
use sttn::data::{
    format_f64, load_distance_csv, load_speed_csv, prepare_datasets, prepare_datasets_with_stats,
    write_distance_csv, write_speed_csv, Datasets, SpeedSeries, WindowedDataset,
};
use sttn::eval::{evaluate, historical_average, InferenceMode, DEFAULT_HORIZONS};
use sttn::graph::TrafficGraph;
use sttn::model::{ModelConfig, Sttn, GRADCHECK_STEP};
use sttn::synth::synth_generate;
use sttn::train::{log_csv, train};
use sttn::Tensor;

#[derive(Parser)]
#[command(name = "sttn", version, about = "Spatial-temporal transformer traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Ms,
    Ar,
    /// Historical-average baseline; needs no checkpoint.
    Ha,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ring-road dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 600)]
        length: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write a checkpoint directory with its training log.
    Train {
        #[arg(long)]
        speeds: PathBuf,
        #[arg(long)]
        distances: PathBuf,
        /// `key = value` file; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Independent runs with seeds seed, seed+1, ...; the best-validation run is kept.
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Per-horizon MAE, MAPE and RMSE as CSV.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        speeds: PathBuf,
        #[arg(long)]
        distances: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalMode::Ms)]
        mode: EvalMode,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Horizons in 5-minute steps.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS)]
        horizons: Vec<usize>,
        /// Configuration for the baseline's window and split when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast the steps after the final window of the series.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speeds: PathBuf,
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences on a 4-node model.
    Gradcheck {
        /// Model settings; defaults to a 1-block model with M=4, T=2, d_G=8, K=2.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GRADCHECK_STEP)]
        step: f64,
    },
    /// Write every attention matrix for one window as CSV files.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speeds: PathBuf,
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Window index within the split; defaults to the last one.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

fn build_graph(distances: &Path, n: usize, cfg: &TrainConfig) -> Result<TrafficGraph> {
    let d = load_distance_csv(distances, n)?;
    Ok(TrafficGraph::from_distances(
        &d,
        n,
        cfg.kernel_sigma,
        cfg.kernel_epsilon,
        cfg.model.cheb_order,
    )?)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn pick(data: &Datasets, split: SplitArg) -> &WindowedDataset {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Model, checkpoint and data windows normalised with the checkpoint's statistics.
fn restore(checkpoint: &Path, speeds: &Path, distances: &Path) -> Result<(Sttn, Checkpoint, SpeedSeries)> {
    let ck = load_checkpoint(checkpoint)?;
    let series = load_speed_csv(speeds)?;
    if series.n_nodes() != ck.n_nodes {
        bail!(
            "checkpoint was trained on {} sensors, {} has {}",
            ck.n_nodes,
            speeds.display(),
            series.n_nodes()
        );
    }
    let graph = build_graph(distances, series.n_nodes(), &ck.config)?;
    let sttn = Sttn::new(ck.config.model.clone(), graph)?;
    Ok((sttn, ck, series))
}

fn cmd_synth(nodes: usize, length: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let (series, distances) = synth_generate(nodes, length, seed)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_speed_csv(out_dir.join("speeds.csv"), &series)?;
    write_distance_csv(out_dir.join("distances.csv"), &distances)?;
    println!(
        "wrote {} steps x {} sensors and {} distances to {}",
        length,
        nodes,
        distances.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(speeds: &Path, distances: &Path, config: Option<&Path>, out: &Path, trials: usize) -> Result<()> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let base = load_config(config)?;
    let series = load_speed_csv(speeds)?;
    let data = prepare_datasets(&series, base.model.window, base.model.horizon, base.split)?;
    let graph = build_graph(distances, series.n_nodes(), &base)?;
    let sttn = Sttn::new(base.model.clone(), graph)?;

    let mut best: Option<(f64, TrainConfig, sttn::train::TrainOutcome)> = None;
    for k in 0..trials {
        let cfg = TrainConfig {
            seed: base.seed.wrapping_add(k as u64),
            ..base.clone()
        };
        let outcome = train(&sttn, &data.train, &data.val, &cfg)?;
        let val = outcome.log[outcome.best_epoch].val_mae;
        info!("trial {k} (seed {}): best val MAE {val:.4} at epoch {}", cfg.seed, outcome.best_epoch);
        if trials > 1 {
            write_text(&out.join(format!("train_log_trial{k}.csv")), &log_csv(&outcome.log))?;
        }
        if best.as_ref().is_none_or(|(v, _, _)| val < *v) {
            best = Some((val, cfg, outcome));
        }
    }
    let (val, cfg, outcome) = best.expect("at least one trial");
    save_checkpoint(out, &outcome.params, &cfg, data.stats(), series.n_nodes())?;
    write_text(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    println!(
        "best validation MAE {val:.4} at epoch {}; checkpoint written to {}",
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    speeds: &Path,
    distances: Option<&Path>,
    mode: EvalMode,
    split: SplitArg,
    horizons: &[usize],
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let report = match (mode, checkpoint) {
        (EvalMode::Ha, None) => {
            let cfg = load_config(config)?;
            let series = load_speed_csv(speeds)?;
            let data = prepare_datasets(&series, cfg.model.window, cfg.model.horizon, cfg.split)?;
            historical_average(pick(&data, split), horizons)?
        }
        (_, None) => bail!("--checkpoint is required for ms and ar evaluation"),
        (_, Some(ck_path)) => {
            let Some(distances) = distances else {
                bail!("--distances is required with --checkpoint");
            };
            let (sttn, ck, series) = restore(ck_path, speeds, distances)?;
            let m = &ck.config.model;
            let data = prepare_datasets_with_stats(&series, m.window, m.horizon, ck.config.split, ck.stats)?;
            let windows = pick(&data, split);
            match mode {
                EvalMode::Ms => evaluate(&sttn, &ck.params, windows, horizons, InferenceMode::MultiStep)?,
                EvalMode::Ar => {
                    evaluate(&sttn, &ck.params, windows, horizons, InferenceMode::Autoregressive)?
                }
                EvalMode::Ha => historical_average(windows, horizons)?,
            }
        }
    };
    let csv = report.to_csv();
    match out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_forecast(checkpoint: &Path, speeds: &Path, distances: &Path, out: &Path) -> Result<()> {
    let (sttn, ck, series) = restore(checkpoint, speeds, distances)?;
    let (m, n) = (ck.config.model.window, series.n_nodes());
    if series.len() < m {
        bail!("series has {} rows, the model needs a window of {m}", series.len());
    }
    let tail = series.values().data()[(series.len() - m) * n..].to_vec();
    let window = ck.stats.normalize_tensor(&Tensor::new(&[m, n], tail)?);
    let y = ck.stats.denormalize_tensor(&sttn.predict(&ck.params, &window)?);
    let t = y.shape()[1];
    let mut csv = String::from("sensor");
    for s in 1..=t {
        csv.push_str(&format!(",step_{s}"));
    }
    csv.push('\n');
    for (v, id) in series.sensor_ids.iter().enumerate() {
        csv.push_str(id);
        for s in 0..t {
            csv.push(',');
            csv.push_str(&format_f64(y.get(&[v, s])));
        }
        csv.push('\n');
    }
    write_text(out, &csv)?;
    println!("wrote {n} x {t} forecast to {}", out.display());
    Ok(())
}

fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        window: 4,
        horizon: 2,
        d_g: 8,
        cheb_order: 2,
        n_blocks: 1,
        ..ModelConfig::default()
    }
}

/// Returns whether the check passed.
fn cmd_gradcheck(config: Option<&Path>, seed: u64, step: f64) -> Result<bool> {
    let model = match config {
        Some(p) => TrainConfig::load(p)?.model,
        None => gradcheck_model(),
    };
    let n = 4;
    let (_, distances) = synth_generate(n, 1, seed)?;
    let graph = TrafficGraph::from_distances(&distances, n, None, sttn::graph::DEFAULT_EPSILON, model.cheb_order)?;
    let net = Sttn::new(model.clone(), graph)?;
    let params = net.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let window: Vec<f64> = (0..model.window * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let window = Tensor::new(&[model.window, n], window)?;
    let report = net.gradient_check(&params, &window, step)?;
    println!("max relative error: {:e}", report.max_relative_error);
    if let Some((name, i)) = &report.worst {
        println!("worst entry: {name}[{i}] of {} checked", report.entries_checked);
    }
    Ok(report.max_relative_error < 1e-4)
}

fn cmd_dump_attn(
    checkpoint: &Path,
    speeds: &Path,
    distances: &Path,
    out_dir: &Path,
    index: Option<usize>,
    split: SplitArg,
) -> Result<()> {
    let (sttn, ck, series) = restore(checkpoint, speeds, distances)?;
    let m = &ck.config.model;
    let data = prepare_datasets_with_stats(&series, m.window, m.horizon, ck.config.split, ck.stats)?;
    let windows = pick(&data, split);
    if windows.is_empty() {
        bail!("the selected split has no windows");
    }
    let i = index.unwrap_or(windows.len() - 1);
    let Some(input) = windows.inputs.get(i) else {
        bail!("window index {i} out of range (split has {})", windows.len());
    };
    let (_, records) = sttn.predict_traced(&ck.params, input)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for r in &records {
        let outer = match r.transformer {
            sttn::model::Transformer::Spatial => "step",
            sttn::model::Transformer::Temporal => "node",
        };
        let shape = r.weights.shape();
        let mut csv = format!("{outer},query,key,weight\n");
        for a in 0..shape[0] {
            for q in 0..shape[1] {
                for k in 0..shape[2] {
                    csv.push_str(&format!("{a},{q},{k},{}\n", format_f64(r.weights.get(&[a, q, k]))));
                }
            }
        }
        let name = format!("{}_b{}_l{}_h{}.csv", r.transformer, r.block, r.layer, r.head);
        write_text(&out_dir.join(name), &csv)?;
    }
    println!(
        "wrote {} attention matrices for window starting at row {} to {}",
        records.len(),
        windows.start_rows[i],
        out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            nodes,
            length,
            seed,
            out_dir,
        } => cmd_synth(nodes, length, seed, &out_dir)?,
        Command::Train {
            speeds,
            distances,
            config,
            out,
            trials,
        } => cmd_train(&speeds, &distances, config.as_deref(), &out, trials)?,
        Command::Eval {
            checkpoint,
            speeds,
            distances,
            mode,
            split,
            horizons,
            config,
            out,
        } => cmd_eval(
            checkpoint.as_deref(),
            &speeds,
            distances.as_deref(),
            mode,
            split,
            &horizons,
            config.as_deref(),
            out.as_deref(),
        )?,
        Command::Forecast {
            checkpoint,
            speeds,
            distances,
            out,
        } => cmd_forecast(&checkpoint, &speeds, &distances, &out)?,
        Command::Gradcheck { config, seed, step } => return cmd_gradcheck(config.as_deref(), seed, step),
        Command::DumpAttn {
            checkpoint,
            speeds,
            distances,
            out_dir,
            index,
            split,
        } => cmd_dump_attn(&checkpoint, &speeds, &distances, &out_dir, index, split)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    if let Command::Eval {
        checkpoint,
        distances,
        mode,
        ..
    } = &cli.command
    {
        let needs = !matches!(mode, EvalMode::Ha) || checkpoint.is_some();
        if needs && (checkpoint.is_none() || distances.is_none()) {
            Cli::command()
                .error(
                    ErrorKind::MissingRequiredArgument,
                    "--checkpoint and --distances are required unless --mode ha is used without a checkpoint",
                )
                .exit();
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded 1e-4");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
