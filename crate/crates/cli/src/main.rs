use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hsgcn::bench::{reports_csv, run_scaling, summary, ScalingSpec, DEFAULT_MODES};
use hsgcn::config::RunConfig;
use hsgcn::data::{save_cube, save_labels, save_split, synth_scene, SynthSpec};
use hsgcn::pipeline::{
    bias, evaluate, load_model, palette_legend, predict_map, render_ppm, save_model, sweep, sweep_csv, train,
    training_log_csv, Dataset, SplitSide,
};
use hsgcn::{Error, Result};

/// Graph convolutional networks for hyperspectral pixel classification.
///
/// Any `--section.key=value` argument overrides the matching configuration
/// field, e.g. `--train.epochs=10 --model.architecture=funet-c`.
#[derive(Parser, Debug)]
#[command(name = "hsgcn", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Side {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic striped scene (cube, labels, split) to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the checkpoint and training log.
    Train,
    /// Score a checkpoint on one side of the split.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        side: Side,
    },
    /// Classify every labeled pixel and write a P6 map with its legend.
    PredictMap {
        /// Also render the ground truth through the same palette.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Train and evaluate over a (k, sigma) grid.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15, 20, 25])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 2.0])]
        sigma: Vec<f64>,
    },
    /// Monte-Carlo bias of the sampled aggregation on the training graph.
    Bias {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Time full-graph and sampled passes over a grid of N.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MODES.map(String::from).to_vec())]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![256, 512, 1024, 2048])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        d: usize,
        #[arg(long, default_value_t = 128)]
        p: usize,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Use all cores; reported as parallel in the summary.
        #[arg(long)]
        parallel: bool,
    },
}

/// Splits `--a.b=v` overrides from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(|k| k.contains('.')) => overrides.push(body.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    if let Command::Synth { out, classes, size, bands, noise, train_per_class, seed } = &cli.command {
        let spec = SynthSpec {
            classes: *classes,
            size: *size,
            bands: *bands,
            noise_sigma: *noise,
            train_per_class: *train_per_class,
            seed: *seed,
        };
        let scene = synth_scene(&spec)?;
        std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        save_cube(&out.join("cube.hsc"), &scene.cube)?;
        save_labels(&out.join("labels.hsl"), &scene.labels)?;
        save_split(&out.join("split.json"), &scene.split)?;
        for (c, n) in scene.split.counts() {
            println!("class {c}: train {} test {}", n.train, n.test);
        }
        return Ok(());
    }

    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Train => {
            let data = Dataset::load(&cfg)?;
            let ckpt = cfg.paths.require("checkpoint")?;
            let out = output_dir(&cfg)?;
            let trained = train(&cfg, &data)?;
            save_model(ckpt, &trained.model)?;
            write(&out.join("train_log.csv"), training_log_csv(&trained.log))?;
            if let Some(last) = trained.log.last() {
                println!("epoch {} loss {:.6} train_oa {:.2}", last.epoch, last.loss, last.train_oa);
            }
        }
        Command::Eval { side } => {
            let data = Dataset::load(&cfg)?;
            let model = load_model(cfg.paths.require("checkpoint")?)?;
            let side = match side {
                Side::Train => SplitSide::Train,
                Side::Test => SplitSide::Test,
            };
            let (_, report) = evaluate(&model, &cfg, &data, side)?;
            let out = output_dir(&cfg)?;
            write(&out.join("metrics.csv"), report.to_csv())?;
            write(&out.join("metrics.txt"), report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::PredictMap { ground_truth } => {
            let data = Dataset::load(&cfg)?;
            let model = load_model(cfg.paths.require("checkpoint")?)?;
            let map = predict_map(&model, &cfg, &data)?;
            let (h, w) = (data.cube.height(), data.cube.width());
            let out = output_dir(&cfg)?;
            write(&out.join("map.ppm"), render_ppm(&map, h, w)?)?;
            write(&out.join("map_legend.txt"), palette_legend(model.config().classes))?;
            if ground_truth {
                write(&out.join("ground_truth.ppm"), render_ppm(&data.labels.labels, h, w)?)?;
            }
        }
        Command::Sweep { k, sigma } => {
            let data = Dataset::load(&cfg)?;
            let rows = sweep(&cfg, &data, &k, &sigma)?;
            let csv = sweep_csv(&rows);
            write(&output_dir(&cfg)?.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Bias { trials } => {
            let data = Dataset::load(&cfg)?;
            let d = bias(&cfg, &data, trials)?;
            let out = output_dir(&cfg)?;
            write(&out.join("bias_unit.csv"), d.unit.to_csv())?;
            write(&out.join("bias_cobatch.csv"), d.co_batch.to_csv())?;
            let worst = |r: &hsgcn::sampler::BiasReport| r.rows.iter().map(|x| x.bias.abs()).fold(0.0, f64::max);
            println!("max |bias|: unit {:.3e}, co-batch {:.3e}", worst(&d.unit), worst(&d.co_batch));
        }
        Command::Bench { modes, n, d, p, m, repeats, parallel } => {
            let spec = ScalingSpec { n_grid: n, d, p, m, repeats, seed: cfg.train.seed, parallel };
            let reports = modes.iter().map(|mode| run_scaling(mode, &spec)).collect::<Result<Vec<_>>>()?;
            let out = output_dir(&cfg)?;
            write(&out.join("bench.csv"), reports_csv(&reports))?;
            let text = summary(&reports);
            write(&out.join("bench_summary.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
