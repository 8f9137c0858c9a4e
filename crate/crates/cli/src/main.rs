use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use topodepth::config::RunConfig;
use topodepth::dataset::Split;
use topodepth::metrics::MetricsReport;
use topodepth::pipeline::{self, TrainOptions};
use topodepth::preprocess::fill_holes;
use topodepth::worldgen::io::{read_depth, write_depth};

#[derive(Parser, Debug)]
#[command(name = "topodepth", version, about = "Location-conditioned depth from RGB on synthetic rooms")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set cvae.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log only warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the dataset and its topological map into data_dir.
    GenData,
    /// Build the topological map from the reference route.
    BuildTopomap,
    /// Fill the holes of one depth file.
    FillHoles {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Convergence threshold on the largest per-pixel change.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Assign stratified train/test labels in the manifest.
    Split,
    /// Train the CVAE (resumes from run_dir if a checkpoint exists).
    TrainCvae {
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train the topological classifier (resumable).
    TrainClassifier {
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate depth and localization on a split.
    Eval {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also score depth conditioned on the ground-truth node.
        #[arg(long)]
        oracle_node: bool,
        /// Where to write the JSON report; defaults to run_dir/eval_<split>.json.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode random latents for one node into RGB/depth pairs.
    Sample {
        #[arg(long)]
        node: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Defaults to run_dir/samples.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn write_text(path: &Path, text: &str) -> topodepth::Result<()> {
    std::fs::write(path, text).map_err(|e| topodepth::Error::Io { path: path.into(), source: e })
}

fn write_report(report: &MetricsReport, json_path: &Path) -> topodepth::Result<()> {
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| topodepth::Error::Io { path: dir.into(), source: e })?;
    }
    write_text(json_path, &report.to_json())?;
    write_text(&json_path.with_extension("txt"), &report.to_key_value())
}

fn run(cli: Cli) -> topodepth::Result<()> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    info!("resolved config:\n{}", config.to_toml());
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&config)?;
            println!("frames={} nodes={} manifest={}", m.frames.len(), m.num_nodes, config.manifest_path().display());
        }
        Command::BuildTopomap => {
            let map = pipeline::build_topomap_stage(&config)?;
            println!("nodes={} path={}", map.len(), pipeline::topomap_path(&config).display());
        }
        Command::FillHoles { input, output, tol, max_iters } => {
            let depth = read_depth(&input)?;
            let holes = depth.hole_count();
            let tol = tol.unwrap_or(config.data.fill_tol);
            let filled = fill_holes(&depth, tol, max_iters.unwrap_or(config.data.fill_max_iters))?;
            write_depth(&output, &filled)?;
            println!("filled={holes} output={}", output.display());
        }
        Command::Split => {
            let m = pipeline::split_stage(&config)?;
            println!("train={} test={}", m.frames_in(Split::Train).len(), m.frames_in(Split::Test).len());
        }
        Command::TrainCvae { stop_after } => {
            let s = pipeline::train_cvae(&config, &TrainOptions { stop_after })?;
            println!("steps={}..{} checkpoint={}", s.start_step, s.end_step, s.checkpoint.display());
        }
        Command::TrainClassifier { stop_after } => {
            let s = pipeline::train_classifier(&config, &TrainOptions { stop_after })?;
            println!("steps={}..{} checkpoint={}", s.start_step, s.end_step, s.checkpoint.display());
        }
        Command::Eval { split, oracle_node, report } => {
            let split = Split::from(split);
            let metrics = pipeline::evaluate(&config, split, oracle_node)?;
            let name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let path = report.unwrap_or_else(|| config.run_dir.join(format!("eval_{name}.json")));
            write_report(&metrics, &path)?;
            print!("{}", metrics.to_key_value());
            println!("{}", MetricsReport::table_header());
            println!("{}", metrics.table_row(name));
        }
        Command::Sample { node, count, out } => {
            let out = out.unwrap_or_else(|| config.run_dir.join("samples"));
            let written = pipeline::sample_stage(&config, node, count, &out)?;
            for (rgb, depth) in written {
                println!("{} {}", rgb.display(), depth.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
