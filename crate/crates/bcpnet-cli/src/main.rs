//! Command-line surface of the engine: complexity analysis, latency
//! benchmarking, inference, gradient verification, toy training and the
//! structural ablation comparison.
//!
//! Exit codes: 0 success, 1 numeric/training failure, 2 usage or
//! configuration failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bcpnet::autograd::{gradcheck_graph, verification_weights};
use bcpnet::bench::{bench_to_csv, run_bench, SPEED_TABLE_RESOLUTIONS};
use bcpnet::complexity::{count_macs, resolution_sweep, sweep_summary, sweep_to_csv};
use bcpnet::error::Error;
use bcpnet::graph::{build_bcpnet, init_weights, ModelGraph};
use bcpnet::modelio::{
    class_palette, load_weights, read_image, save_weights, write_label_png, write_rgb_png,
    RunConfig,
};
use bcpnet::nnops::argmax_labels;
use bcpnet::rng::Rng;
use bcpnet::tensor::{LabelMap, Tensor4};
use bcpnet::train::{
    eval_to_csv, history_to_csv, train_loop, ShapeGen, IGNORE_INDEX,
};

/// The six resolutions of the published complexity table.
const COMPLEXITY_TABLE_RESOLUTIONS: [(usize, usize); 6] = [
    (360, 640),
    (713, 713),
    (512, 1024),
    (768, 1536),
    (1024, 1024),
    (1024, 2048),
];

#[derive(Parser)]
#[command(
    name = "bcpnet",
    version,
    about = "Real-time segmentation engine: analysis, benchmarking, training and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonModel {
    /// Run configuration file (key = value lines); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of output classes.
    #[arg(long)]
    classes: Option<usize>,
}

impl CommonModel {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(classes) = self.classes {
            cfg.model.num_classes = classes;
        }
        Ok(cfg)
    }
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HxW (e.g. 360x640), got '{s}'"))?;
    let h = h.trim().parse().map_err(|_| format!("invalid height in '{s}'"))?;
    let w = w.trim().parse().map_err(|_| format!("invalid width in '{s}'"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution must be positive, got '{s}'"));
    }
    Ok((h, w))
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC accounting at one or more resolutions.
    Analyze {
        #[command(flatten)]
        model: CommonModel,
        /// Resolution HxW; repeatable. Defaults to the six-column table.
        #[arg(long = "res", value_parser = parse_res)]
        res: Vec<(usize, usize)>,
        /// Write the report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency harness: warmup passes then timed forward passes per resolution.
    Bench {
        #[command(flatten)]
        model: CommonModel,
        /// Resolution HxW; repeatable. Defaults to the eight-column speed table.
        #[arg(long = "res", value_parser = parse_res)]
        res: Vec<(usize, usize)>,
        /// Trained weights; fresh seeded weights are used when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Write the results CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a PNG image and write the indexed-color label map.
    Infer {
        #[command(flatten)]
        model: CommonModel,
        /// Input image (8-bit PNG).
        #[arg(long)]
        image: PathBuf,
        /// Weights file produced by train-toy.
        #[arg(long)]
        weights: PathBuf,
        /// Output label PNG.
        #[arg(long)]
        out: PathBuf,
        /// Optional color overlay PNG (half image, half class color).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Verify every parameter gradient against central finite differences
    /// in double precision; exits 1 if any slot is off by more than 1e-4.
    Gradcheck {
        #[command(flatten)]
        model: CommonModel,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Max probed coordinates per parameter slot.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Train on the synthetic shape dataset and write weights + history.
    #[command(name = "train-toy")]
    TrainToy {
        #[command(flatten)]
        model: CommonModel,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the iteration budget.
        #[arg(long)]
        iters: Option<usize>,
        /// Output weights file.
        #[arg(long, default_value = "toy.bcpw")]
        out: PathBuf,
        /// Output `iter,lr,loss` history CSV.
        #[arg(long, default_value = "history.csv")]
        history: PathBuf,
        /// Optional `class,iou` evaluation CSV.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Train the four structural variants under one seed and compare them.
    Ablate {
        #[command(flatten)]
        model: CommonModel,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the iteration budget.
        #[arg(long)]
        iters: Option<usize>,
        /// Output `variant,params,final_miou` CSV.
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Diverged { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn build(cfg: &RunConfig) -> Result<ModelGraph, Error> {
    build_bcpnet(&cfg.model)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Analyze { model, res, out } => {
            let cfg = model.load()?;
            let graph = build(&cfg)?;
            let resolutions =
                if res.is_empty() { COMPLEXITY_TABLE_RESOLUTIONS.to_vec() } else { res };
            let reports = resolution_sweep(&graph, &resolutions)?;
            print!("{}", sweep_summary(&reports));
            let csv = if reports.len() == 1 { reports[0].to_csv() } else { sweep_to_csv(&reports) };
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
                println!("report written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { model, res, weights, warmup, iters, out } => {
            let cfg = model.load()?;
            let graph = build(&cfg)?;
            let store = match weights {
                Some(path) => load_weights(path)?,
                None => init_weights(&graph, 1),
            };
            let resolutions = if res.is_empty() { SPEED_TABLE_RESOLUTIONS.to_vec() } else { res };
            let results = run_bench(&graph, &store, &resolutions, warmup, iters)?;
            println!(
                "{:>12} {:>12} {:>10} {:>14} {:>10}",
                "resolution", "median_ms", "fps", "macs", "params"
            );
            for r in &results {
                println!(
                    "{:>12} {:>12.3} {:>10.1} {:>14} {:>10}",
                    format!("{}x{}", r.resolution.0, r.resolution.1),
                    r.median_ms,
                    r.fps,
                    r.macs,
                    r.params
                );
            }
            let csv = bench_to_csv(&results);
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
                println!("results written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer { model, image, weights, out, overlay } => {
            let cfg = model.load()?;
            let graph = build(&cfg)?;
            let store = load_weights(&weights)?;
            let input = read_image(&image)?;
            let (logits, _) = bcpnet::graph::forward(&graph, &store, &input)?;
            let labels = argmax_labels(&logits)?;
            let palette = class_palette(graph.num_classes);
            write_label_png(&labels, &palette, &out)?;
            println!("label map written to {}", out.display());
            if let Some(path) = overlay {
                let (_, _, h, w) = input.shape();
                let blend = Tensor4::from_fn((1, 3, h, w), |_, c, y, x| {
                    let color = palette
                        .get(labels.at(0, y, x) as usize)
                        .copied()
                        .unwrap_or([0, 0, 0]);
                    0.5 * input.at(0, c, y, x) + 0.5 * color[c] as f32 / 255.0
                })?;
                write_rgb_png(&blend, &path)?;
                println!("overlay written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { model, seed, samples } => {
            let mut cfg = model.load()?;
            if model.classes.is_none() {
                cfg.model.num_classes = 3;
            }
            let graph = build(&cfg)?;
            let weights = verification_weights(&graph, seed);
            let mut rng = Rng::new(seed ^ 0x1A7E17);
            let x = Tensor4::from_fn((1, 3, 64, 64), |_, _, _, _| rng.uniform(0.0, 1.0))?;
            let mut labels = LabelMap::filled(1, 64, 64, 0);
            for v in labels.data_mut() {
                *v = rng.below(graph.num_classes) as u8;
            }
            let results =
                gradcheck_graph(&graph, &weights, &x, &labels, IGNORE_INDEX, 1e-5, samples, 1e-4)?;
            let mut worst: Vec<&(String, f64)> = results.iter().collect();
            worst.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite errors"));
            println!("checked {} slots ({} coords max each)", results.len(), samples);
            for (name, err) in worst.iter().take(10) {
                println!("{err:>12.3e}  {name}");
            }
            let failures = results.iter().filter(|(_, e)| *e > 1e-4).count();
            if failures > 0 {
                println!("FAIL: {failures} slots exceed 1e-4");
                Ok(ExitCode::from(1))
            } else {
                println!("OK: all slots within 1e-4");
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::TrainToy { model, seed, iters, out, history, eval } => {
            let mut cfg = model.load()?;
            if model.classes.is_none() {
                cfg.model.num_classes = 3;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(iters) = iters {
                cfg.train.total_iter = iters;
            }
            let graph = build(&cfg)?;
            let outcome = train_loop(&graph, &cfg.train, &ShapeGen)?;
            save_weights(&outcome.weights, &out)?;
            std::fs::write(&history, history_to_csv(&outcome.history))?;
            if let Some(path) = eval {
                std::fs::write(&path, eval_to_csv(&outcome.per_class_iou, outcome.final_miou))?;
            }
            println!("weights written to {}", out.display());
            println!("history written to {}", history.display());
            println!("final mIoU {:.4}", outcome.final_miou);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { model, seed, iters, out } => {
            let mut cfg = model.load()?;
            if model.classes.is_none() {
                cfg.model.num_classes = 3;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(iters) = iters {
                cfg.train.total_iter = iters;
            }
            let mut csv = String::from("variant,params,final_miou\n");
            for (name, variant) in bcpnet::graph::ablation_variants() {
                let mut mc = cfg.model.clone();
                mc.ablation = variant;
                let graph = build_bcpnet(&mc)?;
                let report = count_macs(&graph, cfg.train.crop.0, cfg.train.crop.1)?;
                let outcome = train_loop(&graph, &cfg.train, &ShapeGen)?;
                println!(
                    "{name:>12}: params {:>8}  final mIoU {:.4}",
                    report.total_params, outcome.final_miou
                );
                csv.push_str(&format!("{name},{},{}\n", report.total_params, outcome.final_miou));
            }
            std::fs::write(&out, &csv)?;
            println!("comparison written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
