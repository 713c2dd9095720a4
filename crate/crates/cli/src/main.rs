use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fedleak::harness::{
    export_image, prepare_cell, run_experiment, verify_convergence_bound, write_report, ExperimentConfig,
};
use fedleak::tensor::Tensor;

#[derive(Parser)]
#[command(name = "fedleak", version, about = "Gradient-leakage attacks on simulated federated learning")]
struct Cli {
    /// Replace the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and write the report.
    Run { config: PathBuf },
    /// Check the gradient-descent rate bound on random convex quadratics.
    VerifyTheorem {
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        tmax: usize,
    },
    /// Attack one client of one cell and dump the trace and images.
    AttackOne {
        config: PathBuf,
        /// Target client; with batch size 1 this is one image.
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        cell: usize,
        /// Save the reconstruction every this many iterations.
        #[arg(long, default_value_t = 10)]
        snapshot_every: usize,
    },
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli, path: &Path) -> Result<bool> {
    let cfg = load_config(path, cli)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir())
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = run_experiment(&cfg)?;
    for row in &report.rows {
        match (&row.stats, &row.error) {
            (Some(s), _) => println!(
                "cell {:>3} [{}] asr {:.3} label {:.3} quality {:.3} median_iter {}",
                row.cell,
                row.label,
                s.asr_content,
                s.asr_label,
                row.asr_quality.unwrap_or(0.0),
                s.iterations.map(|i| i.median.to_string()).unwrap_or_else(|| "-".into()),
            ),
            (None, Some(e)) => println!("cell {:>3} [{}] FAILED: {e}", row.cell, row.label),
            (None, None) => unreachable!("rows carry stats or an error"),
        }
    }
    for p in write_report(&report, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(report.all_ok())
}

fn verify(cli: &Cli, dim: usize, trials: usize, tmax: usize) -> Result<bool> {
    let report = verify_convergence_bound(dim, trials, tmax, cli.seed.unwrap_or(0))?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("theorem.json"), json + "\n")?;
    }
    Ok(report.holds)
}

/// Splits a flat batch into per-sample image tensors, if the samples are
/// images.
fn images(flat: &[f64], shape: &[usize]) -> Result<Vec<Tensor>> {
    if shape.len() != 3 {
        return Ok(vec![]);
    }
    let n: usize = shape.iter().product();
    Ok(flat
        .chunks(n)
        .map(|c| Tensor::from_vec(shape, c.to_vec()))
        .collect::<fedleak::Result<_>>()?)
}

fn attack_one(cli: &Cli, path: &Path, index: usize, dump: Option<PathBuf>, cell: usize, every: usize) -> Result<bool> {
    let cfg = load_config(path, cli)?;
    let dump = dump
        .or_else(|| cli.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("attack-{index}")));
    std::fs::create_dir_all(&dump)?;
    let prepared = prepare_cell(&cfg.cell(cell)?, &[index])?;
    let shape = prepared.sample_shape.clone();
    let mut trace = String::from("iteration,distance\n");
    let mut snapshot_error = None;
    let mut observer = |it: usize, d: f64, x: &[f64]| {
        trace.push_str(&format!("{it},{d}\n"));
        if every > 0 && it % every == 0 {
            let saved = images(x, &shape).and_then(|imgs| {
                for (b, img) in imgs.iter().enumerate() {
                    export_image(img, &dump.join(format!("iter{it:04}_s{b}.pnm")))?;
                }
                Ok(())
            });
            if let Err(e) = saved {
                snapshot_error.get_or_insert(e);
            }
        }
    };
    let (result, outcome) = prepared.attack(0, 0, Some(&mut observer))?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    std::fs::write(dump.join("trace.csv"), trace)?;
    let truth: Vec<f64> = prepared.truths[0].iter().flat_map(|s| s.x.iter().copied()).collect();
    for (b, img) in images(&truth, &shape)?.iter().enumerate() {
        export_image(img, &dump.join(format!("truth_s{b}.pnm")))?;
    }
    for (b, img) in images(result.x_rec.data(), &shape)?.iter().enumerate() {
        export_image(img, &dump.join(format!("final_s{b}.pnm")))?;
    }
    let summary = serde_json::json!({
        "client": index,
        "cell": cell,
        "attack_seed": prepared.attack_seed(0, 0),
        "success": outcome.success,
        "iterations": outcome.iterations,
        "final_distance": result.final_distance,
        "inferred_labels": result.labels,
        "true_labels": prepared.truths[0].iter().map(|s| s.label).collect::<Vec<_>>(),
        "label_correct": outcome.label_correct,
        "mse": outcome.mse,
        "ssim": outcome.ssim,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(dump.join("summary.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run(&cli, config),
        Command::VerifyTheorem { dim, trials, tmax } => verify(&cli, *dim, *trials, *tmax),
        Command::AttackOne {
            config,
            image_index,
            dump_dir,
            cell,
            snapshot_every,
        } => attack_one(&cli, config, *image_index, dump_dir.clone(), *cell, *snapshot_every),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
