use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grass::cli::{cmd_attribute, cmd_bench, cmd_cache, cmd_lds, cmd_select_mask, cmd_train, Context};
use grass::Error;

#[derive(Parser)]
#[command(name = "grass", version, about = "Gradient compression and data attribution pipeline")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Override a config key, e.g. `--set model.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the model and write a checkpoint.
    Train,
    /// Compress training gradients and build FIMs and preconditioned stores.
    Cache,
    /// Score training samples against test points.
    Attribute,
    /// Linear datamodeling score via subset retraining.
    Lds,
    /// Projection and factorized-compression benchmarks.
    Bench,
    /// Learn a selective mask.
    SelectMask,
}

fn run(args: &Args) -> Result<(), Error> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let config = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let ctx = Context::from_file(config, &args.overrides, args.force)?;
    println!("run directory: {}", ctx.run_dir.display());
    match args.command {
        Command::Train => {
            let out = cmd_train(&ctx)?;
            let verb = if out.skipped { "kept" } else { "wrote" };
            println!("{verb} {}", out.checkpoint.display());
        }
        Command::Cache => {
            let out = cmd_cache(&ctx)?;
            if out.skipped {
                println!("already cached; nothing written");
            }
            for p in out.raw.iter().chain(&out.fims).chain(&out.preconditioned) {
                println!("{}", p.display());
            }
        }
        Command::Attribute => {
            let out = cmd_attribute(&ctx)?;
            println!("scored {} test points against {} training samples", out.scores.len(), out.train_rows.len());
            println!("{}", out.binary.display());
            if let Some(p) = out.top_k {
                println!("{}", p.display());
            }
        }
        Command::Lds => {
            let out = cmd_lds(&ctx)?;
            println!("mean rho {:.4} over {} test points", out.mean_rho, out.rho.len());
            if let Some(r) = &out.report {
                println!("damping {:e}, null {:.4} +- {:.4}", r.damping, r.null_mean, r.null_std);
            }
            println!("{}", out.summary.display());
        }
        Command::Bench => {
            let out = cmd_bench(&ctx)?;
            println!("{} projection rows, {} layer rows", out.rows.len(), out.throughput.len());
            println!("{}", out.csv.display());
        }
        Command::SelectMask => {
            let out = cmd_select_mask(&ctx)?;
            for (p, k) in out.masks.iter().zip(&out.sizes) {
                println!("{} ({k} indices)", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
