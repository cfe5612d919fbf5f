//! Command-line driver: generate simulated datasets, fit single models, run
//! the full transfer experiment, or predict from a saved model file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use ridgeline::config::RunConfig;
use ridgeline::dynamics::{load_dataset, save_dataset, Dataset, JointState};
use ridgeline::estimator::{predict, rls_init, rls_solve, rls_update};
use ridgeline::harness::{estimate_phase, run_protocol, ExperimentReport, VariantJob};
use ridgeline::models::{apply_mean, build_design, build_prior, ModelFile, ModelSpec};

#[derive(Parser)]
#[command(
    name = "ridgeline",
    version,
    about = "Online inverse-dynamics learning on a simulated two-link arm"
)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Rebase the master seed; dataset and feature seeds re-derive from it
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overrides the config)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Validate and print the plan without writing anything
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate both trajectory datasets and write them as CSV
    Gen,
    /// Fit one variant on a dataset and save the model as JSON
    Fit {
        /// Model variant: P, NP, SP, SP2 or SPK
        #[arg(long)]
        variant: String,
        /// Estimation method: ml (marginal likelihood) or vs (validation set)
        #[arg(long, default_value = "ml")]
        method: String,
        /// Dataset CSV (default: <out>/dataset_a.csv)
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Run the three-phase transfer experiment and write report + CSVs
    Experiment,
    /// Print the model's torque prediction for one joint state
    Predict {
        /// Model JSON written by `fit`
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Joint positions, comma-separated (rad)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q: Vec<f64>,
        /// Joint velocities, comma-separated (rad/s)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        dq: Vec<f64>,
        /// Joint accelerations, comma-separated (rad/s^2)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        ddq: Vec<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RIDGELINE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Gen => cmd_gen(&cfg, cli.dry_run),
        Command::Fit {
            variant,
            method,
            data,
        } => cmd_fit(&cfg, &variant, &method, data.as_deref(), cli.dry_run),
        Command::Experiment => cmd_experiment(&cfg, cli.dry_run),
        Command::Predict { model, q, dq, ddq } => cmd_predict(&model, &q, &dq, &ddq),
    }
}

fn generate(cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset)> {
    let ds_a = Dataset::simulate(
        &cfg.trajectory_a,
        &cfg.arm,
        cfg.duration_s,
        cfg.rate,
        cfg.dataset_a_seed(),
    )?;
    let ds_b = Dataset::simulate(
        &cfg.trajectory_b,
        &cfg.arm,
        cfg.duration_s,
        cfg.rate,
        cfg.dataset_b_seed(),
    )?;
    Ok((ds_a, ds_b))
}

fn cmd_gen(cfg: &RunConfig, dry_run: bool) -> anyhow::Result<ExitCode> {
    println!(
        "plan: {} samples per dataset ({} s at {} Hz), seeds {}/{}, out {}",
        cfg.samples(),
        cfg.duration_s,
        cfg.rate,
        cfg.dataset_a_seed(),
        cfg.dataset_b_seed(),
        cfg.out_dir.display()
    );
    if dry_run {
        println!("dry run: nothing written");
        return Ok(ExitCode::SUCCESS);
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let (ds_a, ds_b) = generate(cfg)?;
    save_dataset(&ds_a, &cfg.out_dir.join("dataset_a.csv"))?;
    save_dataset(&ds_b, &cfg.out_dir.join("dataset_b.csv"))?;
    println!("wrote dataset_a.csv ({} samples)", ds_a.len());
    println!("wrote dataset_b.csv ({} samples)", ds_b.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit(
    cfg: &RunConfig,
    variant: &str,
    method: &str,
    data: Option<&Path>,
    dry_run: bool,
) -> anyhow::Result<ExitCode> {
    let job: VariantJob = format!("{variant}-{method}").parse()?;
    let default_path = cfg.out_dir.join("dataset_a.csv");
    let data_path = data.unwrap_or(&default_path);
    println!(
        "plan: fit {job} on {} (hyperparameters from the first {} samples)",
        data_path.display(),
        cfg.protocol.init_count
    );
    if dry_run {
        println!("dry run: nothing written");
        return Ok(ExitCode::SUCCESS);
    }
    let ds = load_dataset(data_path)?;
    if ds.is_empty() {
        bail!("{} is empty", data_path.display());
    }
    let init_len = cfg.protocol.init_count.min(ds.len());
    let init = ds.window(0, init_len)?;
    let (map, hyper, report) = estimate_phase(job, &init, &cfg.protocol, cfg.arm.gravity)?;
    let spec = ModelSpec::new(hyper, map, ds.joints(), 5, cfg.arm.gravity)?;

    // weights from the whole dataset under the frozen hyperparameters
    let precision = build_prior(&spec)?.map(|v| 1.0 / v);
    let mut state = rls_init(&precision, spec.hyper().sigma2())?;
    for sample in ds.samples() {
        let phi = build_design(&spec, &sample.state)?;
        let y = apply_mean(&spec, &sample.state, &sample.torques)?;
        rls_update(&mut state, &phi, &y)?;
    }
    let theta = rls_solve(&state)?;

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let stem = format!("{}_{}", variant.to_lowercase(), method.to_lowercase());
    let model_path = cfg.out_dir.join(format!("model_{stem}.json"));
    ModelFile::from_parts(&spec, &theta)?.save(&model_path)?;
    let report_path = cfg.out_dir.join(format!("fit_{stem}.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    ridgeline::write_atomic(&report_path, text.as_bytes())?;

    let score = if job.is_validation() {
        format!("validation MSE {:.6e}", report.final_value)
    } else {
        format!("NLL {:.6}", report.final_value)
    };
    println!(
        "fit {job}: {score} after {} steps; wrote {}",
        report.iterations,
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Envelope for `report.json`: the exact configuration that produced the
/// results travels with them.
#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a RunConfig,
    experiment: &'a ExperimentReport,
}

fn cmd_experiment(cfg: &RunConfig, dry_run: bool) -> anyhow::Result<ExitCode> {
    println!(
        "plan: {} variants, init {} + stream {} on A, {}x{} adaptation windows on B, horizon {}",
        cfg.protocol.variants.len(),
        cfg.protocol.init_count,
        cfg.protocol.train_a_count,
        cfg.protocol.subset_count,
        cfg.protocol.subset_len,
        cfg.protocol.horizon
    );
    if dry_run {
        println!("dry run: nothing written");
        return Ok(ExitCode::SUCCESS);
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;

    let a_path = cfg.out_dir.join("dataset_a.csv");
    let b_path = cfg.out_dir.join("dataset_b.csv");
    let (ds_a, ds_b) = if a_path.exists() && b_path.exists() {
        println!("using existing datasets in {}", cfg.out_dir.display());
        (load_dataset(&a_path)?, load_dataset(&b_path)?)
    } else {
        let (ds_a, ds_b) = generate(cfg)?;
        save_dataset(&ds_a, &a_path)?;
        save_dataset(&ds_b, &b_path)?;
        println!("generated datasets into {}", cfg.out_dir.display());
        (ds_a, ds_b)
    };

    let report = run_protocol(&cfg.protocol, &ds_a, &ds_b, &cfg.arm)?;
    let mut json = serde_json::to_string_pretty(&RunReport {
        config: cfg,
        experiment: &report,
    })?;
    json.push('\n');
    ridgeline::write_atomic(&cfg.out_dir.join("report.json"), json.as_bytes())?;
    report.write_csvs(&cfg.out_dir)?;

    let mut failed = Vec::new();
    for v in &report.variants {
        match (&v.error, v.steady_state) {
            (Some(e), _) => {
                println!("{}: FAILED ({e})", v.name);
                failed.push(v.name.clone());
            }
            (None, Some(s)) => println!(
                "{}: steady-state mean {:.4}, median {:.4} (transient {:.4})",
                v.name,
                s.mean,
                s.median,
                v.transient_mean.unwrap_or(f64::NAN)
            ),
            (None, None) => println!("{}: no defined steady-state points", v.name),
        }
    }
    println!("wrote {}", cfg.out_dir.join("report.json").display());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed variants: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_predict(model: &Path, q: &[f64], dq: &[f64], ddq: &[f64]) -> anyhow::Result<ExitCode> {
    let (spec, theta) = ModelFile::load(model)?.into_parts()?;
    let x = JointState::new(
        DVector::from_row_slice(q),
        DVector::from_row_slice(dq),
        DVector::from_row_slice(ddq),
    )?;
    let y = predict(&spec, &theta, &x)?;
    let cells: Vec<String> = y.iter().map(|v| v.to_string()).collect();
    println!("{}", cells.join(","));
    Ok(ExitCode::SUCCESS)
}
