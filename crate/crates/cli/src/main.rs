//! `gcdc`: error-bounded lossy compression for gridded scientific
//! floating-point data.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gcdc_core::archive::RatioPolicy;
use gcdc_core::io::{read_dataset, write_dataset};
use gcdc_core::pipeline::{
    attach_ratios, compress, decompress, eval_datasets, load_models, save_models, sweep,
    train_models, EvalReport, PipelineConfig, TrainedModels,
};
use gcdc_core::synth::{generate_synthetic, SynthKind};
use gcdc_core::tensor::Dataset;

#[derive(Parser)]
#[command(name = "gcdc", version, about = "Error-bounded lossy compressor for gridded data")]
struct Cli {
    /// Worker threads; falls back to GCDC_WORKERS, then all CPUs
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Emit reports as JSON instead of key = value text
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train both autoencoder stages and write checkpoints
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint prefix: writes <output>.hbae.ckpt, <output>.bae.ckpt, <output>.loss.csv
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compress a dataset into an archive
    Compress {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Checkpoint prefix from `train`; trains in place when absent
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<RatioPolicy>,
    },
    /// Reconstruct a dataset from an archive
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare a reconstruction against the original
    Eval {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        reconstruction: PathBuf,
        /// Archive to take block structure and size accounting from
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        policy: Option<RatioPolicy>,
    },
    /// Generate a synthetic dataset
    Synth {
        /// smooth | multivar | histogram_like
        #[arg(long)]
        kind: SynthKind,
        /// Axis lengths, e.g. 8x40x32x32
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compress at several error bounds and emit a rate-distortion CSV
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated error bounds, e.g. 1e-1,3e-2,1e-2
        #[arg(long)]
        taus: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("gcdc: error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    init_workers(cli.workers)?;
    match cli.cmd {
        Cmd::Train {
            config,
            input,
            output,
            seed,
        } => cmd_train(&config, &input, &output, seed, cli.json),
        Cmd::Compress {
            config,
            input,
            output,
            models,
            tau,
            seed,
            policy,
        } => cmd_compress(&config, &input, &output, models.as_deref(), tau, seed, policy, cli.json),
        Cmd::Decompress { input, output } => cmd_decompress(&input, &output, cli.json),
        Cmd::Eval {
            original,
            reconstruction,
            archive,
            policy,
        } => cmd_eval(&original, &reconstruction, archive.as_deref(), policy, cli.json),
        Cmd::Synth {
            kind,
            shape,
            seed,
            output,
        } => cmd_synth(kind, &shape, seed, &output),
        Cmd::Sweep {
            config,
            input,
            taus,
            output,
            models,
            seed,
        } => cmd_sweep(&config, &input, &taus, &output, models.as_deref(), seed),
    }
}

fn init_workers(flag: Option<usize>) -> Result<()> {
    let env = std::env::var("GCDC_WORKERS")
        .ok()
        .map(|v| v.parse::<usize>().context("GCDC_WORKERS must be a number"))
        .transpose()?;
    if let Some(n) = flag.or(env) {
        if n == 0 {
            bail!("worker count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    Ok(())
}

fn load_config(path: &Path, tau: Option<f64>, seed: Option<u64>, policy: Option<RatioPolicy>) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = PipelineConfig::from_toml(&text)?;
    if let Some(t) = tau {
        cfg.tau = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = policy {
        cfg.policy = p;
    }
    Ok(cfg)
}

fn obtain_models(
    ds: &Dataset<f32>,
    cfg: &PipelineConfig,
    prefix: Option<&Path>,
) -> Result<(TrainedModels, f64)> {
    let start = Instant::now();
    let models = match prefix {
        Some(p) => load_models(p)?,
        None => train_models(ds, cfg)?,
    };
    Ok((models, start.elapsed().as_secs_f64()))
}

fn cmd_train(config: &Path, input: &Path, output: &Path, seed: Option<u64>, json: bool) -> Result<()> {
    let cfg = load_config(config, None, seed, None)?;
    let ds = read_dataset(input)?;
    let start = Instant::now();
    let models = train_models(&ds, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    save_models(&models, cfg.seed, output)?;

    let mut csv = String::from("stage,epoch,loss\n");
    for (i, l) in models.hbae_curve.iter().enumerate() {
        csv.push_str(&format!("hbae,{i},{l}\n"));
    }
    for (i, l) in models.bae_curve.iter().enumerate() {
        csv.push_str(&format!("bae,{i},{l}\n"));
    }
    let loss_path = output.with_extension("loss.csv");
    fs::write(&loss_path, csv)?;

    let hbae_last = models.hbae_curve.last().copied().unwrap_or(f64::NAN);
    let bae_last = models.bae_curve.last().copied().unwrap_or(f64::NAN);
    if json {
        println!(
            "{}",
            serde_json::json!({
                "hbae_final_loss": hbae_last,
                "bae_final_loss": bae_last,
                "seconds": secs,
            })
        );
    } else {
        println!("hbae_final_loss = {hbae_last}");
        println!("bae_final_loss = {bae_last}");
        println!("checkpoints = {}.hbae.ckpt {}.bae.ckpt", output.display(), output.display());
        println!("loss_curve = {}", loss_path.display());
        println!("seconds = {secs:.3}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_compress(
    config: &Path,
    input: &Path,
    output: &Path,
    models: Option<&Path>,
    tau: Option<f64>,
    seed: Option<u64>,
    policy: Option<RatioPolicy>,
    json: bool,
) -> Result<()> {
    let cfg = load_config(config, tau, seed, policy)?;
    let ds = read_dataset(input)?;
    let model_stage = if models.is_some() { "load_models" } else { "train" };
    let (models, model_secs) = obtain_models(&ds, &cfg, models)?;
    let start = Instant::now();
    let out = compress(&ds, &cfg, &models)?;
    let compress_secs = start.elapsed().as_secs_f64();
    fs::write(output, &out.archive).with_context(|| format!("writing {}", output.display()))?;

    let mut report = eval_datasets(&ds, &out.corrected, Some(&cfg.gae_spec()))?;
    attach_ratios(&mut report, &out, cfg.policy);
    report.timings = vec![
        (model_stage.into(), model_secs),
        ("compress".into(), compress_secs),
    ];
    print_report(&report, json)?;
    if !json {
        println!("archive = {}", output.display());
        println!("archive_bytes = {}", out.archive.len());
        print_ledger(&out.ledger);
    }
    Ok(())
}

fn cmd_decompress(input: &Path, output: &Path, json: bool) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let start = Instant::now();
    let (ds, manifest) = decompress(&bytes)?;
    let secs = start.elapsed().as_secs_f64();
    write_dataset(&ds, output)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "shape": manifest.shape,
                "values": ds.len(),
                "seconds": secs,
            })
        );
    } else {
        println!("shape = {:?}", manifest.shape);
        println!("values = {}", ds.len());
        println!("output = {}", output.display());
        println!("seconds = {secs:.3}");
    }
    Ok(())
}

fn cmd_eval(
    original: &Path,
    reconstruction: &Path,
    archive: Option<&Path>,
    policy: Option<RatioPolicy>,
    json: bool,
) -> Result<()> {
    let orig = read_dataset(original)?;
    let recon = read_dataset(reconstruction)?;
    let mut report;
    match archive {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let (manifest, _) = gcdc_core::archive::read_archive(&bytes)?;
            report = eval_datasets(&orig, &recon, Some(&manifest.gae_spec))?;
            let ledger = gcdc_core::archive::ledger_for(bytes.len() as u64, &manifest)?;
            let count: usize = manifest.shape.iter().product();
            let policy = policy.unwrap_or(RatioPolicy::ExcludeModels);
            report.ratio = Some(gcdc_core::archive::compression_ratio(
                count,
                4,
                &ledger,
                policy,
                &manifest.per_group_sizes,
            ));
        }
        None => {
            report = eval_datasets(&orig, &recon, None)?;
        }
    }
    print_report(&report, json)
}

fn cmd_synth(kind: SynthKind, shape: &str, seed: u64, output: &Path) -> Result<()> {
    let dims: Vec<usize> = shape
        .split('x')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad axis length `{p}`")))
        .collect::<Result<_>>()?;
    let ds = generate_synthetic(kind, &dims, seed)?;
    write_dataset(&ds, output)?;
    println!("shape = {dims:?}");
    println!("values = {}", ds.len());
    println!("output = {}", output.display());
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    input: &Path,
    taus: &str,
    output: &Path,
    models: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, None, seed, None)?;
    let ds = read_dataset(input)?;
    let taus: Vec<f64> = taus
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad tau `{p}`")))
        .collect::<Result<_>>()?;
    if taus.is_empty() {
        bail!("need at least one tau");
    }
    let (models, _) = obtain_models(&ds, &cfg, models)?;
    let points = sweep(&ds, &cfg, &models, &taus)?;

    let mut csv =
        String::from("tau,nrmse,max_block_error,archive_bytes,ratio_exclude_models,stored_coefficients\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.tau, p.nrmse, p.max_block_error, p.archive_bytes, p.ratio_exclude_models, p.stored_coefficients
        ));
    }
    fs::write(output, &csv).with_context(|| format!("writing {}", output.display()))?;
    print!("{csv}");
    Ok(())
}

fn print_report(report: &EvalReport, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
        return Ok(());
    }
    println!("nrmse = {}", report.nrmse);
    if let Some(per) = &report.per_variable_nrmse {
        let joined: Vec<String> = per.iter().map(|v| v.to_string()).collect();
        println!("per_variable_nrmse = {}", joined.join(" "));
    }
    if let Some(m) = report.max_block_error {
        println!("max_block_error = {m}");
    }
    if let Some(r) = &report.ratio {
        println!("ratio({}) = {}", r.policy, r.overall);
        if let Some(per) = &r.per_variable {
            let joined: Vec<String> = per.iter().map(|v| v.to_string()).collect();
            println!("ratio_per_variable = {}", joined.join(" "));
        }
    }
    let shown = report.ratio.as_ref().map(|r| r.policy);
    if let Some(r) = report.ratio_include_models {
        if shown != Some(RatioPolicy::IncludeModels) {
            println!("ratio(include_models) = {r}");
        }
    }
    if let Some(r) = report.ratio_exclude_models {
        if shown != Some(RatioPolicy::ExcludeModels) {
            println!("ratio(exclude_models) = {r}");
        }
    }
    let edges: Vec<String> = report.histogram.edges.iter().map(|v| format!("{v:.3e}")).collect();
    let counts: Vec<String> = report.histogram.counts.iter().map(|c| c.to_string()).collect();
    println!("histogram_edges = {}", edges.join(" "));
    println!("histogram_counts = {}", counts.join(" "));
    for (stage, secs) in &report.timings {
        println!("seconds({stage}) = {secs:.3}");
    }
    Ok(())
}

fn print_ledger(ledger: &gcdc_core::archive::SizeLedger) {
    println!("bytes(hbae_latents) = {}", ledger.hbae_latents);
    println!("bytes(bae_latents) = {}", ledger.bae_latents);
    println!("bytes(pca_basis) = {}", ledger.pca_basis);
    println!("bytes(gae_coefficients) = {}", ledger.gae_coefficients);
    println!("bytes(gae_indices) = {}", ledger.gae_indices);
    println!("bytes(tables) = {}", ledger.tables);
    println!("bytes(manifest) = {}", ledger.manifest);
    println!("bytes(model_weights) = {}", ledger.model_weights);
    println!("bytes(total) = {}", ledger.total());
}
