//! Command-line entry point: dataset preparation, training, evaluation,
//! gradient certification and architecture shape audits.
//!
//! Machine-readable JSON goes to stdout; human summaries go to stderr.
//! Exit codes: 0 success, 2 usage/config error, 3 numerical failure.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use milnet::checkpoint;
use milnet::config::{
    engine_version, load_dataset, resolve_eval_data, ManifestOutputs, RunConfig, RunManifest,
};
use milnet::data::{gen_synthetic, mean_crop_miss_exact, measured_crop_miss, write_synth_dir, SynthSpec};
use milnet::error::{Error, Result};
use milnet::gradcheck::{check_network, NETWORK_THRESHOLD};
use milnet::layers::{build_network, named_arch, plan_network, ArchSpec};
use milnet::loss::{LabelVector, MilConfig, MilMode};
use milnet::rng::rng_from;
use milnet::tensor::Tensor;
use milnet::train::{evaluate, train, EvalView, LossMode};

#[derive(Parser)]
#[command(name = "milnet", version, about = "Bag-level MIL training engine for residual CNNs")]
struct Cli {
    /// Worker threads for evaluation sweeps; 1 keeps everything
    /// sequential (results are identical either way).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run config JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for manifest, metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint instead of fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or dataset/run config JSON.
        #[arg(long)]
        data: PathBuf,
        /// Also evaluate with aggregated test bags.
        #[arg(long)]
        bag_eval: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Built-in name (minimal, table1, table3) or an arch spec JSON path.
        #[arg(long, default_value = "minimal")]
        arch: String,
        /// softmax_ce, mil_negative_only or mil_full_bag.
        #[arg(long, default_value = "softmax_ce")]
        loss: String,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = NETWORK_THRESHOLD)]
        threshold: f64,
    },
    /// Print the per-stage shape audit of an architecture.
    Shapes {
        #[arg(long)]
        arch: String,
    },
    /// Generate a synthetic cluttered-target dataset.
    Synth {
        /// SynthSpec JSON path.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Crop size used for the reported crop-miss rate.
        #[arg(long, default_value_t = 32)]
        crop: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let code = match run(cli.command, threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(command: Command, threads: usize) -> Result<()> {
    match command {
        Command::Train { config, out, resume, seed, epochs } => {
            cmd_train(&config, &out, resume.as_deref(), seed, epochs, threads)
        }
        Command::Eval { checkpoint, data, bag_eval } => {
            cmd_eval(&checkpoint, &data, bag_eval, threads)
        }
        Command::Gradcheck { arch, loss, step, threshold } => {
            cmd_gradcheck(&arch, &loss, step, threshold)
        }
        Command::Shapes { arch } => cmd_shapes(&arch),
        Command::Synth { spec, out, crop } => cmd_synth(&spec, &out, crop),
    }
}

fn resolve_arch_arg(arch: &str) -> Result<ArchSpec> {
    if matches!(arch, "minimal" | "table1" | "table3") {
        return named_arch(arch);
    }
    let path = Path::new(arch);
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let spec: ArchSpec = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid arch spec {arch}: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
    threads: usize,
) -> Result<()> {
    let mut cfg = RunConfig::from_file(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = epochs_override {
        cfg.train.epochs = epochs;
    }
    cfg.train.validate()?;
    let arch = cfg.arch.resolve()?;
    let data = load_dataset(&cfg.dataset)?;
    if data.classes != arch.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the architecture outputs {}",
            data.classes, arch.num_classes
        )));
    }

    let mut net = match resume {
        Some(path) => {
            let net = checkpoint::load(path)?;
            if net.spec() != &arch {
                return Err(Error::config(
                    "resume checkpoint architecture differs from the config".to_string(),
                ));
            }
            net
        }
        None => build_network(&arch, cfg.train.seed)?,
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let metrics_name = "metrics.jsonl".to_string();
    let mut checkpoints = Vec::new();
    let final_name = "final.ckpt".to_string();

    let manifest = RunManifest {
        engine_version: engine_version(),
        config: cfg.clone(),
        seed: cfg.train.seed,
        dataset_checksum: data.checksum.clone(),
        outputs: ManifestOutputs {
            metrics: metrics_name.clone(),
            checkpoints: vec![final_name.clone()],
        },
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json_pretty(&manifest_path, &manifest)?;

    let metrics_path = out_dir.join(&metrics_name);
    let mut metrics = File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    // header line ties the log to its manifest and records how this run
    // scales against the reference 160-epoch schedule
    let header = serde_json::json!({
        "type": "header",
        "manifest": "manifest.json",
        "engine_version": engine_version(),
        "seed": cfg.train.seed,
        "epochs": cfg.train.epochs,
        "reference_epochs": 160,
        "epoch_scale": cfg.train.epochs as f64 / 160.0,
    });
    writeln!(metrics, "{header}").map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let checkpoint_every = cfg.checkpoint_every;
    let records = train(
        &mut net,
        &data.train,
        &data.test,
        &cfg.train,
        threads,
        |record, net| {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::config(format!("cannot serialize metrics: {e}")))?;
            writeln!(metrics, "{line}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            if checkpoint_every > 0 && (record.epoch + 1) % checkpoint_every == 0 {
                let name = format!("epoch_{:04}.ckpt", record.epoch);
                checkpoint::save(net, &out_dir.join(&name))?;
                checkpoints.push(name);
            }
            Ok(())
        },
    )?;
    drop(metrics);

    checkpoint::save(&mut net, &out_dir.join(&final_name))?;
    checkpoints.push(final_name);

    // refresh the manifest with the full checkpoint list
    let manifest = RunManifest {
        outputs: ManifestOutputs { metrics: metrics_name, checkpoints },
        ..manifest
    };
    write_json_pretty(&manifest_path, &manifest)?;

    eprintln!(
        "trained {} epochs; outputs in {}",
        records.len(),
        out_dir.display()
    );
    let summary = serde_json::json!({
        "status": "ok",
        "epochs": records.len(),
        "final": records.last(),
        "out": out_dir.display().to_string(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data_path: &Path, bag_eval: bool, threads: usize) -> Result<()> {
    let mut net = checkpoint::load(checkpoint_path)?;
    let dataset = resolve_eval_data(data_path)?;
    let data = load_dataset(&dataset)?;
    if data.classes != net.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the checkpoint outputs {}",
            data.classes,
            net.num_classes()
        )));
    }
    // evaluation views default to the network's own input size
    let crop = net.spec().input_shape[1];
    let bag = milnet::augment::BagSpec {
        pad: 0,
        crop_size: crop,
        bag_size: 5,
        flip_prob: 0.0,
        sampling: milnet::augment::Sampling::CornersCenter,
        seed: 0,
    };
    let center = evaluate(
        &mut net,
        &data.test,
        EvalView::Center,
        &bag,
        milnet::loss::Aggregation::Mean,
        threads,
    )?;
    let mut out = serde_json::json!({
        "count": center.count,
        "center": center,
    });
    if bag_eval {
        // bags need sampling headroom: pad so five crops differ
        let bag = milnet::augment::BagSpec { pad: 4, ..bag };
        let bagged = evaluate(
            &mut net,
            &data.test,
            EvalView::Bag,
            &bag,
            milnet::loss::Aggregation::Mean,
            threads,
        )?;
        out["bag"] = serde_json::to_value(&bagged)
            .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    }
    println!("{out}");
    Ok(())
}

fn cmd_gradcheck(arch: &str, loss: &str, step: f64, threshold: f64) -> Result<()> {
    let spec = resolve_arch_arg(arch)?;
    let loss_mode = LossMode::parse(loss)?;
    let mut net = build_network(&spec, 12345)?;
    let [c, h, w] = spec.input_shape;
    // a three-view batch doubles as a three-region bag for the MIL losses
    let n = 3;
    let mut rng = rng_from(777, 0, 0);
    let input = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
    let label = LabelVector::one_hot(1.min(spec.num_classes - 1), spec.num_classes)?;
    let mil = MilConfig {
        mode: if loss_mode == LossMode::MilFullBag {
            MilMode::FullBag
        } else {
            MilMode::NegativeOnly
        },
        ..MilConfig::default()
    };
    let report = check_network(&mut net, loss_mode, &input, &label, &mil, step, threshold)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    if report.pass {
        eprintln!(
            "gradcheck pass: {} tensors, {} coordinates, {} kink skips",
            report.entries.len(),
            report.total_params,
            report.skipped_kinks
        );
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed at threshold {threshold}"
        )))
    }
}

fn cmd_shapes(arch: &str) -> Result<()> {
    let spec = resolve_arch_arg(arch)?;
    let plan = plan_network(&spec)?;
    let json = serde_json::json!({
        "arch": spec,
        "rows": plan.rows,
        "fc": {"in": plan.fc_in, "out": plan.fc_out},
        "weighted_layers": plan.weighted_layers,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&json)
            .map_err(|e| Error::config(format!("cannot serialize plan: {e}")))?
    );
    Ok(())
}

fn cmd_synth(spec_path: &Path, out_dir: &Path, crop: usize) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::io(spec_path.display().to_string(), e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid synth spec: {e}")))?;
    spec.validate()?;
    if crop == 0 || crop > spec.canvas {
        return Err(Error::config(format!(
            "crop {crop} does not fit the {} canvas",
            spec.canvas
        )));
    }
    let output = gen_synthetic(&spec)?;
    write_synth_dir(out_dir, &output, &spec)?;
    let measured =
        measured_crop_miss(&output.train_glyphs, spec.glyph, spec.canvas, crop, 10_000, spec.seed);
    let exact = mean_crop_miss_exact(&output.train_glyphs, spec.glyph, spec.canvas, crop);
    let summary = serde_json::json!({
        "out": out_dir.display().to_string(),
        "train": output.train.len(),
        "test": output.test.len(),
        "crop": crop,
        "measured_crop_miss": measured,
        "exact_crop_miss": exact,
    });
    println!("{summary}");
    Ok(())
}

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}
