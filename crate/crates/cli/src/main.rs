//! `evreid` command line: synthetic data, training, evaluation, inspection.
//!
//! Configuration is resolved as defaults, then `--config FILE`, then dotted
//! `--key value` overrides, then the shortcut flags. Every command writes the
//! resolved configuration to `<out>/config.txt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use evreid::checkpoint::{load_model, save_model};
use evreid::config::Config;
use evreid::data::{stack_time_major, Dataset, Sequence};
use evreid::eval::result_csv;
use evreid::events::{bin_events, parse_event_file, SensorGeometry};
use evreid::nn::ForwardCtx;
use evreid::ssam::staw_block_matrix;
use evreid::synthgen::make_dataset;
use evreid::tensor::Tensor;
use evreid::train::{evaluate_sets, metrics_csv, train, METRICS_HEADER};

const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "evreid", version, about = "Spiking event-camera person re-identification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Shared {
    /// `key = value` file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic event dataset into `--out`.
    Synth {
        #[command(flatten)]
        shared: Shared,
        /// Number of identities (config key `synth.ids`).
        #[arg(long)]
        ids: Option<usize>,
    },
    /// Train a model; writes `model.ckpt` and `metrics.csv` into `--out`.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Dataset root. Without it a synthetic dataset is generated into `<out>/data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config key `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrieval metrics of a checkpoint; writes `results.csv` and `summary.txt`.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which sequences form the query and gallery sets.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Dump attention weights, bias matrices and spike rates for one input.
    Inspect {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// An `.events` file.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    /// Held-out sequences.
    Test,
    /// Training sequences, under the same camera protocol.
    Train,
}

/// A usage problem found after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Pulls `--a.b value` and `--a.b=value` out of the argument list.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn resolve(base: Config, shared: &Shared, overrides: &[(String, String)], shortcuts: &[(&str, Option<String>)]) -> anyhow::Result<Config> {
    let mut cfg = base;
    if let Some(path) = &shared.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.merge_text(&text).with_context(|| format!("config file {}", path.display()))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    for (k, v) in shortcuts {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(shared: &Shared) -> anyhow::Result<&Path> {
    let out = shared.out.as_deref().ok_or_else(|| Usage("--out DIR is required".into()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn echo_config(out: &Path, cfg: &Config) -> anyhow::Result<()> {
    fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    Ok(())
}

fn cmd_synth(shared: &Shared, ids: Option<usize>, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let out = out_dir(shared)?;
    let cfg = resolve(Config::default(), shared, overrides, &[("synth.ids", ids.map(|n| n.to_string()))])?;
    let entries = make_dataset(out, &cfg.synth())?;
    echo_config(out, &cfg)?;
    let events: usize = entries.iter().map(|e| e.n_events).sum();
    println!("wrote {} sequences ({events} events) to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train(shared: &Shared, data: Option<&Path>, epochs: Option<usize>, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let out = out_dir(shared)?;
    let cfg = resolve(Config::default(), shared, overrides, &[("train.epochs", epochs.map(|n| n.to_string()))])?;
    echo_config(out, &cfg)?;
    let root = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            log::info!("generating synthetic dataset into {}", d.display());
            make_dataset(&d, &cfg.synth())?;
            d
        }
    };
    let dataset = Dataset::load(&root, &cfg)?;
    log::info!(
        "{} identities, {} training and {} held-out sequences",
        dataset.num_classes(),
        dataset.train.len(),
        dataset.test.len()
    );
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
    let (trainer, rows) = train(&cfg, &dataset, |_, row| {
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        std::io::Write::write_all(&mut f, format!("{}\n", row.csv_row()).as_bytes())?;
        Ok(())
    })?;
    fs::write(&metrics_path, metrics_csv(&rows))?;
    let ckpt = out.join("model.ckpt");
    save_model(&ckpt, &trainer.net, u32::try_from(trainer.epoch)?)?;
    if let Some((map, r1)) = rows.iter().rev().find_map(|r| r.retrieval) {
        println!("epoch {}: mAP {map:.4} rank-1 {r1:.4}", trainer.epoch);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_eval(shared: &Shared, checkpoint: &Path, data: &Path, split: Split, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let out = out_dir(shared)?;
    let (net, epoch) = load_model(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = resolve(net.cfg.clone(), shared, overrides, &[])?;
    echo_config(out, &cfg)?;
    let dataset = Dataset::load(data, &cfg)?;
    let (queries, gallery): (Vec<&Sequence>, Vec<&Sequence>) = match split {
        Split::Test => (dataset.queries(), dataset.gallery()),
        Split::Train => {
            let cam = dataset.train.iter().map(|s| s.cam).min();
            dataset.train.iter().partition(|s| Some(s.cam) == cam)
        }
    };
    let result = evaluate_sets(&net, &queries, &gallery)?;
    let keys: Vec<String> = queries.iter().map(|s| s.key()).collect();
    fs::write(out.join("results.csv"), result_csv(&result, &keys))?;
    let cmc: Vec<String> = result.cmc.iter().take(10).map(|v| format!("{v:.6}")).collect();
    let summary = format!(
        "checkpoint = {}\nepoch = {epoch}\nsplit = {split:?}\nqueries = {}\ngallery = {}\nskipped = {}\nmap = {:.6}\nrank1 = {:.6}\ncmc = {}\n",
        checkpoint.display(),
        queries.len(),
        gallery.len(),
        result.skipped.len(),
        result.map,
        result.rank1(),
        cmc.join(",")
    );
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn matrix_csv(t: &Tensor<f32>) -> String {
    let cols = t.shape()[1];
    let mut out = String::new();
    for row in t.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_inspect(shared: &Shared, checkpoint: &Path, input: &Path, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let out = out_dir(shared)?;
    let (net, _) = load_model(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = resolve(net.cfg.clone(), shared, overrides, &[])?;
    echo_config(out, &cfg)?;
    let geom = SensorGeometry::new(net.cfg.width, net.cfg.height)?;
    let stream = parse_event_file(input, geom)?;
    let seq = bin_events(&stream, net.cfg.steps, net.cfg.window_us, geom, net.cfg.bin_clip)?;
    let x = stack_time_major(&[&seq])?;
    let mut ctx = ForwardCtx::eval();
    ctx.taps = Some(Vec::new());
    ctx.spike_rates = Some(Vec::new());
    net.run_eval(&x, &mut ctx)?;
    for tap in ctx.taps.take().unwrap_or_default() {
        let staw = staw_block_matrix(&tap.q, &tap.k, &tap.bias, net.cfg.ssam_variant)?;
        fs::write(out.join(format!("staw_{}.csv", tap.stage)), matrix_csv(&staw))?;
        fs::write(out.join(format!("bias_{}.csv", tap.stage)), matrix_csv(&tap.bias))?;
        println!("{}: {} steps x {} tokens", tap.stage, tap.steps, tap.height * tap.width);
    }
    let mut rates = String::from("layer,step,rate\n");
    for r in ctx.spike_rates.take().unwrap_or_default() {
        for (t, v) in r.per_step.iter().enumerate() {
            rates.push_str(&format!("{},{t},{v:.6}\n", r.layer));
        }
    }
    fs::write(out.join("spike_rates.csv"), rates)?;
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Synth { shared, ids } => cmd_synth(shared, *ids, overrides),
        Cmd::Train { shared, data, epochs } => cmd_train(shared, data.as_deref(), *epochs, overrides),
        Cmd::Eval {
            shared,
            checkpoint,
            data,
            split,
        } => cmd_eval(shared, checkpoint, data, *split, overrides),
        Cmd::Inspect {
            shared,
            checkpoint,
            input,
        } => cmd_inspect(shared, checkpoint, input, overrides),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.chain().find_map(|c| c.downcast_ref::<evreid::Error>()) {
        Some(evreid::Error::Numeric(_)) => 3,
        Some(evreid::Error::Config(_) | evreid::Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
