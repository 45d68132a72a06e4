mod commands;
mod config;
mod error;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Command;
use config::{KeyValueFile, Params};
use error::CliError;
use manifest::Manifest;

/// Diffusion-map generative models: generate data, embed, train, sample and
/// evaluate.
#[derive(Parser, Debug)]
#[command(name = "vdae", version)]
struct Cli {
    /// Key-value settings file; `[command]` sections override the top block.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Deterministic reductions. Results never depend on the thread count,
    /// so this is always in effect.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Compute a diffusion-map embedding container.
    Embed(EmbedArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run random-walk chains from a trained model.
    Sample(SampleArgs),
    /// Compare generated points against data.
    Eval(EvalArgs),
    /// Bi-Lipschitz report for a model's decoder over its training cloud.
    Bilip(BilipArgs),
    /// Re-hash the files recorded in a manifest.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// circle, torus, grid, sphere or loop3d.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Circle and sphere radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Gaussian noise standard deviation (circle, loop3d).
    #[arg(long)]
    noise: Option<f64>,
    /// Torus radii.
    #[arg(long)]
    major: Option<f64>,
    #[arg(long)]
    minor: Option<f64>,
    /// Grid modes per side, spacing and per-mode standard deviation.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    std: Option<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long, short)]
    input: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Kernel bandwidth, or `auto` for the median heuristic.
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Precomputed embedding from `vdae embed` on the same data.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Final learning rate of a geometric decay, or `none`.
    #[arg(long)]
    lr_final: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    encoder_epochs: Option<usize>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    encoder_lr_final: Option<String>,
    /// Comma-separated hidden widths, e.g. `64,64`.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, short)]
    model: Option<PathBuf>,
    /// Starting points as CSV, cycled over the chains. Defaults to random
    /// training points.
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the decoder's Gaussian noise to each step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    ambient_noise: Option<bool>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Latent positions of the final step.
    #[arg(long)]
    latent_out: Option<PathBuf>,
    /// Directory for one CSV per step (`step_0000.csv` holds the seeds).
    #[arg(long)]
    trajectory_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Latent rows paired with the generated points, for a bi-Lipschitz report.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mmd_bandwidth: Option<String>,
    /// Random subsample size for each side of the GW discrepancy.
    #[arg(long)]
    gw_points: Option<usize>,
    #[arg(long)]
    gw_epsilon: Option<f64>,
    #[arg(long)]
    gw_max_iter: Option<usize>,
    #[arg(long)]
    gw_restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `kv` or `json`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BilipArgs {
    #[arg(long, short)]
    model: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    manifest: PathBuf,
    /// Also rerun the recorded command into a scratch directory and compare
    /// output hashes.
    #[arg(long)]
    rerun: bool,
}

/// Collects flag values as strings keyed like the config file.
#[derive(Default)]
struct Flags(BTreeMap<String, String>);

impl Flags {
    fn put<T: ToString>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_owned(), v.to_string());
        }
        self
    }

    fn path(&mut self, key: &str, v: Option<PathBuf>) -> &mut Self {
        self.put(key, v.map(|p| p.display().to_string()))
    }
}

fn flags_of(cmd: Cmd) -> (Command, BTreeMap<String, String>) {
    let mut f = Flags::default();
    let c = match cmd {
        Cmd::Gen(a) => {
            f.put("dataset", a.dataset).put("n", a.n).put("seed", a.seed).put("radius", a.radius);
            f.put("noise", a.noise).put("major", a.major).put("minor", a.minor).put("modes", a.modes);
            f.put("spacing", a.spacing).put("std", a.std).path("out", a.out);
            Command::Gen
        }
        Cmd::Embed(a) => {
            f.path("input", a.input).put("dim", a.dim).put("bandwidth", a.bandwidth).path("out", a.out);
            Command::Embed
        }
        Cmd::Train(a) => {
            f.path("input", a.input).path("embedding", a.embedding).put("dim", a.dim);
            f.put("bandwidth", a.bandwidth).put("batch_size", a.batch_size).put("epochs", a.epochs);
            f.put("lr", a.lr).put("lr_final", a.lr_final).put("seed", a.seed).put("alpha", a.alpha);
            f.put("c", a.c).put("k_neighbors", a.k_neighbors).put("ridge", a.ridge);
            f.put("encoder_epochs", a.encoder_epochs).put("encoder_lr", a.encoder_lr);
            f.put("encoder_lr_final", a.encoder_lr_final).put("hidden", a.hidden).path("out", a.out);
            Command::Train
        }
        Cmd::Sample(a) => {
            f.path("model", a.model).path("seeds", a.seeds).put("steps", a.steps).put("chains", a.chains);
            f.put("seed", a.seed).put("ambient_noise", a.ambient_noise).path("out", a.out);
            f.path("latent_out", a.latent_out).path("trajectory_dir", a.trajectory_dir);
            Command::Sample
        }
        Cmd::Eval(a) => {
            f.path("real", a.real).path("generated", a.generated).path("latent", a.latent).put("k", a.k);
            f.put("mmd_bandwidth", a.mmd_bandwidth).put("gw_points", a.gw_points);
            f.put("gw_epsilon", a.gw_epsilon).put("gw_max_iter", a.gw_max_iter);
            f.put("gw_restarts", a.gw_restarts).put("seed", a.seed).put("format", a.format);
            f.path("out", a.out);
            Command::Eval
        }
        Cmd::Bilip(a) => {
            f.path("model", a.model).put("k", a.k).put("format", a.format).path("out", a.out);
            Command::Bilip
        }
        Cmd::Verify(_) => unreachable!("verify takes no settings"),
    };
    (c, f.0)
}

fn absolute(path: &str) -> Result<String, CliError> {
    std::path::absolute(path)
        .map(|p| p.display().to_string())
        .map_err(|e| CliError::usage(format!("{path}: {e}")))
}

/// Flag > file > default, with path settings made absolute.
fn resolve(cmd: Command, file: Option<&KeyValueFile>, flags: &BTreeMap<String, String>) -> Result<Params, CliError> {
    let known = cmd.keys();
    let file_map = file.map(|f| f.for_command(cmd.name())).unwrap_or_default();
    if let Some(f) = file {
        let all: Vec<String> = commands::ALL
            .iter()
            .flat_map(|c| c.keys().into_iter().map(|(k, _)| k.to_owned()))
            .collect();
        for (section, entries) in &f.sections {
            if !section.is_empty() && Command::from_name(section).is_none() {
                return Err(CliError::usage(format!("config: unknown section [{section}]")));
            }
            if let Some(k) = entries.keys().find(|k| !all.contains(k)) {
                return Err(CliError::usage(format!("config: unknown key `{k}`")));
            }
        }
    }
    let known_refs: Vec<(&str, Option<&str>)> = known.iter().map(|(k, v)| (*k, v.as_deref())).collect();
    let mut params = Params::resolve(&known_refs, &file_map, flags);
    for (k, v) in params.map().clone() {
        if commands::is_path_key(&k) && !v.is_empty() {
            params.set(&k, absolute(&v)?);
        }
    }
    params.required("out")?;
    Ok(params)
}

fn verify(args: &VerifyArgs) -> Result<String, CliError> {
    let m = Manifest::load(&args.manifest)?;
    let mut bad = Vec::new();
    let mut count = 0;
    for (role, rec) in m.inputs.iter().chain(&m.outputs) {
        count += 1;
        match manifest::sha256_file(&rec.path) {
            Ok(h) if h == rec.sha256 => {}
            Ok(_) => bad.push(format!("{role} ({}) changed", rec.path.display())),
            Err(e) => bad.push(e.message),
        }
    }
    if !bad.is_empty() {
        return Err(CliError::data(format!("verification failed: {}", bad.join("; "))));
    }
    if !args.rerun {
        return Ok(format!("verified {count} files"));
    }
    let cmd = Command::from_name(&m.command)
        .ok_or_else(|| CliError::data(format!("unknown command `{}` in manifest", m.command)))?;
    let scratch = tempfile::tempdir().map_err(|e| CliError::data(format!("scratch directory: {e}")))?;
    let mut params = m.params.clone();
    for key in ["out", "latent_out", "trajectory_dir"] {
        if let Some(v) = params.raw(key) {
            let name = Path::new(v).file_name().map(|n| n.to_owned()).unwrap_or_else(|| key.into());
            params.set(key, scratch.path().join(name).display().to_string());
        }
    }
    let again = commands::run(cmd, &params)?;
    let mismatched: Vec<&String> = m
        .outputs
        .iter()
        .filter(|(role, rec)| again.outputs.get(*role).map(|r| &r.sha256) != Some(&rec.sha256))
        .map(|(role, _)| role)
        .collect();
    if !mismatched.is_empty() || again.outputs.len() != m.outputs.len() {
        return Err(CliError::data(format!("rerun produced different outputs: {mismatched:?}")));
    }
    Ok(format!("verified {count} files; rerun reproduced {} outputs", m.outputs.len()))
}

fn execute(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    let file = cli.config.as_deref().map(KeyValueFile::load).transpose()?;
    let (cmd, flags) = match cli.command {
        Cmd::Verify(args) => return verify(&args),
        other => flags_of(other),
    };
    let params = resolve(cmd, file.as_ref(), &flags)?;
    let m = commands::run(cmd, &params)?;
    let out = &m.outputs["out"];
    Ok(format!("{} {}", out.sha256, out.path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
