//! Command implementations over resolved [`Params`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vdae::container::{load_diffusion, load_model, save_diffusion, save_model};
use vdae::data::{self, load_csv, save_csv};
use vdae::metrics::{self, bilip_k, bilip_k_pairs, euclidean, gromov_wasserstein_with, GwConfig, MetricReport};
use vdae::spectral::{embed_cloud, median_heuristic_bandwidth};
use vdae::vdae::{initial_points, sample, train, train_with_diffusion, SampleOptions, TrainConfig};
use vdae::{rng, PointCloud};

use crate::config::Params;
use crate::error::CliError;
use crate::manifest::{self, manifest_path, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Embed,
    Train,
    Sample,
    Eval,
    Bilip,
}

pub const ALL: [Command; 6] = [
    Command::Gen,
    Command::Embed,
    Command::Train,
    Command::Sample,
    Command::Eval,
    Command::Bilip,
];

/// Keys naming files read by a command.
const INPUT_KEYS: [&str; 7] = ["input", "embedding", "model", "seeds", "real", "generated", "latent"];

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Embed => "embed",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Bilip => "bilip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL.into_iter().find(|c| c.name() == name)
    }

    /// Every setting the command reads, with its default.
    pub fn keys(self) -> Vec<(&'static str, Option<String>)> {
        let s = |k: &'static str, v: &str| (k, Some(v.to_owned()));
        let none = |k: &'static str| (k, None);
        match self {
            Command::Gen => vec![
                none("dataset"),
                s("n", "500"),
                s("seed", "0"),
                s("radius", "1"),
                s("noise", "0"),
                s("major", "2"),
                s("minor", "1"),
                s("modes", "3"),
                s("spacing", "10"),
                s("std", "0.5"),
                none("out"),
            ],
            Command::Embed => vec![none("input"), s("dim", "2"), s("bandwidth", "auto"), none("out")],
            Command::Train => {
                let d = TrainConfig::default();
                let hidden = d.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
                vec![
                    none("input"),
                    none("embedding"),
                    s("dim", &d.dim.to_string()),
                    s("bandwidth", "auto"),
                    s("batch_size", &d.batch_size.to_string()),
                    s("epochs", &d.epochs.to_string()),
                    s("lr", &d.lr.to_string()),
                    s("lr_final", "none"),
                    s("seed", &d.seed.to_string()),
                    s("alpha", &d.alpha.to_string()),
                    s("c", &d.c.to_string()),
                    s("k_neighbors", &d.k_neighbors.to_string()),
                    s("ridge", &d.ridge.to_string()),
                    s("encoder_epochs", &d.encoder_epochs.to_string()),
                    s("encoder_lr", &d.encoder_lr.to_string()),
                    s("encoder_lr_final", "none"),
                    s("hidden", &hidden),
                    none("out"),
                ]
            }
            Command::Sample => vec![
                none("model"),
                none("seeds"),
                s("steps", "20"),
                s("chains", "64"),
                s("seed", "0"),
                s("ambient_noise", "false"),
                none("out"),
                none("latent_out"),
                none("trajectory_dir"),
            ],
            Command::Eval => {
                let g = GwConfig::default();
                vec![
                    none("real"),
                    none("generated"),
                    none("latent"),
                    s("k", "10"),
                    s("mmd_bandwidth", "auto"),
                    s("gw_points", "200"),
                    s("gw_epsilon", &g.epsilon.to_string()),
                    s("gw_max_iter", &g.max_iter.to_string()),
                    s("gw_restarts", &g.restarts.to_string()),
                    s("seed", "0"),
                    s("format", "kv"),
                    none("out"),
                ]
            }
            Command::Bilip => vec![none("model"), s("k", "10"), s("format", "kv"), none("out")],
        }
    }

    pub fn input_keys(self) -> Vec<&'static str> {
        self.keys()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| INPUT_KEYS.contains(k))
            .collect()
    }
}

/// Keys whose values are paths, made absolute before running.
pub fn is_path_key(key: &str) -> bool {
    INPUT_KEYS.contains(&key) || matches!(key, "out" | "latent_out" | "trajectory_dir")
}

/// Runs `cmd` and writes its artifacts and manifest. Returns the manifest.
pub fn run(cmd: Command, params: &Params) -> Result<Manifest, CliError> {
    let out = PathBuf::from(params.required("out")?);
    let mut inputs = BTreeMap::new();
    for key in cmd.input_keys() {
        if let Some(p) = params.raw(key) {
            inputs.insert(key.to_owned(), manifest::record(Path::new(p))?);
        }
    }
    for (role, rec) in &inputs {
        for key in ["out", "latent_out"] {
            if params.raw(key).is_some_and(|o| Path::new(o) == rec.path) {
                return Err(CliError::usage(format!("`{key}` would overwrite input `{role}`")));
            }
        }
    }
    let written = match cmd {
        Command::Gen => gen(params, &out)?,
        Command::Embed => embed(params, &out)?,
        Command::Train => train_cmd(params, &out)?,
        Command::Sample => sample_cmd(params, &out)?,
        Command::Eval => eval(params, &out, &inputs)?,
        Command::Bilip => bilip(params, &out, &inputs)?,
    };
    let mut outputs = BTreeMap::new();
    for (role, path) in written {
        outputs.insert(role, manifest::record(&path)?);
    }
    let m = Manifest {
        command: cmd.name().to_owned(),
        params: params.clone(),
        inputs,
        outputs,
    };
    m.write(&manifest_path(&out))?;
    Ok(m)
}

type Written = Vec<(String, PathBuf)>;

fn gen(p: &Params, out: &Path) -> Result<Written, CliError> {
    let n: usize = p.get("n")?;
    let seed: u64 = p.get("seed")?;
    let cloud = match p.required("dataset")? {
        "circle" => data::gen_circle(n, p.get("radius")?, p.get("noise")?, seed)?,
        "torus" => data::gen_torus(n, p.get("major")?, p.get("minor")?, seed)?,
        "grid" => data::gen_gaussian_grid(n, p.get("modes")?, p.get("spacing")?, p.get("std")?, seed)?,
        "sphere" => data::gen_sphere(n, p.get("radius")?, seed)?,
        "loop3d" => data::gen_loop3d(n, p.get("noise")?, seed)?,
        other => {
            return Err(CliError::usage(format!(
                "unknown dataset `{other}` (circle, torus, grid, sphere, loop3d)"
            )))
        }
    };
    save_csv(&cloud, out)?;
    Ok(vec![("out".into(), out.to_owned())])
}

fn bandwidth_for(p: &Params, x: &PointCloud) -> Result<f64, CliError> {
    match p.optional("bandwidth")? {
        Some(b) => Ok(b),
        None => Ok(median_heuristic_bandwidth(x)?),
    }
}

fn embed(p: &Params, out: &Path) -> Result<Written, CliError> {
    let x = load_csv(p.required("input")?)?;
    let model = embed_cloud(&x, bandwidth_for(p, &x)?, p.get("dim")?)?;
    save_diffusion(&model, out)?;
    Ok(vec![("out".into(), out.to_owned())])
}

pub fn train_config(p: &Params) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        dim: p.get("dim")?,
        bandwidth: p.optional("bandwidth")?,
        batch_size: p.get("batch_size")?,
        epochs: p.get("epochs")?,
        lr: p.get("lr")?,
        lr_final: p.optional("lr_final")?,
        seed: p.get("seed")?,
        alpha: p.get("alpha")?,
        c: p.get("c")?,
        k_neighbors: p.get("k_neighbors")?,
        ridge: p.get("ridge")?,
        encoder_epochs: p.get("encoder_epochs")?,
        encoder_lr: p.get("encoder_lr")?,
        encoder_lr_final: p.optional("encoder_lr_final")?,
        hidden: p.list("hidden")?,
    };
    config.validate()?;
    Ok(config)
}

fn train_cmd(p: &Params, out: &Path) -> Result<Written, CliError> {
    let x = load_csv(p.required("input")?)?;
    let config = train_config(p)?;
    let model = match p.raw("embedding") {
        Some(path) => train_with_diffusion(&x, load_diffusion(path)?, &config)?,
        None => train(&x, &config)?,
    };
    save_model(&model, out)?;
    Ok(vec![("out".into(), out.to_owned())])
}

fn sample_cmd(p: &Params, out: &Path) -> Result<Written, CliError> {
    let chains: usize = p.get("chains")?;
    let steps: usize = p.get("steps")?;
    if chains == 0 {
        return Err(CliError::usage("chains must be at least 1"));
    }
    if steps == 0 {
        return Err(CliError::usage("steps must be at least 1"));
    }
    let seed: u64 = p.get("seed")?;
    let model = load_model(p.required("model")?)?;
    let seeds = match p.raw("seeds") {
        Some(path) => {
            let s = load_csv(path)?;
            if s.dim() != model.data_dim() {
                return Err(CliError::data(format!(
                    "seed points have dimension {}, the model expects {}",
                    s.dim(),
                    model.data_dim()
                )));
            }
            let idx: Vec<usize> = (0..chains).map(|i| i % s.len()).collect();
            s.subset(&idx)?
        }
        None => initial_points(&model, chains, seed)?,
    };
    let trajectory_dir = p.raw("trajectory_dir").map(PathBuf::from);
    let options = SampleOptions {
        ambient_noise: p.get("ambient_noise")?,
        keep_trajectory: trajectory_dir.is_some(),
    };
    let s = sample(&model, &seeds, steps, seed, options)?;
    save_csv(&s.points, out)?;
    let mut written = vec![("out".to_owned(), out.to_owned())];
    if let Some(path) = p.raw("latent_out") {
        save_csv(&s.latent, path)?;
        written.push(("latent_out".into(), PathBuf::from(path)));
    }
    if let Some(dir) = trajectory_dir {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (t, cloud) in std::iter::once(&seeds).chain(&s.trajectory).enumerate() {
            let path = dir.join(format!("step_{t:04}.csv"));
            save_csv(cloud, &path)?;
            written.push((format!("trajectory_{t:04}"), path));
        }
    }
    Ok(written)
}

fn subsample(x: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, CliError> {
    if x.len() <= n {
        return Ok(x.clone());
    }
    let mut idx = rng::permutation(&mut rng::seeded(seed), x.len());
    idx.truncate(n);
    idx.sort_unstable();
    Ok(x.subset(&idx)?)
}

fn write_report(p: &Params, out: &Path, mut report: MetricReport, inputs: &BTreeMap<String, manifest::FileRecord>) -> Result<Written, CliError> {
    for (role, rec) in inputs {
        report.context.insert(format!("{role}_sha256"), rec.sha256.clone());
    }
    let text = match p.required("format")? {
        "kv" => report.to_key_value(),
        "json" => report.to_json(),
        other => return Err(CliError::usage(format!("unknown report format `{other}` (kv, json)"))),
    };
    std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    Ok(vec![("out".into(), out.to_owned())])
}

fn eval(p: &Params, out: &Path, inputs: &BTreeMap<String, manifest::FileRecord>) -> Result<Written, CliError> {
    let real = load_csv(p.required("real")?)?;
    let generated = load_csv(p.required("generated")?)?;
    if real.dim() != generated.dim() {
        return Err(CliError::data(format!(
            "real points have dimension {}, generated {}",
            real.dim(),
            generated.dim()
        )));
    }
    let seed: u64 = p.get("seed")?;
    let mut report = MetricReport {
        mmd: Some(metrics::mmd(&real, &generated, p.optional("mmd_bandwidth")?)?),
        ..MetricReport::default()
    };

    let n: usize = p.get("gw_points")?;
    let gw_config = GwConfig {
        epsilon: p.get("gw_epsilon")?,
        max_iter: p.get("gw_max_iter")?,
        restarts: p.get("gw_restarts")?,
        seed,
        ..GwConfig::default()
    };
    let (a, b) = (subsample(&real, n, seed)?, subsample(&generated, n, seed.wrapping_add(1))?);
    report.set_gw(&gromov_wasserstein_with(&a, &b, &gw_config)?, &gw_config);
    report.context.insert("gw_points".into(), format!("{}x{}", a.len(), b.len()));

    if let Some(path) = p.raw("latent") {
        let latent = load_csv(path)?;
        if latent.len() != generated.len() {
            return Err(CliError::data(format!(
                "{} latent rows for {} generated points",
                latent.len(),
                generated.len()
            )));
        }
        report.set_bilip(&bilip_k_pairs(&latent, &generated, p.get("k")?, &euclidean, &euclidean)?);
    }
    report.context.insert("real_points".into(), real.len().to_string());
    report.context.insert("generated_points".into(), generated.len().to_string());
    write_report(p, out, report, inputs)
}

fn bilip(p: &Params, out: &Path, inputs: &BTreeMap<String, manifest::FileRecord>) -> Result<Written, CliError> {
    let model = load_model(p.required("model")?)?;
    let latent = model.encoded_training();
    let b = bilip_k(|z| model.decode(z), &latent, p.get("k")?)?;
    let mut report = MetricReport::default();
    report.set_bilip(&b);
    report.context.insert("points".into(), latent.len().to_string());
    write_report(p, out, report, inputs)
}
