//! Experiment configuration and the batch commands behind the `physgan` CLI.
//!
//! Every command writes under `<out_dir>/<run_id>/<command>`. Output is staged
//! in a sibling `.partial` directory and renamed into place once complete, so
//! a finished directory is never half-written.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorParams;
use crate::dynsim::{make_dataset, Dataset, ExcitationFamily, SimConfig, Split};
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::io::{read_dataset, write_dataset};
use crate::metrics::AuxClassifier;
use crate::nn::Checkpoint;
use crate::training::{
    adversarial_train, collapse_comparison, evaluate_generator, latest_checkpoint, lowshot_sweep,
    RunOptions, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_DATA: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => EXIT_CONFIG,
        Error::TrainingAbort(_) | Error::Instability { .. } | Error::Conditioning { .. } => {
            EXIT_TRAINING
        }
        Error::Shape { .. } | Error::Data { .. } | Error::Checkpoint { .. } | Error::Io { .. } => {
            EXIT_DATA
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_cycles: usize,
    pub family: ExcitationFamily,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub shots: Vec<usize>,
    /// Seeds of the paired physics/vanilla runs.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 10, 20, 40, 60, 80, 100],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Seed of the sampling noise behind evaluation FID and IS.
    pub eval_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { eval_seed: 0 }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub sim: SimConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    /// Replaces both the data seed and the training seed.
    pub seed: Option<u64>,
}

fn filesystem_safe(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(id) = &o.run_id {
            self.run_id = id.clone();
        }
        if let Some(s) = o.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !filesystem_safe(&self.run_id) {
            return Err(Error::Config(format!(
                "run_id `{}` must be nonempty and use only letters, digits, `-`, `_` or `.`",
                self.run_id
            )));
        }
        self.sim
            .validate()
            .map_err(|e| Error::Config(format!("sim: {e}")))?;
        if self.data.n_cycles == 0 {
            return Err(Error::Config("data.n_cycles must be >= 1".into()));
        }
        self.train.validate()?;
        if self.sweep.shots.is_empty() || self.sweep.shots.contains(&0) {
            return Err(Error::Config(
                "sweep.shots must be nonempty and positive".into(),
            ));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must be nonempty".into()));
        }
        Ok(())
    }

    /// The configuration with every default filled in, as TOML.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

#[derive(Clone, Debug)]
pub struct CommandOptions {
    /// Dataset directory; defaults to the run's `simulate` output.
    pub data: Option<PathBuf>,
    /// Checkpoint for `evaluate`; defaults to the run's final model.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub resume: bool,
    pub overwrite: bool,
}

impl Default for CommandOptions {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            split: Split::Test,
            resume: false,
            overwrite: false,
        }
    }
}

/// Output directory of one command, staged until [`Staging::commit`].
struct Staging {
    target: PathBuf,
    partial: PathBuf,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Staging {
    fn begin(target: PathBuf, overwrite: bool, resume: bool) -> Result<Self> {
        let partial = with_suffix(&target, ".partial");
        if target.exists() && !overwrite && !resume {
            return Err(Error::Config(format!(
                "{} already exists; pass --overwrite to replace it",
                target.display()
            )));
        }
        if resume {
            if !partial.exists() && target.exists() {
                fs::rename(&target, &partial).map_err(|e| Error::io(&target, e))?;
            }
        } else if partial.exists() {
            fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        Ok(Self { target, partial })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.partial.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::input(e.to_string()))?;
        self.write(name, text + "\n")
    }

    fn commit(self) -> Result<PathBuf> {
        let old = with_suffix(&self.target, ".old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        if self.target.exists() {
            fs::rename(&self.target, &old).map_err(|e| Error::io(&self.target, e))?;
        }
        fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.partial, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(self.target)
    }
}

fn data_dir(cfg: &ExperimentConfig, opts: &CommandOptions) -> PathBuf {
    opts.data
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("simulate"))
}

fn load_data(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<Dataset<f64>> {
    read_dataset(&data_dir(cfg, opts))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<String> {
    let dataset = make_dataset::<f64>(cfg.data.n_cycles, &cfg.sim, cfg.data.family, cfg.data.seed)?;
    let stage = Staging::begin(cfg.run_dir().join("simulate"), opts.overwrite, false)?;
    let manifest = write_dataset(&dataset, &stage.partial)?;
    let dir = stage.commit()?;
    let count = |s: Split| dataset.splits.iter().filter(|&&x| x == s).count();
    Ok(format!(
        "wrote {} cycles (train {}, test {}, eval {}) to {}\nsha256 {}",
        manifest.n_cycles,
        count(Split::Train),
        count(Split::Test),
        count(Split::Eval),
        dir.display(),
        manifest.dataset_sha256
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<String> {
    let dataset = load_data(cfg, opts)?;
    let stage = Staging::begin(cfg.run_dir().join("train"), opts.overwrite, opts.resume)?;
    let ckpt_dir = stage.path("checkpoints");
    let resume = opts.resume && latest_checkpoint(&ckpt_dir).is_some();
    stage.write("config.toml", cfg.effective_toml()?)?;
    let log_path = stage.path("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let outcome = adversarial_train(
        &dataset,
        &cfg.train,
        RunOptions {
            checkpoint_dir: Some(ckpt_dir),
            resume,
            log: Some(&mut log),
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    outcome.checkpoint().save(&stage.path("model.bin"))?;
    stage.write_json("report.json", &outcome.report)?;
    let dir = stage.commit()?;
    let last = outcome.report.epochs.last();
    Ok(format!(
        "trained {} epochs ({:?}); val theta rmse {}; artifacts in {}",
        outcome.report.last_epoch(),
        outcome.report.stop_reason,
        last.map_or("n/a".into(), |r| format!("{:.4e}", r.val_theta_rmse)),
        dir.display()
    ))
}

fn check_shapes(sigma: &GeneratorParams<f64>, dataset: &Dataset<f64>) -> Result<()> {
    let s = &dataset.samples[0];
    let (b, n) = (s.emg.rows(), s.force.rows());
    if sigma.emg_channels() != b || sigma.muscles() != n {
        return Err(Error::shape(
            "checkpoint vs dataset",
            format!("{b} emg channels and {n} muscles (dataset)"),
            format!(
                "{} emg channels and {} muscles (checkpoint)",
                sigma.emg_channels(),
                sigma.muscles()
            ),
        ));
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<String> {
    let dataset = load_data(cfg, opts)?;
    let ckpt_path = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("train").join("model.bin"));
    let ck = Checkpoint::load(&ckpt_path)?;
    let sigma = GeneratorParams::<f64>::from_checkpoint(&ck)?;
    check_shapes(&sigma, &dataset)?;
    let phi = DiscriminatorParams::<f64>::from_checkpoint(&ck, "metric.")?;
    let aux = AuxClassifier::<f64>::from_checkpoint(&ck, "aux.").ok();
    let report = evaluate_generator(
        &sigma,
        &dataset,
        opts.split,
        &phi,
        aux.as_ref(),
        cfg.metrics.eval_seed,
    )?;
    let stage = Staging::begin(
        cfg.run_dir().join(format!("evaluate-{}", opts.split)),
        opts.overwrite,
        false,
    )?;
    stage.write_json("report.json", &report)?;
    let dir = stage.commit()?;
    let th = &report.quality.theta;
    Ok(format!(
        "{} sequences on {}: theta rmse {:.4e}, r2 {}, fid {}; report in {}",
        report.n_sequences,
        report.split,
        th.rmse,
        th.r2.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.fid.map_or("n/a".into(), |v| format!("{v:.4}")),
        dir.display()
    ))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<String> {
    let dataset = load_data(cfg, opts)?;
    let stage = Staging::begin(cfg.run_dir().join("sweep"), opts.overwrite, false)?;
    let table = lowshot_sweep(&dataset, &cfg.train, &cfg.sweep.shots)?;
    stage.write_json("lowshot.json", &table)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut csv = String::from("shots,psnr_ratio,r2_ratio,rmse_ratio,srcc_ratio\n");
    for r in &table.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.shots,
            r.psnr_ratio,
            opt(r.r2_ratio),
            r.rmse_ratio,
            opt(r.srcc_ratio)
        );
    }
    stage.write("lowshot.csv", csv)?;

    let pairs = collapse_comparison(&dataset, &cfg.train, &cfg.sweep.seeds)?;
    stage.write_json("collapse.json", &pairs)?;
    let mut csv = String::from("seed,variant,epoch,fid,inception_score\n");
    for p in &pairs {
        for (name, run) in [("physics", &p.physics), ("vanilla", &p.vanilla)] {
            for s in &run.snapshots {
                let _ = writeln!(
                    csv,
                    "{},{name},{},{},{}",
                    p.seed, s.epoch, s.fid, s.inception_score
                );
            }
        }
    }
    stage.write("collapse.csv", csv)?;
    let dir = stage.commit()?;
    let wins = pairs.iter().filter(|p| p.fid_delta > 0.0).count();
    Ok(format!(
        "low-shot R² trend {}; physics lower final FID in {wins}/{} seeds; tables in {}",
        opt(table.r2_trend()),
        pairs.len(),
        dir.display()
    ))
}
