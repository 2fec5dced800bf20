//! Pipeline commands behind the `vcflow` binary: config loading with
//! `--set` overrides, the on-disk run layout, and one function per
//! subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Table;

use crate::datasets::{
    preprocess_dataset, split_train_test, write_pgm, write_synthetic, Dataset, DatasetManifest, SynthSpec,
    MANIFEST_FILE, PROCESSED_FILE,
};
use crate::error::{Error, Result};
use crate::flat;
use crate::hcam::HcamConfig;
use crate::hed::HedConfig;
use crate::metrics::MetricsReport;
use crate::preprocess::SchemeId;
use crate::sara::{SaraConfig, SaraWeights};
use crate::trainer::{evaluate, format_log, EvalConfig, Model, ModelConfig, Stage, TrainConfig, Trainer};

/// Environment variable that overrides the base seed (below `--seed`).
pub const SEED_ENV: &str = "VCFLOW_SEED";

/// Keys derived from the top-level `seed`; setting them directly is rejected.
const DERIVED_SEEDS: [&str; 3] = ["synth.seed", "train.seed", "eval.report.rng_seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Preprocess,
    Train,
    Eval,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub scheme: SchemeId,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { scheme: SchemeId::A }
    }
}

/// Everything a run needs, merged from the config file and overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Base seed for data generation, training and evaluation trials.
    pub seed: u64,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub hcam: HcamConfig,
    pub sara: SaraConfig,
    pub hed: HedConfig,
    pub eval: EvalConfig,
    /// Raw value of the seed environment variable, echoed into reports.
    #[serde(skip)]
    pub seed_env: Option<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            hcam: HcamConfig::default(),
            sara: SaraConfig::default(),
            hed: HedConfig::default(),
            eval: EvalConfig::default(),
            seed_env: None,
        };
        cfg.apply_seed();
        cfg
    }
}

impl CliConfig {
    /// Merge the optional config file, `--set` overrides, the seed
    /// environment variable and `--seed`, in increasing precedence.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>, seed_env: Option<String>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                flat::parse_table(&text)?
            }
            None => Table::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
            flat::set_dotted(&mut table, k.trim(), flat::parse_value(v))?;
        }
        let keys = flat::flatten(&table);
        if let Some(k) = DERIVED_SEEDS.iter().find(|k| keys.contains_key(**k)) {
            return Err(Error::Config(format!("`{k}` follows the top-level `seed`; set that instead")));
        }
        let mut cfg: CliConfig = flat::from_table(table)?;
        if let Some(raw) = &seed_env {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.seed_env = seed_env;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.report.rng_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.hcam.validate()?;
        SaraWeights::from(&self.sara).validate()?;
        self.hed.weights().validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        if let Some(h) = self.train.holdout_subject {
            if h >= self.synth.n_subjects {
                return Err(Error::Config(format!(
                    "train.holdout_subject {h} is not below synth.n_subjects {}",
                    self.synth.n_subjects
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hcam: self.hcam.clone(),
            sara: self.sara.clone(),
            hed: self.hed.clone(),
        }
    }

    /// The resolved config as flat `key = value` text.
    pub fn echo(&self) -> Result<String> {
        flat::to_text(self)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.echo()?.as_bytes())))
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn raw_manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_FILE)
    }

    pub fn processed_manifest(&self) -> PathBuf {
        self.data().join(PROCESSED_FILE)
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn loss_log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn baseline_json(&self) -> PathBuf {
        self.root.join("eval").join("baseline.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("eval").join("samples")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run one subcommand; returns the text to print on stdout.
pub fn run(cmd: Command, cfg: &CliConfig, dir: &RunDir) -> Result<String> {
    match cmd {
        Command::Synth => cmd_synth(cfg, dir),
        Command::Preprocess => cmd_preprocess(cfg, dir),
        Command::Train => cmd_train(cfg, dir),
        Command::Eval => cmd_eval(cfg, dir),
        Command::Report => cmd_report(dir),
    }
}

pub fn cmd_synth(cfg: &CliConfig, dir: &RunDir) -> Result<String> {
    let m = write_synthetic(&dir.data(), &cfg.synth)?;
    Ok(format!(
        "wrote {} stimuli x {} subjects to {}\n",
        m.synth.n_samples,
        m.synth.n_subjects,
        dir.raw_manifest().display()
    ))
}

pub fn cmd_preprocess(cfg: &CliConfig, dir: &RunDir) -> Result<String> {
    let raw = dir.raw_manifest();
    if !raw.is_file() {
        return Err(Error::MissingArtifact {
            what: "dataset manifest",
            path: raw,
            command: "synth",
        });
    }
    check_synth(&DatasetManifest::read(&raw)?, cfg)?;
    let m = preprocess_dataset(&raw, cfg.preprocess.scheme)?;
    Ok(format!(
        "scheme {} applied; {} written ({})\n",
        cfg.preprocess.scheme,
        dir.processed_manifest().display(),
        m.preprocess_order
    ))
}

fn check_synth(m: &DatasetManifest, cfg: &CliConfig) -> Result<()> {
    if m.synth != cfg.synth {
        return Err(Error::Config(
            "dataset on disk was generated from different synth settings; re-run `synth`".into(),
        ));
    }
    Ok(())
}

/// Train and test splits of the processed dataset.
fn load_splits(cfg: &CliConfig, dir: &RunDir) -> Result<(Dataset, Dataset)> {
    let path = dir.processed_manifest();
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            what: "processed manifest",
            path,
            command: "preprocess",
        });
    }
    let m = DatasetManifest::read(&path)?;
    check_synth(&m, cfg)?;
    if m.scheme.as_deref() != Some(&cfg.preprocess.scheme.to_string()) {
        return Err(Error::Config(format!(
            "dataset was preprocessed with scheme {:?}, config asks for {}; re-run `preprocess`",
            m.scheme, cfg.preprocess.scheme
        )));
    }
    let (train, test) = split_train_test(&m, cfg.train.train_ratio, cfg.seed)?;
    let root = dir.data();
    Ok((Dataset::from_manifest(&root, train)?, Dataset::from_manifest(&root, test)?))
}

pub fn cmd_train(cfg: &CliConfig, dir: &RunDir) -> Result<String> {
    let (train, _) = load_splits(cfg, dir)?;
    let model = Model::new(&train, &cfg.model(), cfg.preprocess.scheme)?;
    let stages = cfg.train.stages();
    let mut upstream = match Stage::ORDER.iter().rev().find(|s| **s < stages[0]) {
        Some(&prev) => {
            let path = dir.checkpoint(prev);
            if !path.is_file() {
                return Err(Error::MissingUpstreamCheckpoint(format!("{prev} ({})", path.display())));
            }
            Some(crate::trainer::Checkpoint::load(&path)?)
        }
        None => None,
    };
    let echo = cfg.echo()?;
    let digest = cfg.digest()?;
    let mut out = String::new();
    for stage in stages {
        let stage_cfg = TrainConfig {
            stage,
            ..cfg.train.clone()
        };
        let trainer = Trainer::new(&model, &stage_cfg, echo.clone());
        let (mut ckpt, log) = trainer.train(&train, upstream.take())?;
        ckpt.meta.insert("scheme".into(), cfg.preprocess.scheme.to_string());
        ckpt.meta.insert("seed".into(), cfg.seed.to_string());
        ckpt.meta.insert("config_sha256".into(), digest.clone());
        let path = dir.checkpoint(stage);
        create_dir(path.parent().expect("checkpoint dir"))?;
        ckpt.save(&path)?;
        write_text(&dir.loss_log(stage), &format_log(&log)?)?;
        let (first, last) = (log.first().map_or(f64::NAN, |r| r.loss), log.last().map_or(f64::NAN, |r| r.loss));
        out.push_str(&format!(
            "{stage}: {} steps, loss {first:.4} -> {last:.4}, checkpoint {}\n",
            log.len(),
            path.display()
        ));
        upstream = Some(ckpt);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &CliConfig, dir: &RunDir) -> Result<String> {
    let path = dir.checkpoint(Stage::Hed);
    if !path.is_file() {
        return Err(Error::MissingUpstreamCheckpoint(format!(
            "{} ({}); run `train` first",
            Stage::Hed,
            path.display()
        )));
    }
    let ckpt = crate::trainer::Checkpoint::load(&path)?;
    let (_, test) = load_splits(cfg, dir)?;
    let model = Model::new(&test, &cfg.model(), cfg.preprocess.scheme)?;
    let subjects = match cfg.train.holdout_subject {
        Some(h) => vec![h],
        None => test.subjects(),
    };
    let ev = evaluate(&model, &ckpt, &test, &subjects, &cfg.eval)?;
    let mut report = ev.report;
    let meta = |r: &mut MetricsReport| -> Result<()> {
        r.meta.insert("seed".into(), cfg.seed.to_string());
        r.meta.insert("scheme".into(), cfg.preprocess.scheme.to_string());
        r.meta.insert("config_sha256".into(), cfg.digest()?);
        if let Some(raw) = &cfg.seed_env {
            r.meta.insert(SEED_ENV.into(), raw.clone());
        }
        Ok(())
    };
    meta(&mut report)?;
    create_dir(dir.report_json().parent().expect("eval dir"))?;
    report.write_json(&dir.report_json())?;
    if let Some(mut base) = ev.baseline {
        meta(&mut base)?;
        base.write_json(&dir.baseline_json())?;
    }
    let samples = dir.samples();
    create_dir(&samples)?;
    let stimuli = test.stimuli();
    for (i, clip) in ev.recon.iter().take(2).enumerate() {
        let gt = test.targets.frames.index_axis(Axis(0), stimuli[i]);
        for f in 0..clip.len_of(Axis(0)) {
            write_pgm(&samples.join(format!("clip{i}_frame{f}_recon.pgm")), &clip.index_axis(Axis(0), f).to_owned())?;
            write_pgm(&samples.join(format!("clip{i}_frame{f}_gt.pgm")), &gt.index_axis(Axis(0), f).to_owned())?;
        }
    }
    Ok(format!(
        "evaluated {} clips ({:.4} s per clip); report {}\n",
        ev.recon.len(),
        ev.seconds_per_clip,
        dir.report_json().display()
    ))
}

/// Metric table of the evaluated model, plus the shuffled-weights
/// baseline when one was scored.
pub fn cmd_report(dir: &RunDir) -> Result<String> {
    let path = dir.report_json();
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            what: "metrics report",
            path,
            command: "eval",
        });
    }
    let report = MetricsReport::read_json(&path)?;
    let mut text = format!("model\n{}", report.table());
    let base = dir.baseline_json();
    if base.is_file() {
        text.push_str(&format!("\nshuffled-weights baseline\n{}", MetricsReport::read_json(&base)?.table()));
    }
    write_text(&dir.report_txt(), &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = vec!["sara.tau_g = 0.2".to_string(), "train.stage=hcam".to_string()];
        let cfg = CliConfig::load(None, &sets, None, None).unwrap();
        assert_eq!(cfg.sara.tau_g, 0.2);
        assert_eq!(cfg.train.stage, Stage::Hcam);
    }

    #[test]
    fn unknown_key_is_a_validation_error() {
        let err = CliConfig::load(None, &["sara.tua_g=0.1".into()], None, None).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }

    #[test]
    fn seed_precedence() {
        let sets = vec!["seed=3".to_string()];
        assert_eq!(CliConfig::load(None, &sets, None, None).unwrap().seed, 3);
        let env = CliConfig::load(None, &sets, None, Some("5".into())).unwrap();
        assert_eq!(env.seed, 5);
        assert_eq!((env.synth.seed, env.train.seed, env.eval.report.rng_seed), (5, 5, 5));
        assert_eq!(CliConfig::load(None, &sets, Some(7), Some("5".into())).unwrap().seed, 7);
        assert!(CliConfig::load(None, &[], None, Some("x".into())).unwrap_err().is_validation());
    }

    #[test]
    fn derived_seed_keys_are_rejected() {
        for k in DERIVED_SEEDS {
            let err = CliConfig::load(None, &[format!("{k}=1")], None, None).unwrap_err();
            assert!(err.is_validation());
        }
    }

    #[test]
    fn shipped_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let cfg = CliConfig::load(Some(&path), &[], None, None).unwrap();
        assert_eq!(cfg, CliConfig::default());
    }
}
