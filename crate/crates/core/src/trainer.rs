//! Staged optimisation (alignment encoders, then the redistribution
//! adapter, then the decoder heads), checkpoint files, and inference that
//! turns recordings into reconstructed clips and a metrics report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::datasets::tensor_io::{decode_prefix, encode, TensorData};
use crate::datasets::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::hcam::{self, hierarchical_align_loss, mix_flat, prior_loss, Hcam, HcamConfig, HcamDims, MixSpec};
use crate::hed::{
    self, caption_loss, cls_loss, hed_total, motion_loss, progressive_weight, repeat_masks, repeat_rows,
    repeat_tokens, seg_loss, Hed, HedConfig, HedDims,
};
use crate::metrics::{build_report, MetricsReport, ReportConfig};
use crate::nn::{Adam, AdamConfig, Bound, ParamSet};
use crate::preprocess::{load_roi_scheme, partition_voxels, RoiGroup, RoiScheme, SchemeId};
use crate::rng::{rng_for, Stream};
use crate::sara::{self, align_loss, generic_loss, sara_total, subject_loss, tile_subjects, Sara, SaraConfig};
use crate::stubs::{ClipStub, StubClassifiers, VaeStub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Hcam,
    Sara,
    Hed,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::Hcam, Stage::Sara, Stage::Hed];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Hcam => "hcam",
            Stage::Sara => "sara",
            Stage::Hed => "hed",
            Stage::All => "all",
        }
    }

    /// Parameter-name prefix owned by a concrete stage.
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Hcam => hcam::PREFIX,
            Stage::Sara => sara::PREFIX,
            Stage::Hed => hed::PREFIX,
            Stage::All => "",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcam" => Ok(Stage::Hcam),
            "sara" => Ok(Stage::Sara),
            "hed" => Ok(Stage::Hed),
            "all" => Ok(Stage::All),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs_hcam: usize,
    pub epochs_sara: usize,
    pub epochs_hed: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of stimuli used for training; the rest form the test split.
    pub train_ratio: f64,
    /// Subject left out of training and used alone at evaluation.
    pub holdout_subject: Option<usize>,
    /// Keep the encoder weights fixed while the adapter trains.
    pub freeze_hcam_in_sara: bool,
    /// Keep encoder and adapter weights fixed while the heads train.
    pub freeze_upstream_in_hed: bool,
    /// Train the prior alone for the first half of the encoder epochs.
    pub separate_prior: bool,
    /// Mixing probability for the adapter's alignment loss (0 disables mixing).
    pub sara_mix_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::All,
            epochs_hcam: 20,
            epochs_sara: 20,
            epochs_hed: 20,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
            train_ratio: 0.8,
            holdout_subject: None,
            freeze_hcam_in_sara: false,
            freeze_upstream_in_hed: true,
            separate_prior: false,
            sara_mix_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs_hcam == 0 || self.epochs_sara == 0 || self.epochs_hed == 0 {
            return bad("train epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2 (contrastive batches)");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("train.lr must be a finite nonnegative number");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train.train_ratio must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.sara_mix_prob) {
            return bad("train.sara_mix_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Hcam => self.epochs_hcam,
            Stage::Sara => self.epochs_sara,
            Stage::Hed | Stage::All => self.epochs_hed,
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        match self.stage {
            Stage::All => Stage::ORDER.to_vec(),
            s => vec![s],
        }
    }
}

/// The three modules sized for one dataset.
#[derive(Debug, Clone)]
pub struct Model {
    pub hcam: Hcam,
    pub sara: Sara,
    pub hed: Hed,
    pub scheme: RoiScheme,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hcam: HcamConfig,
    pub sara: SaraConfig,
    pub hed: HedConfig,
}

pub fn clip_stub(spec: &SynthSpec) -> Result<ClipStub> {
    ClipStub::new(
        spec.image_size,
        spec.clip_tokens,
        spec.clip_channels,
        spec.clip_layers,
        spec.clip_low_layer,
    )
}

pub fn vae_stub(spec: &SynthSpec) -> Result<VaeStub> {
    VaeStub::new(spec.image_size, spec.latent_size, spec.latent_channels)
}

/// Class count of the evaluation classifiers; large enough for 50-way trials.
pub const REPORT_CLASSES: usize = 100;

impl Model {
    pub fn new(ds: &Dataset, cfg: &ModelConfig, scheme_id: SchemeId) -> Result<Self> {
        let spec = ds.spec().clone();
        let scheme = load_roi_scheme(scheme_id, &ds.atlas)?;
        let dims = HcamDims {
            grid_rows: ds.layout.rows(),
            grid_cols: ds.layout.cols(),
            early: scheme.group_len(RoiGroup::Early),
            ventral: scheme.group_len(RoiGroup::Ventral),
            dorsal: scheme.group_len(RoiGroup::Dorsal),
            tokens: spec.clip_tokens,
            channels: spec.clip_channels,
        };
        let hed_dims = HedDims {
            tokens: spec.clip_tokens,
            channels: spec.clip_channels,
            vocab: spec.vocab_size,
            caption_len: spec.caption_len,
            classes: spec.n_classes,
            seg_size: spec.seg_size,
            frames: spec.frames,
            latent_channels: spec.latent_channels,
            latent_size: spec.latent_size,
        };
        Ok(Self {
            hcam: Hcam::new(cfg.hcam.clone(), dims)?,
            sara: Sara::new(cfg.sara.clone(), spec.clip_channels, spec.n_subjects)?,
            hed: Hed::new(cfg.hed.clone(), hed_dims)?,
            scheme,
            spec,
        })
    }

    pub fn init(&self, stage: Stage, seed: u64) -> ParamSet {
        let mut rng = rng_for(seed, Stream::Init, stage.index());
        match stage {
            Stage::Hcam => self.hcam.init(&mut rng),
            Stage::Sara => self.sara.init(&mut rng),
            Stage::Hed => self.hed.init(&mut rng),
            Stage::All => ParamSet::new(),
        }
    }

    /// Voxel groups and surface images for every (stimulus, subject) pair.
    pub fn batch(&self, ds: &Dataset, stimuli: &[usize], subjects: &[usize]) -> Result<Batch> {
        let voxels = ds.voxel_batch(stimuli, subjects)?;
        let parts = partition_voxels(&voxels, &self.scheme)?;
        Ok(Batch {
            stimuli: stimuli.to_vec(),
            subjects: subjects.to_vec(),
            surface: ds.surface_batch(stimuli, subjects)?.into_dyn(),
            groups: RoiGroup::ALL.map(|g| parts.group(g).clone().into_dyn()),
        })
    }

    /// Encoder pass, then the adapter and stream fusion with its semantic
    /// tokens as queries when the adapter is bound.
    pub fn features<'t>(
        &self,
        p: &Bound<'t>,
        surface: Var<'t>,
        groups: [Var<'t>; 3],
        with_sara: bool,
    ) -> Result<Features<'t>> {
        let emb = self.hcam.forward(p, surface, groups)?;
        if !with_sara {
            return Ok(Features {
                f_brain: emb.f_brain,
                f_early: emb.f_early,
                f_ventral: emb.f_ventral,
                f_dorsal: emb.f_dorsal,
                t_sem: None,
                t_subj: None,
            });
        }
        let red = self.sara.forward(p, emb.f_brain)?;
        let fuse = |e, g| self.hcam.fuse_cross_attention(p, e, red.t_sem, g);
        Ok(Features {
            f_brain: emb.f_brain,
            f_early: fuse(emb.e_early, RoiGroup::Early)?,
            f_ventral: fuse(emb.e_ventral, RoiGroup::Ventral)?,
            f_dorsal: fuse(emb.e_dorsal, RoiGroup::Dorsal)?,
            t_sem: Some(red.t_sem),
            t_subj: Some(red.t_subj),
        })
    }

    fn prior_target<'a>(&self, ds: &'a Dataset) -> Result<&'a Array3<f64>> {
        match self.hcam.cfg.prior_target.as_str() {
            "clip_high" => Ok(&ds.targets.clip_high),
            "video_embed" => Ok(&ds.targets.video_embed),
            other => Err(Error::Config(format!("unknown hcam.prior_target `{other}`"))),
        }
    }
}

#[derive(Clone, Copy)]
pub struct Features<'t> {
    pub f_brain: Var<'t>,
    pub f_early: Var<'t>,
    pub f_ventral: Var<'t>,
    pub f_dorsal: Var<'t>,
    pub t_sem: Option<Var<'t>>,
    pub t_subj: Option<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub stimuli: Vec<usize>,
    pub subjects: Vec<usize>,
    /// `[B, S, H, W]`
    pub surface: Tensor,
    /// `[B, S, V_group]` per stream.
    pub groups: [Tensor; 3],
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.stimuli.len() * self.subjects.len()
    }

    fn mixed(&self, spec: &MixSpec) -> Result<Batch> {
        Ok(Batch {
            stimuli: self.stimuli.clone(),
            subjects: self.subjects.clone(),
            surface: mix_flat(&self.surface, spec)?,
            groups: [
                mix_flat(&self.groups[0], spec)?,
                mix_flat(&self.groups[1], spec)?,
                mix_flat(&self.groups[2], spec)?,
            ],
        })
    }

    fn bind<'t>(&self, tape: &'t Tape) -> (Var<'t>, [Var<'t>; 3]) {
        (
            tape.constant(self.surface.clone()),
            [
                tape.constant(self.groups[0].clone()),
                tape.constant(self.groups[1].clone()),
                tape.constant(self.groups[2].clone()),
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
    /// Schedule weight per decoder loss (empty outside the decoder stage).
    pub weights: BTreeMap<String, f64>,
}

pub fn format_log(rows: &[LogRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Pipeline(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Pipeline(format!("loss log: {e}"))))
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"VCCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    stages: Vec<Stage>,
    config: String,
    tensors: Vec<(String, Vec<usize>)>,
    meta: BTreeMap<String, String>,
}

/// Trained parameters plus the stages that produced them and the config
/// text they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub stages: Vec<Stage>,
    pub config: String,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage) && self.params.has_prefix(stage.prefix())
    }

    /// Magic, version, JSON header length and header (names, shapes, stages,
    /// config echo), then each tensor in name order as a tensor record.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: CKPT_VERSION,
            stages: self.stages.clone(),
            config: self.config.clone(),
            tensors: self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
            meta: self.meta.clone(),
        };
        let head = serde_json::to_vec(&header).map_err(|e| Error::Pipeline(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, v) in self.params.iter() {
            out.extend(encode(&TensorData::F64(v.clone()))?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::CorruptHeader("checkpoint shorter than its header".into()));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(Error::BadMagic(String::from_utf8_lossy(&bytes[..4]).into_owned()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::CorruptHeader("checkpoint header truncated".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::CorruptHeader(format!("checkpoint header: {e}")))?;
        let mut rest = &bytes[16 + len..];
        let mut params = ParamSet::new();
        for (name, shape) in &header.tensors {
            let (t, used) = decode_prefix(rest)?;
            let t = t.into_f64()?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CorruptHeader(format!(
                    "tensor {name} has shape {:?}, header says {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name.clone(), t);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(Error::CorruptHeader(format!("{} trailing bytes in checkpoint", rest.len())));
        }
        Ok(Self {
            params,
            stages: header.stages,
            config: header.config,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Subjects used for training under the hold-out setting.
pub fn training_subjects(ds: &Dataset, holdout: Option<usize>) -> Result<Vec<usize>> {
    let all = ds.subjects();
    if let Some(h) = holdout {
        if !all.contains(&h) {
            return Err(Error::Config(format!("holdout subject {h} is not in the dataset")));
        }
    }
    let subjects: Vec<usize> = all.into_iter().filter(|&s| Some(s) != holdout).collect();
    if subjects.is_empty() {
        return Err(Error::Config("no training subjects remain".into()));
    }
    Ok(subjects)
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub cfg: &'a TrainConfig,
    pub config_echo: String,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, cfg: &'a TrainConfig, config_echo: String) -> Self {
        Self {
            model,
            cfg,
            config_echo,
        }
    }

    /// Train the configured stage(s), starting from `upstream` when given.
    pub fn train(&self, ds: &Dataset, upstream: Option<Checkpoint>) -> Result<(Checkpoint, Vec<LogRow>)> {
        self.cfg.validate()?;
        let stages = self.cfg.stages();
        let mut ckpt = upstream.unwrap_or_else(|| Checkpoint {
            params: ParamSet::new(),
            stages: Vec::new(),
            config: String::new(),
            meta: BTreeMap::new(),
        });
        for &needed in Stage::ORDER.iter().filter(|s| **s < stages[0]) {
            if !ckpt.has_stage(needed) {
                return Err(Error::MissingUpstreamCheckpoint(needed.name().into()));
            }
        }
        let mut log = Vec::new();
        for stage in stages {
            ckpt.params.merge(self.model.init(stage, self.cfg.seed));
            self.run_stage(stage, ds, &mut ckpt.params, &mut log)?;
            if !ckpt.stages.contains(&stage) {
                ckpt.stages.push(stage);
            }
        }
        ckpt.config = self.config_echo.clone();
        Ok((ckpt, log))
    }

    fn trainable(&self, stage: Stage) -> impl Fn(&str) -> bool + 'static {
        let own = format!("{}.", stage.prefix());
        let hcam_too = match stage {
            Stage::Sara => !self.cfg.freeze_hcam_in_sara,
            Stage::Hed => !self.cfg.freeze_upstream_in_hed,
            _ => false,
        };
        let sara_too = stage == Stage::Hed && !self.cfg.freeze_upstream_in_hed;
        move |name: &str| {
            name.starts_with(&own)
                || (hcam_too && name.starts_with("hcam."))
                || (sara_too && name.starts_with("sara."))
        }
    }

    fn run_stage(&self, stage: Stage, ds: &Dataset, params: &mut ParamSet, log: &mut Vec<LogRow>) -> Result<()> {
        let subjects = training_subjects(ds, self.cfg.holdout_subject)?;
        let stimuli = ds.stimuli();
        let bs = self.cfg.batch_size;
        let per_epoch = stimuli.len().div_ceil(bs);
        if per_epoch == 0 {
            return Err(Error::Pipeline("training split has no stimuli".into()));
        }
        let schedules = self.model.hed.cfg.schedules(per_epoch)?;
        let mut adam = Adam::new(AdamConfig {
            lr: self.cfg.lr,
            weight_decay: self.cfg.weight_decay,
            ..AdamConfig::default()
        });
        let trainable = self.trainable(stage);
        let epochs = self.cfg.epochs(stage);
        for epoch in 0..epochs {
            let mut order = stimuli.clone();
            order.shuffle(&mut rng_for(self.cfg.seed, Stream::Batches, (stage.index() << 32) | epoch as u64));
            for (b, chunk) in order.chunks(bs).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = self.model.batch(ds, chunk, &subjects)?;
                let step = (epoch * per_epoch + b) as u64;
                let tape = Tape::new();
                let p = params.bind_where(&tape, &trainable);
                let mut row = LogRow {
                    stage,
                    epoch,
                    batch: b,
                    loss: 0.0,
                    parts: BTreeMap::new(),
                    weights: BTreeMap::new(),
                };
                let loss = match stage {
                    Stage::Hcam => self.hcam_loss(&tape, &p, ds, &batch, step, epoch, epochs, &mut row)?,
                    Stage::Sara => self.sara_loss(&tape, &p, ds, &batch, step, &mut row)?,
                    Stage::Hed => {
                        let w: Vec<f64> = schedules
                            .iter()
                            .map(|s| progressive_weight(epoch, b, s))
                            .collect::<Result<_>>()?;
                        let w = [w[0], w[1], w[2], w[3]];
                        for (k, name) in hed::LOSS_NAMES.iter().enumerate() {
                            row.weights.insert(name.to_string(), w[k]);
                        }
                        self.hed_loss(&tape, &p, ds, &batch, w, &mut row)?
                    }
                    Stage::All => unreachable!("expanded into concrete stages"),
                };
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::DivergedLoss { epoch, batch: b, value });
                }
                row.loss = value;
                let grads = tape.backward(loss);
                let grads: BTreeMap<String, Tensor> = p
                    .grads(&grads)
                    .into_iter()
                    .filter(|(k, _)| trainable(k))
                    .collect();
                adam.step(params, &grads)?;
                if !params.all_finite() {
                    return Err(Error::DivergedLoss {
                        epoch,
                        batch: b,
                        value: f64::NAN,
                    });
                }
                log.push(row);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn hcam_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        ds: &Dataset,
        batch: &Batch,
        step: u64,
        epoch: usize,
        epochs: usize,
        row: &mut LogRow,
    ) -> Result<Var<'t>> {
        let m = self.model;
        let c = &m.hcam.cfg;
        let s = batch.subjects.len();
        let (prior_on, align_on) = if self.cfg.separate_prior {
            let first_half = epoch < epochs.div_ceil(2);
            (first_half, !first_half)
        } else {
            (true, true)
        };
        let mut total = tape.scalar(0.0);
        if prior_on {
            let (surface, groups) = batch.bind(tape);
            let f_brain = m.hcam.forward(p, surface, groups)?.f_brain;
            let target = Dataset::gather(m.prior_target(ds)?, &batch.stimuli).into_dyn();
            let target = tile_subjects(tape.constant(target), s);
            let l = prior_loss(f_brain, target)?;
            row.parts.insert("prior".into(), l.item());
            total = total + l.scale(c.prior_weight);
        }
        if align_on {
            let mut rng = rng_for(self.cfg.seed, Stream::Mix, step);
            let spec = MixSpec::sample(batch.rows(), c.tau, c.beta_a, c.beta_b, c.mix_prob, &mut rng)?;
            let mixed = batch.mixed(&spec)?;
            let (surface, groups) = mixed.bind(tape);
            let emb = m.hcam.forward(p, surface, groups)?;
            let low = tape.constant(Dataset::gather(&ds.targets.clip_low, &batch.stimuli).into_dyn());
            let high = tape.constant(Dataset::gather(&ds.targets.clip_high, &batch.stimuli).into_dyn());
            let l = hierarchical_align_loss(emb.f_early, emb.f_ventral, emb.f_brain, low, high, &spec)?;
            row.parts.insert("align".into(), l.item());
            total = total + l.scale(c.align_weight);
        }
        Ok(total)
    }

    fn sara_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        ds: &Dataset,
        batch: &Batch,
        step: u64,
        row: &mut LogRow,
    ) -> Result<Var<'t>> {
        let m = self.model;
        let c = &m.sara.cfg;
        let s = batch.subjects.len();
        let (surface, groups) = batch.bind(tape);
        let f_brain = m.hcam.forward(p, surface, groups)?.f_brain;
        let red = m.sara.forward(p, f_brain)?;
        let clip = tape.constant(Dataset::gather(&ds.targets.clip_high, &batch.stimuli).into_dyn());
        let (t_align, spec) = if self.cfg.sara_mix_prob > 0.0 {
            let mut rng = rng_for(self.cfg.seed, Stream::Mix, (1 << 40) | step);
            let spec = MixSpec::sample(batch.rows(), c.tau, 0.15, 0.15, self.cfg.sara_mix_prob, &mut rng)?;
            let (surface, groups) = batch.mixed(&spec)?.bind(tape);
            let f_mixed = m.hcam.forward(p, surface, groups)?.f_brain;
            (m.sara.forward(p, f_mixed)?.t_sem, spec)
        } else {
            (red.t_sem, MixSpec::identity(batch.rows(), c.tau))
        };
        let align = align_loss(t_align, tile_subjects(clip, s), &spec)?;
        let labels: Vec<usize> = batch
            .stimuli
            .iter()
            .flat_map(|_| batch.subjects.iter().copied())
            .collect();
        let subj = subject_loss(m.sara.subject_logits(p, red.t_subj), &labels)?;
        let generic = generic_loss(red.t_sem, c.tau_g)?;
        row.parts.insert("align".into(), align.item());
        row.parts.insert("subj".into(), subj.item());
        row.parts.insert("generic".into(), generic.item());
        sara_total(align, subj, generic, &c.into())
    }

    fn hed_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        ds: &Dataset,
        batch: &Batch,
        w: [f64; 4],
        row: &mut LogRow,
    ) -> Result<Var<'t>> {
        let m = self.model;
        let s = batch.subjects.len();
        let (surface, groups) = batch.bind(tape);
        let f = m.features(p, surface, groups, true)?;
        let captions = Dataset::gather(&ds.targets.captions, &batch.stimuli).mapv(|t| t.max(0) as usize);
        let out = m.hed.forward(p, f.f_early, f.f_ventral, f.f_dorsal, &repeat_tokens(&captions, s))?;
        let labels: Vec<usize> = ds.labels_of(&batch.stimuli).iter().map(|&l| l.max(0) as usize).collect();
        let masks = Dataset::gather(&ds.targets.seg_masks, &batch.stimuli).mapv(f64::from);
        let blurry = ds.targets.blurry_latents.select(Axis(0), &batch.stimuli);
        let losses = [
            caption_loss(out.caption_logits, &repeat_tokens(&captions, s))?,
            cls_loss(out.cls_logits, &repeat_rows(&labels, s))?,
            seg_loss(out.seg_logits, &repeat_masks(&masks, s))?,
            motion_loss(out.latents, &blurry)?,
        ];
        for (name, l) in hed::LOSS_NAMES.iter().zip(&losses) {
            row.parts.insert(name.to_string(), l.item());
        }
        hed_total(losses, &m.hed.cfg.weights(), w)
    }
}

/// Reconstructed clips `[F, H, W]` for each stimulus as seen by one subject.
pub fn reconstruct(
    model: &Model,
    params: &ParamSet,
    ds: &Dataset,
    stimuli: &[usize],
    subject: usize,
    batch_size: usize,
) -> Result<Vec<Array3<f64>>> {
    let vae = vae_stub(&model.spec)?;
    let mut out = Vec::with_capacity(stimuli.len());
    for chunk in stimuli.chunks(batch_size.max(1)) {
        let batch = model.batch(ds, chunk, &[subject])?;
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let (surface, groups) = batch.bind(&tape);
        let f = model.features(&p, surface, groups, true)?;
        let frames = model.hed.motion_project(&p, f.f_dorsal, model.spec.frames)?;
        let clips = model.hed.reconstruct_stub(
            params,
            &f.f_ventral.value(),
            &f.f_early.value(),
            &frames.value(),
            &vae,
        )?;
        out.extend(clips.into_iter().map(|c| c.index_axis_move(Axis(3), 0)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub report: ReportConfig,
    /// Also score a copy of the model with every weight tensor shuffled.
    pub baseline: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            report: ReportConfig::default(),
            baseline: true,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub baseline: Option<MetricsReport>,
    pub recon: Vec<Array3<f64>>,
    pub seconds_per_clip: f64,
}

/// Reconstruct every test stimulus for each evaluation subject and score
/// the clips against the stimulus frames.
pub fn evaluate(
    model: &Model,
    ckpt: &Checkpoint,
    ds: &Dataset,
    subjects: &[usize],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    for stage in Stage::ORDER {
        if !ckpt.has_stage(stage) {
            return Err(Error::MissingUpstreamCheckpoint(stage.name().into()));
        }
    }
    let stimuli = ds.stimuli();
    let classifiers = StubClassifiers::new(clip_stub(&model.spec)?, REPORT_CLASSES);
    let gt: Vec<Array3<f64>> = subjects
        .iter()
        .flat_map(|_| stimuli.iter().map(|&j| ds.targets.frames.index_axis(Axis(0), j).to_owned()))
        .collect();
    let run = |params: &ParamSet| -> Result<(Vec<Array3<f64>>, f64)> {
        let start = Instant::now();
        let mut recon = Vec::new();
        for &s in subjects {
            recon.extend(reconstruct(model, params, ds, &stimuli, s, cfg.batch_size)?);
        }
        Ok((recon, start.elapsed().as_secs_f64() / gt.len().max(1) as f64))
    };
    let (recon, seconds_per_clip) = run(&ckpt.params)?;
    let mut report = build_report(&recon, &gt, &classifiers, &cfg.report)?;
    report
        .meta
        .insert("subjects".into(), format!("{subjects:?}"));
    report.meta.insert("clips".into(), recon.len().to_string());
    let baseline = if cfg.baseline {
        let shuffled = ckpt.params.shuffled(&mut rng_for(cfg.report.rng_seed, Stream::Shuffle, 1));
        let (base_recon, _) = run(&shuffled)?;
        Some(build_report(&base_recon, &gt, &classifiers, &cfg.report)?)
    } else {
        None
    };
    Ok(Evaluation {
        report,
        baseline,
        recon,
        seconds_per_clip,
    })
}

/// Rows of `x` pooled over tokens, used by the disentanglement probe.
pub fn pooled_tokens(
    model: &Model,
    params: &ParamSet,
    ds: &Dataset,
    stimuli: &[usize],
    subjects: &[usize],
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let batch = model.batch(ds, stimuli, subjects)?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let (surface, groups) = batch.bind(&tape);
    let f = model.features(&p, surface, groups, true)?;
    let pool = |v: Var<'_>| -> Array2<f64> {
        let t = hcam::pool_tokens(v).value();
        let s = t.shape().to_vec();
        t.as_ref().clone().into_shape_with_order((s[0], s[1])).expect("2-D pooled tokens")
    };
    let sem = pool(f.t_sem.expect("adapter bound"));
    let subj = pool(f.t_subj.expect("adapter bound"));
    let labels = stimuli.iter().flat_map(|_| subjects.iter().copied()).collect();
    Ok((sem, subj, labels))
}

/// Held-out accuracy of a softmax linear probe fitted by full-batch Adam on
/// standardized features.
pub fn linear_probe_accuracy(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    classes: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mean = train_x.mean_axis(Axis(0)).ok_or(Error::EmptyList("probe rows"))?;
    let std: Array1<f64> = train_x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    let norm = |x: &Array2<f64>| ((x - &mean) / &std).into_dyn();
    let (xtr, xte) = (norm(train_x), norm(test_x));
    let probe = crate::nn::Linear::new("probe", train_x.ncols(), classes, true);
    let mut params = ParamSet::new();
    probe.init(&mut params, &mut rng_for(seed, Stream::Probe, 0));
    let mut adam = Adam::new(AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    });
    for _ in 0..steps {
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let loss = crate::losses::cross_entropy(probe.forward(&p, tape.constant(xtr.clone())), train_y)?;
        let g = tape.backward(loss);
        adam.step(&mut params, &p.grads(&g))?;
    }
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let logits = probe.forward(&p, tape.constant(xte)).value();
    let hits = test_y
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.index_axis(Axis(0), i);
            let best = (0..classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count();
    Ok(hits as f64 / test_y.len().max(1) as f64)
}
