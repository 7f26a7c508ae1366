//! The three-stage progressive cascade.
//!
//! Stage `n` trains a 2D generator on cross-sections along `order.stage(n)`.
//! From stage 2 on, the generator also sees the matching cross-section of
//! the volume recovered by stage `n − 1` (the prior) as one extra channel.
//! After training, a stage is frozen and every subject's estimate is
//! materialized once as the prior for the next stage.
//!
//! Reconstruction stages predict a normalized magnitude, which is given the
//! zero-filled phase and projected onto the acquired k-space samples.
//! Synthesis stages after the first predict a correction that is added to
//! the prior and clamped to `[-1, 1]`.
//!
//! Intensities are normalized per volume: reconstruction inputs are the real
//! and imaginary parts of the zero-filled image divided by its largest
//! magnitude `s`; synthesis volumes are divided by the upper bound of their
//! declared value range.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use num_complex::Complex32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_volume, save_volume, DatasetManifest};
use crate::geometry::{enumerate_orders, split_volume, stack_to_volume, Orientation, ProgressionOrder, SliceStack};
use crate::kspace::{data_consistency, generate_vd_mask, phase_restore, undersample, KSpaceVolume};
use crate::metrics::{psnr, ssim, MeanStd};
use crate::nets::{
    build_discriminator, build_generator, checkpoint_bytes, load_checkpoint, DiscriminatorConfig, GeneratorConfig,
    Network, NfScale, Tensor,
};
use crate::training::{train_2d_model, EpochRecord, LossWeights, TrainConfig, TrainPair};
use crate::{seed, Error, Result, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Reconstruction {
        #[serde(rename = "R")]
        r: f64,
        readout_axis: usize,
        /// Contrast whose fully sampled volume is the ground truth.
        contrast: String,
        /// Stages 2 and 3 predict a correction added to the prior instead
        /// of the whole image.
        #[serde(default)]
        residual: bool,
    },
    Synthesis {
        sources: Vec<String>,
        target: String,
    },
}

impl TaskSpec {
    pub fn reconstruction(r: f64, contrast: &str) -> Self {
        TaskSpec::Reconstruction {
            r,
            readout_axis: 2,
            contrast: contrast.into(),
            residual: false,
        }
    }

    /// Switches residual stages on or off; synthesis is always residual.
    pub fn with_residual(mut self, on: bool) -> Self {
        if let TaskSpec::Reconstruction { residual, .. } = &mut self {
            *residual = on;
        }
        self
    }

    /// Whether stages after the first add their output to the prior.
    pub fn residual_stages(&self) -> bool {
        match self {
            TaskSpec::Reconstruction { residual, .. } => *residual,
            TaskSpec::Synthesis { .. } => true,
        }
    }

    pub fn synthesis(sources: &[&str], target: &str) -> Self {
        TaskSpec::Synthesis {
            sources: sources.iter().map(|s| s.to_string()).collect(),
            target: target.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Reconstruction { r, readout_axis, .. } => {
                if !(*r > 1.0) {
                    return Err(Error::Config(format!("reconstruction requires R > 1, got {r}")));
                }
                if *readout_axis > 2 {
                    return Err(Error::Config(format!("readout axis {readout_axis} outside 0..3")));
                }
            }
            TaskSpec::Synthesis { sources, target } => {
                if sources.is_empty() {
                    return Err(Error::Config("synthesis needs at least one source contrast".into()));
                }
                if sources.contains(target) {
                    return Err(Error::Config(format!("target `{target}` is also a source")));
                }
                let mut uniq = sources.clone();
                uniq.sort();
                uniq.dedup();
                if uniq.len() != sources.len() {
                    return Err(Error::Config("duplicate source contrasts".into()));
                }
            }
        }
        Ok(())
    }

    /// Model channels per cross-section before neighbours and prior.
    pub fn source_channels(&self) -> usize {
        match self {
            TaskSpec::Reconstruction { .. } => 2,
            TaskSpec::Synthesis { sources, .. } => sources.len(),
        }
    }

    pub fn is_synthesis(&self) -> bool {
        matches!(self, TaskSpec::Synthesis { .. })
    }
}

/// Generator input channels of stage `n` (1-based).
pub fn stage_input_channels(task: &TaskSpec, n: usize, n_c: usize) -> Result<usize> {
    if !(1..=3).contains(&n) {
        return Err(Error::Range(format!("stage {n} outside 1..=3")));
    }
    if n_c == 0 || n_c % 2 == 0 {
        return Err(Error::Config(format!("n_c must be odd, got {n_c}")));
    }
    Ok(task.source_channels() * n_c + usize::from(n >= 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Consecutive cross-sections per input.
    pub n_c: usize,
    pub n_f: NfScale,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            n_c: 1,
            n_f: NfScale::One,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        if self.n_c == 0 || self.n_c % 2 == 0 {
            return Err(Error::Config(format!("n_c must be odd, got {}", self.n_c)));
        }
        Ok(())
    }

    /// Seed of stage `n`; the sGAN baseline shares stage 1's.
    pub fn stage_seed(&self, n: usize) -> u64 {
        seed::derive(self.seed, &[seed::keys::STAGE, n as u64])
    }
}

/// Measured k-space and its zero-filled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub kspace: KSpaceVolume,
    pub zero_filled: Volume<Complex32>,
}

/// One subject, normalized for the models.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    /// Model input channels `[C, d0, d1, d2]`.
    pub source: Volume<f32>,
    /// Normalized target, when known.
    pub target: Option<Volume<f32>>,
    /// Ground truth in original units, when known.
    pub reference: Option<Volume<f32>>,
    /// Multiply normalized values by this to recover original units.
    pub scale: f32,
    pub acquisition: Option<Acquisition>,
}

fn scaled(v: &Volume<f32>, k: f32) -> Volume<f32> {
    let mut out = Volume {
        data: v.data.mapv(|x| x * k),
        spacing: v.spacing,
        value_range: v.value_range,
    };
    out.refresh_range();
    out
}

impl Subject {
    /// Reconstruction subject from acquired data; `reference` is the fully
    /// sampled magnitude if available.
    pub fn from_acquisition(id: &str, acquisition: Acquisition, reference: Option<Volume<f32>>) -> Result<Self> {
        let zf = &acquisition.zero_filled;
        let s = zf.data.iter().fold(0f32, |m, z| m.max(z.norm()));
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("subject `{id}`: zero-filled image is empty")));
        }
        let grid = zf.grid();
        let [d0, d1, d2] = zf.dims();
        let mut data = Array4::<f32>::zeros((2, d0, d1, d2));
        data.index_axis_mut(Axis(0), 0).assign(&grid.mapv(|z| z.re / s));
        data.index_axis_mut(Axis(0), 1).assign(&grid.mapv(|z| z.im / s));
        let source = Volume::new(data)?.with_spacing(zf.spacing);
        if let Some(r) = &reference {
            r.expect_same_shape(zf, "reference and acquisition")?;
        }
        Ok(Subject {
            id: id.into(),
            source,
            target: reference.as_ref().map(|r| scaled(r, 1.0 / s)),
            reference,
            scale: s,
            acquisition: Some(acquisition),
        })
    }

    /// Retrospectively undersampled ground truth.
    pub fn undersampled(id: &str, truth: &Volume<f32>, r: f64, readout_axis: usize, mask_seed: u64) -> Result<Self> {
        if truth.channels() != 1 {
            return Err(Error::Dimension("reconstruction ground truth must have one channel".into()));
        }
        let dims = truth.dims();
        let (a, b) = match readout_axis {
            0 => (1, 2),
            1 => (0, 2),
            2 => (0, 1),
            _ => return Err(Error::Config(format!("readout axis {readout_axis} outside 0..3"))),
        };
        let mask = generate_vd_mask(dims[a], dims[b], r, mask_seed)?;
        let (kspace, zero_filled) = undersample(truth, &mask, readout_axis)?;
        Self::from_acquisition(id, Acquisition { kspace, zero_filled }, Some(truth.magnitude()))
    }

    /// Synthesis subject. Each source is divided by its declared maximum;
    /// the target (if given) by `target_scale`.
    pub fn synthesis(id: &str, sources: &[Volume<f32>], target: Option<&Volume<f32>>, target_scale: f32) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Config("synthesis needs at least one source".into()))?;
        if !(target_scale > 0.0 && target_scale.is_finite()) {
            return Err(Error::Config(format!("target scale must be positive, got {target_scale}")));
        }
        let mut parts = Vec::with_capacity(sources.len());
        for v in sources {
            v.expect_same_shape(first, "source contrasts")?;
            let hi = v.value_range.1;
            if !(hi > 0.0 && hi.is_finite()) {
                return Err(Error::Config(format!("subject `{id}`: source with non-positive maximum {hi}")));
            }
            parts.push(scaled(v, 1.0 / hi));
        }
        let refs: Vec<&Volume<f32>> = parts.iter().collect();
        let source = Volume::concat_channels(&refs)?;
        if let Some(t) = target {
            if t.channels() != 1 || t.dims() != first.dims() {
                return Err(Error::Dimension(format!("subject `{id}`: target shape does not match sources")));
            }
        }
        Ok(Subject {
            id: id.into(),
            source,
            target: target.map(|t| scaled(t, 1.0 / target_scale)),
            reference: target.cloned(),
            scale: target_scale,
            acquisition: None,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.source.dims()
    }

    /// PSNR of the zero-filled magnitude against the reference.
    pub fn zero_filled_psnr(&self) -> Option<Result<f64>> {
        let acq = self.acquisition.as_ref()?;
        let reference = self.reference.as_ref()?;
        Some(psnr(&acq.zero_filled.magnitude(), reference))
    }
}

/// Deterministic per-subject mask seed.
pub fn mask_seed(seed: u64, subject_index: usize) -> u64 {
    seed::derive(seed, &[seed::keys::MASK, subject_index as u64])
}

/// Loads and normalizes one manifest subject for `task`.
pub fn load_subject(manifest: &DatasetManifest, id: &str, task: &TaskSpec, seed: u64, target_scale: Option<f32>) -> Result<Subject> {
    match task {
        TaskSpec::Reconstruction {
            r,
            readout_axis,
            contrast,
            ..
        } => {
            let index = manifest
                .subjects
                .iter()
                .position(|s| s.id == id)
                .ok_or_else(|| Error::Config(format!("unknown subject `{id}`")))?;
            let truth = manifest.load_contrast(id, contrast)?;
            Subject::undersampled(id, &truth, *r, *readout_axis, mask_seed(seed, index))
        }
        TaskSpec::Synthesis { sources, target } => {
            let srcs = sources
                .iter()
                .map(|c| manifest.load_contrast(id, c))
                .collect::<Result<Vec<_>>>()?;
            let tgt = manifest.load_contrast(id, target)?;
            let scale = target_scale.unwrap_or(tgt.value_range.1);
            Subject::synthesis(id, &srcs, Some(&tgt), scale)
        }
    }
}

/// Training and validation subjects of one run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    /// Synthesis de-normalization factor (1 for reconstruction, where each
    /// subject carries its own).
    pub target_scale: f32,
}

impl Dataset {
    /// Loads the train and validation splits, honouring the `n_train` cap.
    pub fn load(manifest: &DatasetManifest, task: &TaskSpec, cfg: &PipelineConfig) -> Result<Self> {
        task.validate()?;
        let manifest = match cfg.train.n_train {
            Some(n) => manifest.clone().cap_train(n)?,
            None => manifest.clone(),
        };
        if manifest.splits.train.is_empty() {
            return Err(Error::EmptyDataset("the manifest has no training subjects".into()));
        }
        let target_scale = match task {
            TaskSpec::Synthesis { target, .. } => {
                let first = &manifest.splits.train[0];
                let scale = manifest.load_contrast(first, target)?.value_range.1;
                Some(scale)
            }
            TaskSpec::Reconstruction { .. } => None,
        };
        let load = |ids: &[String]| -> Result<Vec<Subject>> {
            ids.iter().map(|id| load_subject(&manifest, id, task, cfg.seed, target_scale)).collect()
        };
        Ok(Dataset {
            train: load(&manifest.splits.train)?,
            val: load(&manifest.splits.val)?,
            target_scale: target_scale.unwrap_or(1.0),
        })
    }
}

/// A stage's recovered volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Normalized magnitude, the prior handed to the next stage.
    pub normalized: Volume<f32>,
    /// Data-consistent complex image (reconstruction only).
    pub complex: Option<Volume<Complex32>>,
    pub scale: f32,
    /// Negative magnitudes clamped during phase restoration.
    pub clamped: usize,
}

impl Estimate {
    /// The estimate in original units.
    pub fn denormalized(&self) -> Volume<f32> {
        match &self.complex {
            Some(c) => c.magnitude(),
            None => scaled(&self.normalized, self.scale),
        }
    }
}

/// Input tensor of every cross-section along `o`.
fn stage_inputs(
    source: &SliceStack<f32>,
    prior: Option<&SliceStack<f32>>,
    n_c: usize,
) -> Result<Vec<Tensor<f32>>> {
    (0..source.len())
        .map(|i| {
            let x = Tensor::from_array(&source.neighborhood(i, n_c)?);
            match prior {
                Some(p) => Tensor::concat(&[&x, &Tensor::from_array(&p.slices[i])]),
                None => Ok(x),
            }
        })
        .collect()
}

fn require_prior<'a>(n: usize, prior: Option<&'a Volume<f32>>, dims: [usize; 3]) -> Result<Option<&'a Volume<f32>>> {
    if n == 1 {
        return Ok(None);
    }
    let p = prior.ok_or(Error::MissingPrior(n))?;
    if p.channels() != 1 || p.dims() != dims {
        return Err(Error::Dimension(format!(
            "prior of shape {:?} for a subject of dims {dims:?}",
            p.data.shape()
        )));
    }
    Ok(Some(p))
}

/// Cross-sections whose normalized input never exceeds this level carry no
/// signal. They are left out of training (on constant inputs every instance
/// normalization divides by `sqrt(eps)` and gradients overflow) and map to an
/// empty estimate, or to the prior for residual stages, at inference.
pub const EMPTY_SLICE_LEVEL: f32 = 1e-3;

fn is_empty_slice(values: &[f32]) -> bool {
    values.iter().all(|v| v.abs() <= EMPTY_SLICE_LEVEL)
}

/// Runs a stage generator over every cross-section of `subject` and
/// assembles the recovered volume. Stage 1 ignores `prior`.
pub fn run_generator(
    gen: &Network<f32>,
    task: &TaskSpec,
    n: usize,
    orientation: Orientation,
    n_c: usize,
    subject: &Subject,
    prior: Option<&Volume<f32>>,
) -> Result<Estimate> {
    let prior = require_prior(n, prior, subject.dims())?;
    let source = split_volume(&subject.source, orientation);
    let prior_stack = prior.map(|p| split_volume(p, orientation));
    let inputs = stage_inputs(&source, prior_stack.as_ref(), n_c)?;
    let residual = n >= 2 && task.residual_stages();
    let mut slices = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let mut y = if is_empty_slice(&x.data) {
            let s = x.shape();
            Array3::zeros((gen.spec().out_channels(), s[1], s[2]))
        } else {
            gen.forward(x)?.to_array()
        };
        if residual {
            let base = &prior_stack.as_ref().expect("prior present for n >= 2").slices[i];
            y.zip_mut_with(base, |v, &b| *v = (*v + b).clamp(-1.0, 1.0));
        }
        slices.push(y);
    }
    let assembled = stack_to_volume(&SliceStack::new(slices, orientation, subject.dims()))?.with_spacing(subject.source.spacing);
    match &subject.acquisition {
        Some(acq) => {
            let magnitude = scaled(&assembled, subject.scale);
            let (restored, clamped) = phase_restore(&magnitude, &acq.zero_filled)?;
            let dc = data_consistency(&restored, &acq.kspace)?;
            let normalized = scaled(&dc.magnitude(), 1.0 / subject.scale);
            Ok(Estimate {
                normalized,
                complex: Some(dc),
                scale: subject.scale,
                clamped,
            })
        }
        None => Ok(Estimate {
            normalized: assembled,
            complex: None,
            scale: subject.scale,
            clamped: 0,
        }),
    }
}

/// A trained, frozen stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStage {
    pub n: usize,
    pub orientation: Orientation,
    pub gen: Network<f32>,
}

pub fn apply_stage(
    stage: &TrainedStage,
    task: &TaskSpec,
    n_c: usize,
    subject: &Subject,
    prior: Option<&Volume<f32>>,
) -> Result<Estimate> {
    run_generator(&stage.gen, task, stage.n, stage.orientation, n_c, subject, prior)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub task: TaskSpec,
    pub order: ProgressionOrder,
    pub config: PipelineConfig,
    pub stages: Vec<TrainedStage>,
    pub target_scale: f32,
}

impl Pipeline {
    /// Estimates after each stage, in order.
    pub fn infer_stages(&self, subject: &Subject) -> Result<Vec<Estimate>> {
        if self.stages.len() != 3 {
            return Err(Error::Config(format!(
                "pipeline has {} trained stages; 3 are required",
                self.stages.len()
            )));
        }
        let mut out: Vec<Estimate> = Vec::with_capacity(3);
        for stage in &self.stages {
            let prior = out.last().map(|e| &e.normalized);
            out.push(apply_stage(stage, &self.task, self.config.n_c, subject, prior)?);
        }
        Ok(out)
    }
}

/// Final estimate of a trained pipeline.
pub fn infer(pipeline: &Pipeline, subject: &Subject) -> Result<Estimate> {
    Ok(pipeline.infer_stages(subject)?.pop().expect("three stages"))
}

/// Validation metrics of one set of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
}

fn score(subjects: &[Subject], estimates: &[Estimate]) -> Result<Option<ValMetrics>> {
    let mut p = Vec::new();
    let mut s = Vec::new();
    for (subj, est) in subjects.iter().zip(estimates) {
        let Some(reference) = &subj.reference else { continue };
        let pred = est.denormalized();
        p.push(psnr(&pred, reference)?);
        s.push(ssim(&pred, reference)?);
    }
    if p.is_empty() {
        return Ok(None);
    }
    Ok(Some(ValMetrics {
        psnr: MeanStd::of(&p),
        ssim: MeanStd::of(&s),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub n: usize,
    pub orientation: Orientation,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_psnr: Option<f64>,
    pub final_val_psnr: Option<f64>,
    /// Metrics of the materialized (and, for reconstruction, data-consistent)
    /// stage output on the validation split.
    pub val: Option<ValMetrics>,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub pipeline: Pipeline,
    pub reports: Vec<StageReport>,
    /// Zero-filled baseline on the validation split (reconstruction only).
    pub zero_filled_val: Option<MeanStd>,
    /// Generators at their best validation epoch.
    pub best_gens: Vec<Option<Network<f32>>>,
}

impl TrainedPipeline {
    pub fn final_val(&self) -> Option<ValMetrics> {
        self.reports.last().and_then(|r| r.val)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct StageRun {
    stage: TrainedStage,
    report: StageReport,
    best: Option<Network<f32>>,
}

fn stage_file(n: usize, o: Orientation, suffix: &str) -> String {
    format!("stage{n}_{}{suffix}", o.tag())
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    data: &Dataset,
    task: &TaskSpec,
    cfg: &PipelineConfig,
    n: usize,
    orientation: Orientation,
    train_priors: &[Option<Volume<f32>>],
    val_priors: &[Option<Volume<f32>>],
    out: Option<&Path>,
) -> Result<StageRun> {
    let in_ch = stage_input_channels(task, n, cfg.n_c)?;
    let stage_seed = cfg.stage_seed(n);
    let gen_cfg = GeneratorConfig::new(in_ch).scaled(cfg.n_f);
    let disc_cfg = DiscriminatorConfig::new(in_ch + 1).scaled(cfg.n_f);
    let gen = build_generator(&gen_cfg, seed::derive(stage_seed, &[seed::keys::GEN_INIT]))?;
    let disc = build_discriminator(&disc_cfg, seed::derive(stage_seed, &[seed::keys::DISC_INIT]))?;

    let residual = n >= 2 && task.residual_stages();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (subj, prior) in data.train.iter().zip(train_priors) {
        let target = subj
            .target
            .as_ref()
            .ok_or_else(|| Error::EmptyDataset(format!("training subject `{}` has no target", subj.id)))?;
        let prior = require_prior(n, prior.as_ref(), subj.dims())?;
        let source = split_volume(&subj.source, orientation);
        let prior_stack = prior.map(|p| split_volume(p, orientation));
        let targets = split_volume(target, orientation);
        let inputs = stage_inputs(&source, prior_stack.as_ref(), cfg.n_c)?;
        for (i, x) in inputs.into_iter().enumerate() {
            if is_empty_slice(&x.data) {
                skipped += 1;
                continue;
            }
            let mut pair = TrainPair::new(x, Tensor::from_array(&targets.slices[i]));
            if residual {
                pair = pair.with_base(Tensor::from_array(&prior_stack.as_ref().expect("prior").slices[i]));
            }
            pairs.push(pair);
        }
    }

    if pairs.is_empty() {
        return Err(Error::EmptyDataset("every training cross-section is empty".into()));
    }
    if skipped > 0 {
        log::info!("stage {n} ({orientation}): skipped {skipped} empty cross-sections");
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = stage_seed;
    let has_val = data.val.iter().any(|s| s.reference.is_some());
    let mut validate = |g: &Network<f32>| -> Result<f64> {
        let mut values = Vec::new();
        for (subj, prior) in data.val.iter().zip(val_priors) {
            let Some(reference) = &subj.reference else { continue };
            let est = run_generator(g, task, n, orientation, cfg.n_c, subj, prior.as_ref())?;
            values.push(psnr(&est.denormalized(), reference)?);
        }
        Ok(MeanStd::of(&values).mean)
    };
    let mut history_file = match out {
        Some(dir) => {
            let path = dir.join(stage_file(n, orientation, ".history.ndjson"));
            Some(BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    log::info!("stage {n} ({orientation}): {} slice pairs, {} generator weights", pairs.len(), gen.param_count());
    let outcome = train_2d_model(
        &pairs,
        gen,
        disc,
        &train_cfg,
        &cfg.loss,
        if has_val { Some(&mut validate) } else { None },
        history_file.as_mut().map(|w| w as &mut dyn std::io::Write),
    )?;
    drop(history_file);

    let final_val_psnr = outcome.final_val_psnr();
    let mut gen = outcome.gen;
    gen.freeze();
    let bytes = checkpoint_bytes(&gen);
    let best = outcome.best.map(|b| {
        let mut g = b.gen;
        g.freeze();
        (b.epoch, b.val_psnr, g)
    });
    if let Some(dir) = out {
        let path = dir.join(stage_file(n, orientation, ".ckpt"));
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        if let Some((_, _, g)) = &best {
            let path = dir.join(stage_file(n, orientation, ".best.ckpt"));
            fs::write(&path, checkpoint_bytes(g)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let report = StageReport {
        n,
        orientation,
        final_val_psnr,
        history: outcome.history,
        best_epoch: best.as_ref().map(|b| b.0),
        best_val_psnr: best.as_ref().map(|b| b.1),
        val: None,
        checkpoint_sha256: sha256_hex(&bytes),
    };
    Ok(StageRun {
        stage: TrainedStage { n, orientation, gen },
        report,
        best: best.map(|b| b.2),
    })
}

fn zero_filled_val(data: &Dataset) -> Result<Option<MeanStd>> {
    let values = data
        .val
        .iter()
        .filter_map(Subject::zero_filled_psnr)
        .collect::<Result<Vec<f64>>>()?;
    Ok((!values.is_empty()).then(|| MeanStd::of(&values)))
}

/// Stage-by-stage training of a cascade. Each call to
/// [`Cascade::train_next`] trains, freezes and materializes one stage.
pub struct Cascade<'a> {
    data: &'a Dataset,
    order: ProgressionOrder,
    task: TaskSpec,
    cfg: PipelineConfig,
    out: Option<PathBuf>,
    train_priors: Vec<Option<Volume<f32>>>,
    val_priors: Vec<Option<Volume<f32>>>,
    stages: Vec<TrainedStage>,
    reports: Vec<StageReport>,
    best_gens: Vec<Option<Network<f32>>>,
}

impl<'a> Cascade<'a> {
    pub fn new(
        data: &'a Dataset,
        order: ProgressionOrder,
        task: &TaskSpec,
        cfg: &PipelineConfig,
        out: Option<&Path>,
    ) -> Result<Self> {
        task.validate()?;
        cfg.validate()?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Cascade {
            data,
            order,
            task: task.clone(),
            cfg: cfg.clone(),
            out: out.map(Path::to_path_buf),
            train_priors: vec![None; data.train.len()],
            val_priors: vec![None; data.val.len()],
            stages: Vec::with_capacity(3),
            reports: Vec::with_capacity(3),
            best_gens: Vec::with_capacity(3),
        })
    }

    /// Stages trained so far.
    pub fn stages(&self) -> &[TrainedStage] {
        &self.stages
    }

    pub fn reports(&self) -> &[StageReport] {
        &self.reports
    }

    /// Current priors of the training subjects (outputs of the last stage).
    pub fn train_priors(&self) -> &[Option<Volume<f32>>] {
        &self.train_priors
    }

    pub fn is_complete(&self) -> bool {
        self.stages.len() == 3
    }

    pub fn train_next(&mut self) -> Result<&StageReport> {
        if self.is_complete() {
            return Err(Error::Config("all three stages are already trained".into()));
        }
        let n = self.stages.len() + 1;
        let o = self.order.stage(n);
        let (data, task, cfg) = (self.data, &self.task, &self.cfg);
        let mut run = train_stage(data, task, cfg, n, o, &self.train_priors, &self.val_priors, self.out.as_deref())?;
        let materialize = |subjects: &[Subject], priors: &[Option<Volume<f32>>]| -> Result<Vec<Estimate>> {
            subjects
                .iter()
                .zip(priors)
                .map(|(s, p)| apply_stage(&run.stage, task, cfg.n_c, s, p.as_ref()))
                .collect()
        };
        let train_est = materialize(&data.train, &self.train_priors)?;
        let val_est = materialize(&data.val, &self.val_priors)?;
        run.report.val = score(&data.val, &val_est)?;
        if let Some(v) = &run.report.val {
            log::info!("stage {n} ({o}) validation PSNR {}", v.psnr);
        }
        self.train_priors = train_est.into_iter().map(|e| Some(e.normalized)).collect();
        self.val_priors = val_est.into_iter().map(|e| Some(e.normalized)).collect();
        if let (Some(dir), true) = (&self.out, n < 3) {
            let dir = dir.join(PRIORS_DIR).join(format!("stage{n}"));
            self.train_priors = persist_priors(&dir, &data.train, &self.train_priors)?;
            self.val_priors = persist_priors(&dir, &data.val, &self.val_priors)?;
        }
        self.stages.push(run.stage);
        self.reports.push(run.report);
        self.best_gens.push(run.best);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Trains any remaining stages and assembles the pipeline.
    pub fn finish(mut self) -> Result<TrainedPipeline> {
        while !self.is_complete() {
            self.train_next()?;
        }
        let trained = TrainedPipeline {
            pipeline: Pipeline {
                task: self.task,
                order: self.order,
                config: self.cfg,
                stages: self.stages,
                target_scale: self.data.target_scale,
            },
            reports: self.reports,
            zero_filled_val: zero_filled_val(self.data)?,
            best_gens: self.best_gens,
        };
        if let Some(dir) = &self.out {
            save_pipeline_manifest(&trained, dir, None)?;
        }
        Ok(trained)
    }
}

/// Subdirectory of a pipeline directory holding materialized priors.
pub const PRIORS_DIR: &str = "priors";

/// Writes each prior to `dir/<id>.vol` and returns the volumes read back, so
/// the next stage trains on exactly what is on disk.
fn persist_priors(dir: &Path, subjects: &[Subject], priors: &[Option<Volume<f32>>]) -> Result<Vec<Option<Volume<f32>>>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    subjects
        .iter()
        .zip(priors)
        .map(|(s, p)| match p {
            Some(v) => {
                let path = dir.join(format!("{}.vol", s.id));
                save_volume(v, &path)?;
                load_volume(&path).map(Some)
            }
            None => Ok(None),
        })
        .collect()
}

/// Trains the three stages in `order`. With `out`, stage checkpoints,
/// histories and `pipeline.json` are written there.
pub fn train_provogan(
    data: &Dataset,
    order: ProgressionOrder,
    task: &TaskSpec,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<TrainedPipeline> {
    Cascade::new(data, order, task, cfg, out)?.finish()
}

/// A single-orientation model: stage 1 of the cascade on its own.
#[derive(Debug, Clone)]
pub struct TrainedBaseline {
    pub stage: TrainedStage,
    pub report: StageReport,
    pub zero_filled_val: Option<MeanStd>,
}

pub fn train_sgan_baseline(
    data: &Dataset,
    orientation: Orientation,
    task: &TaskSpec,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<TrainedBaseline> {
    task.validate()?;
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let none_train = vec![None; data.train.len()];
    let none_val = vec![None; data.val.len()];
    let mut run = train_stage(data, task, cfg, 1, orientation, &none_train, &none_val, out)?;
    let val_est = data
        .val
        .iter()
        .map(|s| apply_stage(&run.stage, task, cfg.n_c, s, None))
        .collect::<Result<Vec<_>>>()?;
    run.report.val = score(&data.val, &val_est)?;
    let baseline = TrainedBaseline {
        stage: run.stage,
        report: run.report,
        zero_filled_val: zero_filled_val(data)?,
    };
    if let Some(dir) = out {
        save_baseline_manifest(&baseline, task, cfg, dir, None)?;
    }
    Ok(baseline)
}

pub const BASELINE_FILE: &str = "sgan.json";

/// Writes `sgan.json` describing a trained baseline in `dir`.
pub fn save_baseline_manifest(
    baseline: &TrainedBaseline,
    task: &TaskSpec,
    cfg: &PipelineConfig,
    dir: &Path,
    run_config: Option<serde_json::Value>,
) -> Result<PathBuf> {
    let s = &baseline.stage;
    let file = stage_file(1, s.orientation, ".ckpt");
    let bytes = checkpoint_bytes(&s.gen);
    let ck = dir.join(&file);
    if !ck.exists() {
        fs::write(&ck, &bytes).map_err(|e| Error::io(&ck, e))?;
    }
    let mut manifest = serde_json::json!({
        "version": PIPELINE_VERSION,
        "kind": "sgan",
        "task": task,
        "orientation": s.orientation,
        "config": cfg,
        "checkpoint": file,
        "sha256": sha256_hex(&bytes),
        "fingerprint": s.gen.fingerprint(),
        "params": s.gen.param_count(),
        "report": baseline.report,
        "zero_filled_val": baseline.zero_filled_val,
    });
    if let Some(rc) = run_config {
        manifest["run_config"] = rc;
    }
    let path = dir.join(BASELINE_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub const PIPELINE_VERSION: u32 = 1;
pub const PIPELINE_FILE: &str = "pipeline.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub n: usize,
    pub orientation: Orientation,
    pub checkpoint: String,
    pub sha256: String,
    pub fingerprint: String,
    pub in_channels: usize,
    pub params: usize,
}

/// Contents of `pipeline.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: u32,
    pub task: TaskSpec,
    pub order: ProgressionOrder,
    pub config: PipelineConfig,
    pub target_scale: f32,
    pub stages: Vec<StageEntry>,
    pub reports: Vec<StageReport>,
    pub zero_filled_val: Option<MeanStd>,
    /// Caller-supplied context such as the resolved command-line config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// Writes stage checkpoints (if missing) and `pipeline.json` into `dir`.
pub fn save_pipeline_manifest(trained: &TrainedPipeline, dir: &Path, run_config: Option<serde_json::Value>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &trained.pipeline;
    let mut stages = Vec::new();
    for s in &p.stages {
        let file = stage_file(s.n, s.orientation, ".ckpt");
        let bytes = checkpoint_bytes(&s.gen);
        let path = dir.join(&file);
        if !path.exists() {
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        stages.push(StageEntry {
            n: s.n,
            orientation: s.orientation,
            checkpoint: file,
            sha256: sha256_hex(&bytes),
            fingerprint: s.gen.fingerprint(),
            in_channels: s.gen.in_channels(),
            params: s.gen.param_count(),
        });
    }
    let manifest = PipelineManifest {
        version: PIPELINE_VERSION,
        task: p.task.clone(),
        order: p.order,
        config: p.config.clone(),
        target_scale: p.target_scale,
        stages,
        reports: trained.reports.clone(),
        zero_filled_val: trained.zero_filled_val,
        run_config,
    };
    let path = dir.join(PIPELINE_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a pipeline directory, verifying every checkpoint hash.
pub fn load_pipeline(dir: &Path) -> Result<(Pipeline, PipelineManifest)> {
    let path = dir.join(PIPELINE_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: PipelineManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, "<pipeline>", e.to_string()))?;
    if m.version != PIPELINE_VERSION {
        return Err(Error::Version {
            path,
            found: m.version as u64,
            expected: PIPELINE_VERSION as u64,
        });
    }
    let mut stages = Vec::new();
    for e in &m.stages {
        let ck = dir.join(&e.checkpoint);
        let bytes = fs::read(&ck).map_err(|err| Error::io(&ck, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::format(&ck, "sha256", "checkpoint does not match pipeline.json"));
        }
        let gen = load_checkpoint(&ck)?;
        if !gen.is_frozen() {
            return Err(Error::format(&ck, "frozen", "stage checkpoints must be frozen"));
        }
        stages.push(TrainedStage {
            n: e.n,
            orientation: e.orientation,
            gen,
        });
    }
    let pipeline = Pipeline {
        task: m.task.clone(),
        order: m.order,
        config: m.config.clone(),
        stages,
        target_scale: m.target_scale,
    };
    Ok((pipeline, m))
}

/// Result of training one progression order.
#[derive(Debug, Clone)]
pub struct OrderRun<T> {
    pub val_psnr: MeanStd,
    pub val_ssim: Option<MeanStd>,
    pub output: T,
}

/// Trains and scores a pipeline for a given order.
pub trait OrderTrainer: Sync {
    type Output: Send;
    fn run(&self, order: ProgressionOrder) -> Result<OrderRun<Self::Output>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: ProgressionOrder,
    pub psnr: MeanStd,
    pub ssim: Option<MeanStd>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct OrderSearch<T> {
    /// One row per permutation, in canonical order.
    pub rows: Vec<OrderRow>,
    pub best: ProgressionOrder,
    pub outputs: Vec<T>,
}

impl<T> OrderSearch<T> {
    pub fn best_index(&self) -> usize {
        self.rows.iter().position(|r| r.best).expect("one best row")
    }

    /// Aligned text table: one row per order, best marked with `*`.
    pub fn table_text(&self, task_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Validation performance of all progression orders ({task_label})");
        let _ = writeln!(s, "{:<14}{:>18}{:>18}", "Order", "PSNR (dB)", "SSIM (%)");
        for r in &self.rows {
            let ssim = r
                .ssim
                .map(|m| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<14}{:>18}{:>18}{}",
                r.order.to_string(),
                format!("{:.2} ± {:.2}", r.psnr.mean, r.psnr.std),
                ssim,
                if r.best { "  *" } else { "" }
            );
        }
        s
    }

    pub fn table_json(&self) -> serde_json::Value {
        serde_json::json!({ "rows": self.rows, "best": self.best })
    }
}

/// Trains every permutation and picks the highest mean validation PSNR.
/// Ties go to the earlier order in canonical enumeration. `parallel > 1`
/// runs up to that many orders concurrently.
pub fn order_search<T: OrderTrainer>(trainer: &T, parallel: usize) -> Result<OrderSearch<T::Output>> {
    let orders = enumerate_orders();
    let runs: Vec<Result<OrderRun<T::Output>>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| orders.par_iter().map(|&o| trainer.run(o)).collect())
    } else {
        orders.iter().map(|&o| trainer.run(o)).collect()
    };
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let key = |r: &OrderRun<T::Output>| if r.val_psnr.mean.is_nan() { f64::NEG_INFINITY } else { r.val_psnr.mean };
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if key(r) > key(&runs[best]) {
            best = i;
        }
    }
    let rows = orders
        .iter()
        .zip(&runs)
        .enumerate()
        .map(|(i, (&order, r))| OrderRow {
            order,
            psnr: r.val_psnr,
            ssim: r.val_ssim,
            best: i == best,
        })
        .collect();
    Ok(OrderSearch {
        rows,
        best: orders[best],
        outputs: runs.into_iter().map(|r| r.output).collect(),
    })
}

/// [`OrderTrainer`] that trains full cascades on a dataset.
pub struct CascadeTrainer<'a> {
    pub data: &'a Dataset,
    pub task: TaskSpec,
    pub config: PipelineConfig,
    /// Each order writes to `out/<code>` when set.
    pub out: Option<PathBuf>,
}

impl OrderTrainer for CascadeTrainer<'_> {
    type Output = TrainedPipeline;

    fn run(&self, order: ProgressionOrder) -> Result<OrderRun<TrainedPipeline>> {
        let dir = self.out.as_ref().map(|d| d.join(order.code()));
        let trained = train_provogan(self.data, order, &self.task, &self.config, dir.as_deref())?;
        let val = trained
            .final_val()
            .ok_or_else(|| Error::EmptyDataset("order search needs validation subjects with references".into()))?;
        Ok(OrderRun {
            val_psnr: val.psnr,
            val_ssim: Some(val.ssim),
            output: trained,
        })
    }
}
