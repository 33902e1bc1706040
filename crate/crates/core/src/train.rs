//! Pretraining grids, early-stopped training, k-frame fine-tuning rounds and
//! matched-condition benchmarks.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, MaskTriple, SubjectId, VideoClip};
use crate::eval::dice;
use crate::grid::Image;
use crate::nn::{bce_loss, Adam, Architecture, ModelConfig, ModelError, SegModel, NORM_MOMENTUM};
use crate::rasterize::{masks_from_contours, resize_frame, resize_masks, RasterError};
use crate::seeds::{derive_seed, rng_for, tag};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence {
        epoch: usize,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, TrainError> {
    Err(TrainError::Config(msg.into()))
}

/// Where a labeled frame came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub subject: String,
    pub video_index: u32,
    pub frame_index: u32,
}

/// A frame with its rasterized ground truth, at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub image: Image,
    pub masks: MaskTriple,
    pub source: Option<FrameRef>,
}

impl LabeledFrame {
    pub fn new(image: Image, masks: MaskTriple) -> Self {
        Self {
            image,
            masks,
            source: None,
        }
    }
}

/// Rasterize every annotation of a clip at the clip's resolution.
pub fn labeled_frames(clip: &VideoClip) -> Result<Vec<LabeledFrame>, TrainError> {
    clip.frames
        .iter()
        .zip(&clip.annotations)
        .map(|(f, a)| {
            let (w, h) = f.pixels.dims();
            Ok(LabeledFrame {
                image: f.pixels.clone(),
                masks: masks_from_contours(a, w, h)?,
                source: Some(FrameRef {
                    subject: f.subject.as_str().to_string(),
                    video_index: f.video_index,
                    frame_index: f.frame_index,
                }),
            })
        })
        .collect()
}

fn clip_of<'a>(
    corpus: &'a Corpus,
    subject: &SubjectId,
    video: u32,
) -> Result<&'a VideoClip, TrainError> {
    corpus
        .clip(subject.as_str(), video)
        .ok_or_else(|| TrainError::Config(format!("subject {subject} has no video {video}")))
}

/// Frames and masks resized to model input dims: bilinear for frames,
/// nearest for masks.
pub fn to_model_dims(
    set: &[LabeledFrame],
    width: usize,
    height: usize,
) -> Result<(Vec<Image>, Vec<MaskTriple>), TrainError> {
    let mut frames = Vec::with_capacity(set.len());
    let mut masks = Vec::with_capacity(set.len());
    for f in set {
        frames.push(resize_frame(&f.image, width, height)?);
        masks.push(resize_masks(&f.masks, width, height)?);
    }
    Ok((frames, masks))
}

/// Videos per subject used for training and validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitSpec {
    pub train_videos: u32,
    pub val_videos: u32,
}

impl SplitSpec {
    pub const TWO_ONE: SplitSpec = SplitSpec {
        train_videos: 2,
        val_videos: 1,
    };
    pub const FOUR_ONE: SplitSpec = SplitSpec {
        train_videos: 4,
        val_videos: 1,
    };
    pub const EIGHT_TWO: SplitSpec = SplitSpec {
        train_videos: 8,
        val_videos: 2,
    };
    pub const ALL: [SplitSpec; 3] = [Self::TWO_ONE, Self::FOUR_ONE, Self::EIGHT_TWO];

    pub fn name(&self) -> String {
        format!("{}:{}", self.train_videos, self.val_videos)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train_videos, self.val_videos)
    }
}

impl FromStr for SplitSpec {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| {
                TrainError::Config(format!("unknown split {s:?} (expected 2:1, 4:1 or 8:2)"))
            })
    }
}

impl Serialize for SplitSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for SplitSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

fn d_max_epochs() -> usize {
    30
}
fn d_patience() -> usize {
    5
}
fn d_min_delta() -> f64 {
    1e-4
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_min_delta")]
    pub min_delta: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: d_max_epochs(),
            patience: d_patience(),
            min_delta: d_min_delta(),
            learning_rate: d_lr(),
            batch_size: d_batch(),
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: learning rate 1e-4.
    pub fn adaptation() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return config_err("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return config_err("patience must be >= 1");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return config_err("learning_rate must be positive");
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return config_err("min_delta must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: [f64; 3],
}

/// One trainable thing driven by [`run_training`].
pub trait TrainingSession {
    type Snapshot;
    /// One pass over the training data; returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64, TrainError>;
    /// Validation loss and per-mask validation Dice.
    fn validate(&mut self) -> Result<(f64, [f64; 3]), TrainError>;
    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Debug, Clone)]
pub struct SessionOutcome<S> {
    pub best: S,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train with early stopping on validation loss.
///
/// The returned snapshot is from the epoch with the lowest validation loss.
/// Patience counts epochs since the last improvement of at least
/// `min_delta`; training stops when it reaches `patience` or after
/// `max_epochs`.
pub fn run_training<S: TrainingSession>(
    session: &mut S,
    config: &TrainConfig,
) -> Result<SessionOutcome<S::Snapshot>, TrainError> {
    config.validate()?;
    let mut history = Vec::new();
    let mut best: Option<(S::Snapshot, usize, f64)> = None;
    let mut reference = f64::INFINITY;
    let mut since = 0;
    for epoch in 1..=config.max_epochs {
        let train_loss = session.train_epoch(epoch)?;
        if !train_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, history });
        }
        let (val_loss, val_dice) = session.validate()?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, history });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((session.snapshot(), epoch, val_loss));
        }
        if val_loss < reference - config.min_delta {
            reference = val_loss;
            since = 0;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    let (best, best_epoch, _) = best.expect("at least one epoch ran");
    Ok(SessionOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Mini-batch Adam on a [`SegModel`], running statistics updated per step.
pub struct ModelSession {
    model: SegModel<f32>,
    optimizer: Adam,
    train: (Vec<Image>, Vec<MaskTriple>),
    val: (Vec<Image>, Vec<MaskTriple>),
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl ModelSession {
    pub fn new(
        model: SegModel<f32>,
        train: &[LabeledFrame],
        val: &[LabeledFrame],
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        if train.is_empty() || val.is_empty() {
            return config_err("train and validation sets must be non-empty");
        }
        let (w, h) = (model.config().input_width, model.config().input_height);
        let optimizer = Adam::new(config.learning_rate, model.parameter_count());
        Ok(Self {
            optimizer,
            train: to_model_dims(train, w, h)?,
            val: to_model_dims(val, w, h)?,
            batch_size: config.batch_size,
            rng: rng_for(&[tag("train-shuffle"), config.seed]),
            model,
        })
    }
}

impl TrainingSession for ModelSession {
    type Snapshot = SegModel<f32>;

    fn train_epoch(&mut self, _epoch: usize) -> Result<f64, TrainError> {
        let n = self.train.0.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in order.chunks(self.batch_size) {
            let frames: Vec<Image> = idx.iter().map(|&i| self.train.0[i].clone()).collect();
            let masks: Vec<MaskTriple> = idx.iter().map(|&i| self.train.1[i].clone()).collect();
            let pass = self.model.train_pass(&frames, &masks)?;
            if !pass.loss.is_finite() {
                return Ok(f64::NAN);
            }
            total += pass.loss * idx.len() as f64;
            self.optimizer
                .step(self.model.params_mut(), &pass.grads.data);
            self.model.update_running_stats(&pass.stats, NORM_MOMENTUM);
        }
        Ok(total / n as f64)
    }

    fn validate(&mut self) -> Result<(f64, [f64; 3]), TrainError> {
        let preds = self.model.forward(&self.val.0)?;
        let loss = bce_loss(&preds, &self.val.1)?;
        let mut d = [0.0; 3];
        for (p, t) in preds.iter().zip(&self.val.1) {
            let m = p.threshold();
            for (slot, (a, b)) in d.iter_mut().zip(m.as_array().into_iter().zip(t.as_array())) {
                *slot += dice(a, b).expect("same dims");
            }
        }
        let n = preds.len() as f64;
        Ok((loss, d.map(|v| v / n)))
    }

    fn snapshot(&self) -> SegModel<f32> {
        self.model.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Train `model` on `train` with early stopping on `val`; returns the
/// best-validation weights and the per-epoch history.
pub fn train_model(
    model: SegModel<f32>,
    train: &[LabeledFrame],
    val: &[LabeledFrame],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut session = ModelSession::new(model, train, val, config)?;
    let out = run_training(&mut session, config)?;
    Ok(TrainOutcome {
        model: out.best,
        best_epoch: out.best_epoch,
        history: out.history,
    })
}

/// Per subject: videos `1..=train_videos` for training, the next
/// `val_videos` for validation.
pub fn make_group_splits(
    group: &[SubjectId],
    split: SplitSpec,
    corpus: &Corpus,
) -> Result<(Vec<LabeledFrame>, Vec<LabeledFrame>), TrainError> {
    if group.is_empty() {
        return config_err("empty subject group");
    }
    let need = split.train_videos + split.val_videos;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in group {
        let sv = corpus
            .subject(s.as_str())
            .ok_or_else(|| TrainError::Config(format!("subject {s} not in corpus")))?;
        if (sv.videos.len() as u32) < need {
            return config_err(format!(
                "subject {s} has {} videos; split {split} needs {need}",
                sv.videos.len()
            ));
        }
        for v in 1..=need {
            let frames = labeled_frames(clip_of(corpus, s, v)?)?;
            if v <= split.train_videos {
                train.extend(frames);
            } else {
                val.extend(frames);
            }
        }
    }
    Ok((train, val))
}

/// Registry name of a base model: subject numbers concatenated per prefix
/// (prefixes and numbers sorted), then `_` and the training videos per
/// subject, e.g. `F12M12_4`.
pub fn base_model_name(group: &[SubjectId], split: SplitSpec) -> String {
    let mut by_prefix: std::collections::BTreeMap<&str, Vec<&str>> =
        std::collections::BTreeMap::new();
    for s in group {
        by_prefix.entry(s.prefix()).or_default().push(s.number());
    }
    let mut name = String::new();
    for (prefix, mut numbers) in by_prefix {
        numbers.sort_by_key(|n| (n.len(), n.to_string()));
        numbers.dedup();
        name.push_str(prefix);
        for n in numbers {
            name.push_str(n);
        }
    }
    format!("{name}_{}", split.train_videos)
}

/// Frames sampled for fine-tuning round `round` with `k` frames: uniform
/// without replacement, seeded by `(base_seed, k, round)`, sorted.
pub fn select_frames(
    pool_len: usize,
    k: usize,
    base_seed: u64,
    round: u32,
) -> Result<Vec<usize>, TrainError> {
    if k == 0 || k > pool_len {
        return config_err(format!(
            "cannot sample {k} frames from a pool of {pool_len}"
        ));
    }
    let mut rng = rng_for(&[
        tag("frame-selection"),
        base_seed,
        k as u64,
        u64::from(round),
    ]);
    let mut picked = index::sample(&mut rng, pool_len, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct AdaptationSpec {
    pub frame_counts: Vec<usize>,
    pub rounds: u32,
    pub pool: Vec<LabeledFrame>,
    pub validation: Vec<LabeledFrame>,
    pub base_seed: u64,
}

impl AdaptationSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.frame_counts.is_empty() {
            return config_err("frame_counts must be non-empty");
        }
        if self.rounds == 0 {
            return config_err("rounds must be >= 1");
        }
        if self.validation.is_empty() {
            return config_err("validation set must be non-empty");
        }
        if let Some(&k) = self
            .frame_counts
            .iter()
            .find(|&&k| k == 0 || k > self.pool.len())
        {
            return config_err(format!(
                "frame count {k} exceeds pool of {} frames",
                self.pool.len()
            ));
        }
        Ok(())
    }

    /// All (k, round) jobs in execution order.
    pub fn jobs(&self) -> Vec<(usize, u32)> {
        self.frame_counts
            .iter()
            .flat_map(|&k| (1..=self.rounds).map(move |r| (k, r)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub k: usize,
    pub round: u32,
    pub selected: Vec<usize>,
    pub outcome: TrainOutcome,
}

/// Fine-tune one (k, round) job from `base`. Depends only on the base
/// weights, `spec` and the training config.
pub fn fine_tune_round(
    base: &SegModel<f32>,
    spec: &AdaptationSpec,
    config: &TrainConfig,
    k: usize,
    round: u32,
) -> Result<AdaptedModel, TrainError> {
    let selected = select_frames(spec.pool.len(), k, spec.base_seed, round)?;
    let train: Vec<LabeledFrame> = selected.iter().map(|&i| spec.pool[i].clone()).collect();
    let cfg = TrainConfig {
        batch_size: config.batch_size.min(k),
        seed: derive_seed(&[
            tag("fine-tune"),
            config.seed,
            spec.base_seed,
            k as u64,
            u64::from(round),
        ]),
        ..config.clone()
    };
    let outcome = train_model(base.clone(), &train, &spec.validation, &cfg)?;
    Ok(AdaptedModel {
        k,
        round,
        selected,
        outcome,
    })
}

/// Every (k, round) job, each starting from `base`.
pub fn fine_tune(
    base: &SegModel<f32>,
    spec: &AdaptationSpec,
    config: &TrainConfig,
) -> Result<Vec<AdaptedModel>, TrainError> {
    spec.validate()?;
    spec.jobs()
        .into_iter()
        .map(|(k, r)| fine_tune_round(base, spec, config, k, r))
        .collect()
}

/// How the matched-condition benchmark splits the test subjects' data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum MatchedRule {
    /// Whole videos per subject.
    Videos { train: Vec<u32>, val: Vec<u32> },
    /// Leading fraction of one video per subject for training (frame count
    /// rounded down), the rest for validation.
    LeadingFraction { video: u32, fraction: f64 },
}

impl MatchedRule {
    /// Videos 1–8 train and 9–10 validate for same-corpus data; the first
    /// 70% of video 1 for subsampled cross-corpus data.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        if corpus.profile.subsample_stride > 1 {
            MatchedRule::LeadingFraction {
                video: 1,
                fraction: 0.7,
            }
        } else {
            MatchedRule::Videos {
                train: (1..=8).collect(),
                val: vec![9, 10],
            }
        }
    }
}

/// Training and validation sets of the matched condition.
pub fn matched_split(
    corpus: &Corpus,
    subjects: &[SubjectId],
    rule: &MatchedRule,
) -> Result<(Vec<LabeledFrame>, Vec<LabeledFrame>), TrainError> {
    if subjects.is_empty() {
        return config_err("no test subjects");
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in subjects {
        match rule {
            MatchedRule::Videos { train: tv, val: vv } => {
                for &v in tv {
                    train.extend(labeled_frames(clip_of(corpus, s, v)?)?);
                }
                for &v in vv {
                    val.extend(labeled_frames(clip_of(corpus, s, v)?)?);
                }
            }
            MatchedRule::LeadingFraction { video, fraction } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return config_err("matched fraction must lie in (0, 1)");
                }
                let frames = labeled_frames(clip_of(corpus, s, *video)?)?;
                let n_train = (frames.len() as f64 * fraction).floor() as usize;
                if n_train == 0 || n_train == frames.len() {
                    return config_err(format!(
                        "video {video} of {s} has {} frames; cannot split {fraction}",
                        frames.len()
                    ));
                }
                let mut frames = frames;
                val.extend(frames.split_off(n_train));
                train.extend(frames);
            }
        }
    }
    Ok((train, val))
}

/// Train the matched-condition benchmark on the test subjects' own data.
pub fn matched_condition(
    corpus: &Corpus,
    subjects: &[SubjectId],
    rule: &MatchedRule,
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (train, val) = matched_split(corpus, subjects, rule)?;
    train_model(SegModel::new(model)?, &train, &val, config)
}

/// Model hyperparameters shared by every model of an experiment; input dims
/// are filled in per corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTemplate {
    #[serde(default = "default_template_stages")]
    pub stages: usize,
    #[serde(default = "default_template_base")]
    pub base_channels: usize,
    #[serde(default)]
    pub auto_pad: bool,
}

fn default_template_stages() -> usize {
    3
}
fn default_template_base() -> usize {
    16
}

impl Default for ModelTemplate {
    fn default() -> Self {
        Self {
            stages: default_template_stages(),
            base_channels: default_template_base(),
            auto_pad: false,
        }
    }
}

impl ModelTemplate {
    pub fn config(
        &self,
        variant: Architecture,
        width: usize,
        height: usize,
        seed: u64,
    ) -> ModelConfig {
        ModelConfig {
            auto_pad: self.auto_pad,
            ..ModelConfig::new(variant, width, height)
                .with_stages(self.stages)
                .with_base_channels(self.base_channels)
                .with_seed(seed)
        }
    }
}

/// One base model of a pretraining grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridJob {
    pub name: String,
    pub architecture: Architecture,
    pub group: Vec<SubjectId>,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl GridJob {
    /// Hash of everything that determines this job's result.
    pub fn job_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let doc = serde_json::json!({
            "model": self.model,
            "train": self.train,
            "group": self.group,
            "split": self.split,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

/// Jobs of a pretraining grid: every architecture × group × split, named
/// per [`base_model_name`]. Model seeds derive from `seed`, the
/// architecture and the name.
pub fn grid_jobs(
    corpus: &Corpus,
    groups: &[Vec<SubjectId>],
    splits: &[SplitSpec],
    architectures: &[Architecture],
    template: &ModelTemplate,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<GridJob>, TrainError> {
    if groups.is_empty() || splits.is_empty() || architectures.is_empty() {
        return config_err("grid needs at least one group, split and architecture");
    }
    let (w, h) = (corpus.profile.frame_width, corpus.profile.frame_height);
    let mut jobs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &arch in architectures {
        for group in groups {
            for &split in splits {
                let name = base_model_name(group, split);
                if !seen.insert((arch, name.clone())) {
                    return config_err(format!("duplicate grid entry {name} ({arch})"));
                }
                let job_seed =
                    derive_seed(&[tag("base-model"), seed, tag(arch.as_str()), tag(&name)]);
                let model = template.config(arch, w, h, job_seed);
                model.validate()?;
                jobs.push(GridJob {
                    name,
                    architecture: arch,
                    group: group.clone(),
                    split,
                    model,
                    train: TrainConfig {
                        seed: job_seed,
                        ..config.clone()
                    },
                });
            }
        }
    }
    Ok(jobs)
}

/// Train one grid job.
pub fn run_grid_job(corpus: &Corpus, job: &GridJob) -> Result<TrainOutcome, TrainError> {
    let (train, val) = make_group_splits(&job.group, job.split, corpus)?;
    train_model(SegModel::new(job.model.clone())?, &train, &val, &job.train)
}
