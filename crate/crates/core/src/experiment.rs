//! Config-driven runners behind the command-line tool.
//!
//! One JSON file describes a whole experiment (corpora, grid, adaptation,
//! matched condition and every seed); relative paths resolve against the
//! file's directory. Outputs land under `output`:
//!
//! ```text
//! <output>/registry/registry.json        base models
//! <output>/registry/checkpoints/...
//! <output>/adapted/<arch>/<name>/k<k>_r<round>.bin
//! <output>/records.csv                   adapted (and base) metrics
//! <output>/matched.csv                   matched-condition metrics
//! <output>/report/                       charts and aggregates
//! ```
//!
//! `ATBSEG_CACHE`, when set, replaces `<output>/adapted` as the directory for
//! adapted checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, Corpus, SubjectId};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_masks, read_metrics_csv, write_metrics_csv, Averaging, MetricRecord, BASE_K, MATCHED_K,
};
use crate::fsutil::from_json_slice;
use crate::nn::{load_checkpoint, save_checkpoint, Architecture, CheckpointMeta};
use crate::registry::Registry;
use crate::report::{write_report, ReportFiles};
use crate::seeds::{derive_seed, tag};
use crate::train::{
    fine_tune_round, grid_jobs, labeled_frames, matched_condition, run_grid_job, AdaptationSpec,
    LabeledFrame, MatchedRule, ModelTemplate, SplitSpec, TrainConfig, TrainError,
};

pub const CACHE_ENV: &str = "ATBSEG_CACHE";

/// Fine-tuning pool, validation and test sources for the unseen subjects.
/// Frames of all listed subjects are pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolSpec {
    /// Whole videos: pool video, validation video, test videos.
    Videos {
        subjects: Vec<SubjectId>,
        pool_video: u32,
        val_video: u32,
        test_videos: Vec<u32>,
    },
    /// The first `pool_frames` of `video` form the pool, the rest of that
    /// video validates.
    LeadingFrames {
        subjects: Vec<SubjectId>,
        video: u32,
        pool_frames: usize,
        test_videos: Vec<u32>,
    },
}

/// Labeled frame sets resolved from a [`PoolSpec`].
#[derive(Debug, Clone)]
pub struct PoolSets {
    pub pool: Vec<LabeledFrame>,
    pub validation: Vec<LabeledFrame>,
    pub test: Vec<LabeledFrame>,
}

impl PoolSpec {
    /// Pool video 11, validation video 12, test videos 13–15.
    pub fn same_corpus(subjects: Vec<SubjectId>) -> Self {
        PoolSpec::Videos {
            subjects,
            pool_video: 11,
            val_video: 12,
            test_videos: vec![13, 14, 15],
        }
    }

    /// First 45 frames of video 1 as pool, the rest of video 1 validates,
    /// video 2 tests.
    pub fn cross_corpus(subjects: Vec<SubjectId>) -> Self {
        PoolSpec::LeadingFrames {
            subjects,
            video: 1,
            pool_frames: 45,
            test_videos: vec![2],
        }
    }

    pub fn subjects(&self) -> &[SubjectId] {
        match self {
            PoolSpec::Videos { subjects, .. } | PoolSpec::LeadingFrames { subjects, .. } => {
                subjects
            }
        }
    }

    fn test_videos(&self) -> &[u32] {
        match self {
            PoolSpec::Videos { test_videos, .. } | PoolSpec::LeadingFrames { test_videos, .. } => {
                test_videos
            }
        }
    }

    pub fn resolve(&self, corpus: &Corpus) -> Result<PoolSets, TrainError> {
        if self.subjects().is_empty() {
            return Err(TrainError::Config("pool spec lists no subjects".into()));
        }
        let clip = |s: &SubjectId, v: u32| {
            corpus
                .clip(s.as_str(), v)
                .ok_or_else(|| TrainError::Config(format!("subject {s} has no video {v}")))
        };
        let (mut pool, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for s in self.subjects() {
            match self {
                PoolSpec::Videos {
                    pool_video,
                    val_video,
                    ..
                } => {
                    pool.extend(labeled_frames(clip(s, *pool_video)?)?);
                    validation.extend(labeled_frames(clip(s, *val_video)?)?);
                }
                PoolSpec::LeadingFrames {
                    video, pool_frames, ..
                } => {
                    let mut frames = labeled_frames(clip(s, *video)?)?;
                    if frames.len() <= *pool_frames {
                        return Err(TrainError::Config(format!(
                            "video {video} of {s} has {} frames; need more than {pool_frames}",
                            frames.len()
                        )));
                    }
                    validation.extend(frames.split_off(*pool_frames));
                    pool.extend(frames);
                }
            }
            for &v in self.test_videos() {
                test.extend(labeled_frames(clip(s, v)?)?);
            }
        }
        if test.is_empty() {
            return Err(TrainError::Config("pool spec has no test frames".into()));
        }
        Ok(PoolSets {
            pool,
            validation,
            test,
        })
    }
}

impl fmt::Display for PoolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.subjects().iter().map(SubjectId::as_str).collect();
        match self {
            PoolSpec::Videos {
                pool_video,
                val_video,
                test_videos,
                ..
            } => write!(
                f,
                "{}: pool video {pool_video}, validation video {val_video}, test videos {test_videos:?}",
                ids.join("+")
            ),
            PoolSpec::LeadingFrames {
                video,
                pool_frames,
                test_videos,
                ..
            } => write!(
                f,
                "{}: first {pool_frames} frames of video {video} as pool, rest validates, test videos {test_videos:?}",
                ids.join("+")
            ),
        }
    }
}

/// `same-corpus:P5,P6` or `cross-corpus:Q1,Q2`.
impl FromStr for PoolSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, ids) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "pool spec {s:?}: expected same-corpus:IDS or cross-corpus:IDS"
            ))
        })?;
        let subjects = parse_subjects(ids)?;
        match kind {
            "same-corpus" => Ok(Self::same_corpus(subjects)),
            "cross-corpus" => Ok(Self::cross_corpus(subjects)),
            other => Err(Error::Config(format!("unknown pool kind {other:?}"))),
        }
    }
}

pub fn parse_subjects(list: &str) -> Result<Vec<SubjectId>> {
    list.split(',')
        .map(|id| SubjectId::new(id.trim()).map_err(|e| Error::Config(e.to_string())))
        .collect()
}

fn default_frames() -> Vec<usize> {
    vec![1, 5, 10, 15]
}
fn default_rounds() -> u32 {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus: PathBuf,
    pub groups: Vec<Vec<SubjectId>>,
    pub splits: Vec<SplitSpec>,
    pub architectures: Vec<Architecture>,
    #[serde(default)]
    pub model: ModelTemplate,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub corpus: PathBuf,
    pub pool: PoolSpec,
    #[serde(default = "default_frames")]
    pub frames: Vec<usize>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "TrainConfig::adaptation")]
    pub train: TrainConfig,
    /// Also evaluate each un-adapted base model (`k = 0`).
    #[serde(default)]
    pub evaluate_base: bool,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedSection {
    /// Defaults to the first pretraining architecture.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    /// Defaults per corpus: videos 1–8 / 9–10, or 70% of video 1 for
    /// subsampled corpora.
    #[serde(default)]
    pub rule: Option<MatchedRule>,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub adapt: Option<AdaptSection>,
    #[serde(default)]
    pub matched: Option<MatchedSection>,
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let config: ExperimentConfig = from_json_slice(&bytes).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            message: format!("{} (at {})", e.message, e.pointer),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn new(config: ExperimentConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.config.output)
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.output().join("registry")
    }

    pub fn records_path(&self) -> PathBuf {
        self.output().join("records.csv")
    }

    pub fn matched_path(&self) -> PathBuf {
        self.output().join("matched.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output().join("report")
    }

    /// Adapted checkpoints go to `ATBSEG_CACHE` if set.
    pub fn adapted_dir(&self) -> PathBuf {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output().join("adapted"),
        }
    }

    fn pretrain(&self) -> Result<&PretrainSection> {
        self.config
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("config has no \"pretrain\" section".into()))
    }

    fn adapt(&self) -> Result<&AdaptSection> {
        self.config
            .adapt
            .as_ref()
            .ok_or_else(|| Error::Config("config has no \"adapt\" section".into()))
    }
}

/// Apply `f` to every item on up to `jobs` threads; results keep input order.
/// Stops handing out work after the first error.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("no poisoned workers");
    // Work is handed out in index order, so every unfinished slot comes
    // after a failed one.
    slots
        .into_iter()
        .map(|slot| slot.expect("slots before the first error are filled"))
        .collect()
}

pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

fn load(path: &Path) -> Result<Corpus> {
    Ok(load_corpus(path)?)
}

#[derive(Debug, Clone)]
pub struct GridSummary {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub entries: usize,
}

/// Pretrain every grid entry not already in the registry with a matching
/// job hash. Each finished model is registered immediately.
pub fn run_grid(exp: &Experiment, jobs: usize, progress: Progress) -> Result<GridSummary> {
    let sec = exp.pretrain()?;
    let corpus = load(&exp.resolve(&sec.corpus))?;
    let all = grid_jobs(
        &corpus,
        &sec.groups,
        &sec.splits,
        &sec.architectures,
        &sec.model,
        &sec.train,
        exp.config.seed,
    )?;
    let registry = Mutex::new(Registry::open_or_create(&exp.registry_dir())?);
    let (todo, done): (Vec<_>, Vec<_>) = {
        let reg = registry.lock().expect("unpoisoned");
        all.into_iter().partition(|j| !reg.is_complete(j))
    };
    for j in &done {
        progress(&format!(
            "skip {} ({}): already registered",
            j.name, j.architecture
        ));
    }
    let total = todo.len();
    parallel_map(&todo, jobs, |i, job| {
        progress(&format!(
            "[{}/{total}] training {} ({})",
            i + 1,
            job.name,
            job.architecture
        ));
        let outcome = run_grid_job(&corpus, job)?;
        let best = outcome.best_record().clone();
        registry.lock().expect("unpoisoned").record(job, &outcome)?;
        progress(&format!(
            "[{}/{total}] {} ({}): best epoch {} of {}, val loss {:.4}, val dice {:.3}/{:.3}/{:.3}",
            i + 1,
            job.name,
            job.architecture,
            outcome.best_epoch,
            outcome.history.len(),
            best.val_loss,
            best.val_dice[0],
            best.val_dice[1],
            best.val_dice[2]
        ));
        Ok(())
    })?;
    let entries = registry.into_inner().expect("unpoisoned").len();
    Ok(GridSummary {
        trained: todo.iter().map(|j| j.name.clone()).collect(),
        skipped: done.iter().map(|j| j.name.clone()).collect(),
        entries,
    })
}

/// Command-line overrides of the adapt section.
#[derive(Debug, Clone, Default)]
pub struct AdaptOverrides {
    pub registry: Option<PathBuf>,
    pub pool: Option<PoolSpec>,
    pub frames: Option<Vec<usize>>,
    pub rounds: Option<u32>,
    pub output: Option<PathBuf>,
    pub architectures: Option<Vec<Architecture>>,
}

#[derive(Debug, Clone)]
pub struct AdaptSummary {
    pub base_models: usize,
    pub adapted: usize,
    pub records: Vec<MetricRecord>,
    pub records_path: PathBuf,
}

/// Record name of a registry model: `<architecture>/<name>`.
pub fn model_label(architecture: Architecture, name: &str) -> String {
    format!("{architecture}/{name}")
}

/// Fine-tune every base model in the registry for every (k, round), score
/// each adapted model on the test set and write the metric records.
pub fn run_adapt(
    exp: &Experiment,
    ov: &AdaptOverrides,
    jobs: usize,
    progress: Progress,
) -> Result<AdaptSummary> {
    let sec = exp.adapt()?;
    let registry_dir = ov.registry.clone().unwrap_or_else(|| exp.registry_dir());
    let registry = Registry::open(&registry_dir)?;
    let pool_spec = ov.pool.clone().unwrap_or_else(|| sec.pool.clone());
    let frames = ov.frames.clone().unwrap_or_else(|| sec.frames.clone());
    let rounds = ov.rounds.unwrap_or(sec.rounds);
    let corpus = load(&exp.resolve(&sec.corpus))?;
    let sets = pool_spec.resolve(&corpus)?;
    let spec = AdaptationSpec {
        frame_counts: frames,
        rounds,
        pool: sets.pool,
        validation: sets.validation,
        base_seed: derive_seed(&[tag("adapt"), exp.config.seed]),
    };
    spec.validate()?;
    sec.train.validate()?;
    let entries: Vec<_> = registry
        .entries()
        .iter()
        .filter(|e| {
            ov.architectures
                .as_ref()
                .is_none_or(|a| a.contains(&e.architecture))
        })
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "registry {} has no base models",
            registry_dir.display()
        )));
    }
    progress(&format!(
        "adapting {} base models: pool {} frames, validation {} frames, test {} frames ({pool_spec})",
        entries.len(),
        spec.pool.len(),
        spec.validation.len(),
        sets.test.len()
    ));
    let bases = entries
        .iter()
        .map(|e| Ok(registry.load_model(e)?))
        .collect::<Result<Vec<_>>>()?;
    let mut work: Vec<(usize, i64, u32)> = Vec::new();
    for b in 0..entries.len() {
        if sec.evaluate_base {
            work.push((b, BASE_K, 0));
        }
        for (k, r) in spec.jobs() {
            work.push((b, k as i64, r));
        }
    }
    let adapted_dir = exp.adapted_dir();
    let total = work.len();
    let results = parallel_map(&work, jobs, |i, &(b, k, round)| {
        let entry = &entries[b];
        let label = model_label(entry.architecture, &entry.name);
        if k == BASE_K {
            let m = evaluate_masks(&bases[b], &sets.test, Averaging::PerFrame)?;
            return Ok(records(&label, k, round, &m, sets.test.len()));
        }
        let adapted = fine_tune_round(&bases[b], &spec, &sec.train, k as usize, round)?;
        if sec.save_checkpoints {
            let path = adapted_dir
                .join(entry.architecture.as_str())
                .join(&entry.name)
                .join(format!("k{k}_r{round}.bin"));
            let best = adapted.outcome.best_record();
            let mut meta = CheckpointMeta::new(
                adapted.outcome.model.config(),
                adapted.outcome.model.config().seed,
                adapted.outcome.best_epoch,
            );
            meta.val_loss = Some(best.val_loss);
            meta.val_dice = Some(best.val_dice);
            save_checkpoint(&path, &adapted.outcome.model, &meta)?;
        }
        let m = evaluate_masks(&adapted.outcome.model, &sets.test, Averaging::PerFrame)?;
        progress(&format!(
            "[{}/{total}] {label} k={k} round {round}: dice {:.3}/{:.3}/{:.3}",
            i + 1,
            m[0].1,
            m[1].1,
            m[2].1
        ));
        Ok(records(&label, k, round, &m, sets.test.len()))
    })?;
    let records: Vec<MetricRecord> = results.into_iter().flatten().collect();
    let records_path = ov.output.clone().unwrap_or_else(|| exp.records_path());
    write_metrics_csv(&records_path, &records)?;
    Ok(AdaptSummary {
        base_models: entries.len(),
        adapted: work.iter().filter(|w| w.1 != BASE_K).count(),
        records,
        records_path,
    })
}

fn records(
    model: &str,
    k: i64,
    round: u32,
    m: &[(f64, f64); 3],
    n_frames: usize,
) -> Vec<MetricRecord> {
    m.iter()
        .enumerate()
        .map(|(i, &(pca, dice))| MetricRecord {
            model: model.to_string(),
            k,
            round,
            mask: i as u8 + 1,
            pca,
            dice,
            n_frames,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MatchedSummary {
    pub records: Vec<MetricRecord>,
    pub records_path: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train the matched-condition benchmark on the unseen subjects' own data
/// (at the corpus's native resolution) and score it on the test set.
pub fn run_matched(
    exp: &Experiment,
    output: Option<&Path>,
    progress: Progress,
) -> Result<MatchedSummary> {
    let sec = exp.adapt()?;
    let default_section = MatchedSection {
        architecture: None,
        rule: None,
        train: TrainConfig::default(),
    };
    let msec = exp.config.matched.as_ref().unwrap_or(&default_section);
    let architecture = match msec.architecture {
        Some(a) => a,
        None => exp
            .config
            .pretrain
            .as_ref()
            .and_then(|p| p.architectures.first().copied())
            .unwrap_or(Architecture::SegnetStyle),
    };
    let template = exp
        .config
        .pretrain
        .as_ref()
        .map(|p| p.model.clone())
        .unwrap_or_default();
    let corpus = load(&exp.resolve(&sec.corpus))?;
    let rule = msec
        .rule
        .clone()
        .unwrap_or_else(|| MatchedRule::for_corpus(&corpus));
    let subjects = sec.pool.subjects();
    let seed = derive_seed(&[tag("matched"), exp.config.seed]);
    let model = template.config(
        architecture,
        corpus.profile.frame_width,
        corpus.profile.frame_height,
        seed,
    );
    let train = TrainConfig {
        seed,
        ..msec.train.clone()
    };
    progress(&format!(
        "training matched condition ({architecture}) on {} subjects",
        subjects.len()
    ));
    let outcome = matched_condition(&corpus, subjects, &rule, model, &train)?;
    let test = sec.pool.resolve(&corpus)?.test;
    let m = evaluate_masks(&outcome.model, &test, Averaging::PerFrame)?;
    let label = format!("matched/{architecture}");
    let recs = records(&label, MATCHED_K, 0, &m, test.len());
    let records_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| exp.matched_path());
    write_metrics_csv(&records_path, &recs)?;
    progress(&format!(
        "matched: best epoch {} of {}, test dice {:.3}/{:.3}/{:.3}",
        outcome.best_epoch,
        outcome.history.len(),
        m[0].1,
        m[1].1,
        m[2].1
    ));
    Ok(MatchedSummary {
        records: recs,
        records_path,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
    })
}

/// Score a checkpoint on whole videos of a corpus at native resolution.
pub fn run_eval(
    checkpoint: &Path,
    corpus_manifest: &Path,
    subjects: &[SubjectId],
    videos: &[u32],
    name: &str,
    averaging: Averaging,
) -> Result<Vec<MetricRecord>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let corpus = load(corpus_manifest)?;
    let mut test = Vec::new();
    for s in subjects {
        for &v in videos {
            let clip = corpus
                .clip(s.as_str(), v)
                .ok_or_else(|| Error::Config(format!("subject {s} has no video {v}")))?;
            test.extend(labeled_frames(clip)?);
        }
    }
    let m = evaluate_masks(&model, &test, averaging)?;
    Ok(records(name, BASE_K, 0, &m, test.len()))
}

/// Charts, aggregates and summary from metric CSVs.
pub fn run_report(records: &Path, matched: &Path, out: &Path) -> Result<ReportFiles> {
    let recs = read_metrics_csv(records)?;
    let matched = read_metrics_csv(matched)?;
    Ok(write_report(&recs, &matched, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{save_corpus, CorpusProfile};
    use crate::phantom::phantom_corpus;

    fn ids(s: &str) -> Vec<SubjectId> {
        parse_subjects(s).unwrap()
    }

    #[test]
    fn pool_presets_parse() {
        assert_eq!(
            "same-corpus:P5,P6".parse::<PoolSpec>().unwrap(),
            PoolSpec::same_corpus(ids("P5,P6"))
        );
        assert_eq!(
            "cross-corpus:Q1".parse::<PoolSpec>().unwrap(),
            PoolSpec::cross_corpus(ids("Q1"))
        );
        assert!("other:Q1".parse::<PoolSpec>().is_err());
        assert!("Q1".parse::<PoolSpec>().is_err());
    }

    #[test]
    fn cross_corpus_pool_is_45_and_46() {
        let corpus = phantom_corpus(CorpusProfile::corpus_b(), 1, "Q", 1, &[91, 3]);
        let sets = PoolSpec::cross_corpus(ids("Q1")).resolve(&corpus).unwrap();
        assert_eq!(
            (sets.pool.len(), sets.validation.len(), sets.test.len()),
            (45, 46, 3)
        );
        let last_pool = sets
            .pool
            .last()
            .unwrap()
            .source
            .as_ref()
            .unwrap()
            .frame_index;
        let first_val = sets.validation[0].source.as_ref().unwrap().frame_index;
        assert!(last_pool < first_val);
    }

    #[test]
    fn config_errors_carry_a_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(
            &path,
            r#"{"output": "o", "pretrain": {"corpus": "c", "groups": [["F1"]], "splits": ["3:1"], "architectures": ["segnet-style"]}}"#,
        )
        .unwrap();
        let err = Experiment::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/pretrain/splits/0"), "{err}");
        std::fs::write(&path, r#"{"output": "o", "bogus": 1}"#).unwrap();
        assert!(Experiment::load(&path)
            .unwrap_err()
            .to_string()
            .contains("bogus"));
    }

    #[test]
    fn parallel_map_keeps_order_and_stops_on_error() {
        let items: Vec<u32> = (0..20).collect();
        let out = parallel_map(&items, 4, |_, &x| Ok(x * 2)).unwrap();
        assert_eq!(out, (0..20).map(|x| x * 2).collect::<Vec<_>>());
        let err = parallel_map(&items, 3, |_, &x| {
            if x == 7 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(err.is_err());
    }

    fn tiny_experiment(dir: &Path) -> Experiment {
        let profile = CorpusProfile {
            name: "tiny".into(),
            frame_width: 16,
            frame_height: 16,
            pixel_spacing: 1.0,
            frame_rate: 10.0,
            subsample_stride: 1,
        };
        let corpus = phantom_corpus(profile, 3, "S", 3, &[2; 4]);
        save_corpus(&corpus, &dir.join("corpus")).unwrap();
        let json = r#"{
            "seed": 5,
            "output": "out",
            "pretrain": {
                "corpus": "corpus/manifest.json",
                "groups": [["S1"], ["S1", "S2"]],
                "splits": ["2:1"],
                "architectures": ["segnet-style"],
                "model": {"stages": 2, "base_channels": 4},
                "train": {"max_epochs": 1}
            },
            "adapt": {
                "corpus": "corpus/manifest.json",
                "pool": {"kind": "videos", "subjects": ["S3"], "pool_video": 1, "val_video": 2, "test_videos": [3]},
                "frames": [1, 2],
                "rounds": 2,
                "train": {"max_epochs": 1, "learning_rate": 0.0001},
                "evaluate_base": true
            },
            "matched": {"rule": {"rule": "videos", "train": [1], "val": [2]}, "train": {"max_epochs": 1}}
        }"#;
        std::fs::write(dir.join("exp.json"), json).unwrap();
        Experiment::load(&dir.join("exp.json")).unwrap()
    }

    #[test]
    fn end_to_end_pipeline_is_resumable_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let exp = tiny_experiment(dir.path());
        let quiet = |_: &str| {};
        let g = run_grid(&exp, 1, &quiet).unwrap();
        assert_eq!((g.trained.len(), g.entries), (2, 2));
        let again = run_grid(&exp, 2, &quiet).unwrap();
        assert_eq!((again.trained.len(), again.skipped.len()), (0, 2));

        let a = run_adapt(&exp, &AdaptOverrides::default(), 1, &quiet).unwrap();
        // 2 models x (base + 2 k x 2 rounds) x 3 masks.
        assert_eq!(a.records.len(), 2 * 5 * 3);
        assert_eq!(a.adapted, 8);
        let parallel = run_adapt(
            &exp,
            &AdaptOverrides {
                output: Some(dir.path().join("par.csv")),
                ..AdaptOverrides::default()
            },
            3,
            &quiet,
        )
        .unwrap();
        assert_eq!(parallel.records, a.records);
        assert_eq!(
            std::fs::read(&a.records_path).unwrap(),
            std::fs::read(dir.path().join("par.csv")).unwrap()
        );
        assert!(exp
            .adapted_dir()
            .join("segnet-style/S1_2/k2_r2.bin")
            .exists());

        let m = run_matched(&exp, None, &quiet).unwrap();
        assert_eq!(m.records.len(), 3);
        let files = run_report(&a.records_path, &m.records_path, &exp.report_dir()).unwrap();
        assert_eq!(files.charts.len(), 3);
    }

    #[test]
    fn adapt_rejects_oversized_frame_counts() {
        let dir = tempfile::tempdir().unwrap();
        let exp = tiny_experiment(dir.path());
        run_grid(&exp, 1, &|_| {}).unwrap();
        let ov = AdaptOverrides {
            frames: Some(vec![3]),
            ..AdaptOverrides::default()
        };
        let err = run_adapt(&exp, &ov, 1, &|_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn adapt_without_registry_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let exp = tiny_experiment(dir.path());
        let err = run_adapt(&exp, &AdaptOverrides::default(), 1, &|_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}
