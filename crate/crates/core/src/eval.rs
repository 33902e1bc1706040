//! Pixel-wise classification accuracy (PCA) and Dice, per-model evaluation
//! and aggregation over fine-tuning rounds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::MaskTriple;
use crate::fsutil::{to_json_pretty, write_atomic};
use crate::grid::{Image, Mask};
use crate::nn::{ModelError, SegModel};
use crate::rasterize::{resize_frame, resize_masks, RasterError};
use crate::train::LabeledFrame;

/// `k` value of matched-condition records.
pub const MATCHED_K: i64 = -1;
/// `k` value of un-adapted base-model records.
pub const BASE_K: i64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask dims differ: {a:?} vs {b:?}")]
    DimMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no matched-condition record for mask {mask}")]
    MissingMatched { mask: u8 },
    #[error("no records to aggregate")]
    NoRecords,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_dims(pred: &Mask, gt: &Mask) -> Result<(), EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::DimMismatch {
            a: pred.dims(),
            b: gt.dims(),
        });
    }
    Ok(())
}

/// Fraction of pixels where `pred` and `gt` agree.
pub fn pca(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    check_dims(pred, gt)?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    let agree = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / gt.len() as f64)
}

/// `2|pred ∩ gt| / (|pred| + |gt|)` over tissue pixels; 1.0 when both are
/// empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    check_dims(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Anything that maps a batch of frames at its own input dims to masks.
pub trait Segmenter {
    fn input_dims(&self) -> (usize, usize);
    fn segment(&self, frames: &[Image]) -> Result<Vec<MaskTriple>, ModelError>;
}

impl Segmenter for SegModel<f32> {
    fn input_dims(&self) -> (usize, usize) {
        (self.config().input_width, self.config().input_height)
    }

    fn segment(&self, frames: &[Image]) -> Result<Vec<MaskTriple>, ModelError> {
        Ok(self
            .forward(frames)?
            .iter()
            .map(|p| p.threshold())
            .collect())
    }
}

/// How per-pixel agreement is reduced over a test set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Metric per frame, then the uniform mean over frames.
    #[default]
    PerFrame,
    /// One confusion count over all pixels of all frames.
    Pooled,
}

/// Per-mask PCA and Dice of a segmenter on native-resolution test frames.
///
/// Frames are resized (bilinear) to the segmenter's input dims when they
/// differ; predicted masks are resized back (nearest) and scored against
/// the native ground truth.
pub fn evaluate_masks<S: Segmenter + ?Sized>(
    model: &S,
    test: &[LabeledFrame],
    averaging: Averaging,
) -> Result<[(f64, f64); 3], EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let (mw, mh) = model.input_dims();
    let mut per_frame: Vec<[(f64, f64); 3]> = Vec::with_capacity(test.len());
    let mut pooled = [[0usize; 4]; 3];
    for chunk in test.chunks(16) {
        let inputs = chunk
            .iter()
            .map(|f| {
                if f.image.dims() == (mw, mh) {
                    Ok(f.image.clone())
                } else {
                    resize_frame(&f.image, mw, mh)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let preds = model.segment(&inputs)?;
        for (pred, frame) in preds.iter().zip(chunk) {
            let (nw, nh) = frame.masks.dims();
            let pred = if pred.dims() == (nw, nh) {
                pred.clone()
            } else {
                resize_masks(pred, nw, nh)?
            };
            let mut row = [(0.0, 0.0); 3];
            for (m, (p, g)) in pred
                .as_array()
                .into_iter()
                .zip(frame.masks.as_array())
                .enumerate()
            {
                row[m] = (pca(p, g)?, dice(p, g)?);
                for (&pv, &gv) in p.as_slice().iter().zip(g.as_slice()) {
                    pooled[m][usize::from(pv != 0) * 2 + usize::from(gv != 0)] += 1;
                }
            }
            per_frame.push(row);
        }
    }
    let mut out = [(0.0, 0.0); 3];
    for (m, slot) in out.iter_mut().enumerate() {
        *slot = match averaging {
            Averaging::PerFrame => {
                let n = per_frame.len() as f64;
                (
                    per_frame.iter().map(|r| r[m].0).sum::<f64>() / n,
                    per_frame.iter().map(|r| r[m].1).sum::<f64>() / n,
                )
            }
            Averaging::Pooled => {
                let [tn, fneg, fp, tp] = pooled[m];
                let total = (tn + fneg + fp + tp) as f64;
                let d = if tp + fp + fneg == 0 {
                    1.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
                };
                ((tn + tp) as f64 / total, d)
            }
        };
    }
    Ok(out)
}

/// One `MetricRecord` per mask, per-frame averaging.
pub fn evaluate_model<S: Segmenter + ?Sized>(
    model: &S,
    test: &[LabeledFrame],
    model_name: &str,
    k: i64,
    round: u32,
) -> Result<Vec<MetricRecord>, EvalError> {
    let metrics = evaluate_masks(model, test, Averaging::PerFrame)?;
    Ok(metrics
        .iter()
        .enumerate()
        .map(|(m, &(pca, dice))| MetricRecord {
            model: model_name.to_string(),
            k,
            round,
            mask: m as u8 + 1,
            pca,
            dice,
            n_frames: test.len(),
        })
        .collect())
}

/// Metrics of one evaluated model on one mask. `k` is the adaptation frame
/// count, [`BASE_K`] for a base model and [`MATCHED_K`] for the
/// matched-condition benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub k: i64,
    pub round: u32,
    pub mask: u8,
    pub pca: f64,
    pub dice: f64,
    pub n_frames: usize,
}

/// Round statistics of one (model, k, mask) cell. Relative values are
/// `100 · metric / matched`; deltas are `100 · (metric − matched) / matched`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub model: String,
    pub k: i64,
    pub mask: u8,
    pub rounds: usize,
    pub mean_pca: f64,
    pub std_pca: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub relative_to_matched_pca: f64,
    pub relative_to_matched_dice: f64,
    pub delta_percent_pca: f64,
    pub delta_percent_dice: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean matched-condition (PCA, Dice) of one mask.
pub fn matched_reference(matched: &[MetricRecord], mask: u8) -> Result<(f64, f64), EvalError> {
    let mut rows: Vec<&MetricRecord> = matched.iter().filter(|r| r.mask == mask).collect();
    if rows.is_empty() {
        return Err(EvalError::MissingMatched { mask });
    }
    rows.sort_by(|a, b| (&a.model, a.round).cmp(&(&b.model, b.round)));
    let pca: Vec<f64> = rows.iter().map(|r| r.pca).collect();
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    Ok((mean_std(&pca).0, mean_std(&dice).0))
}

/// Aggregate over rounds per (model, k, mask), relative to the matched
/// condition. Values are summed in round order, so the result does not
/// depend on record order.
pub fn aggregate(
    records: &[MetricRecord],
    matched: &[MetricRecord],
) -> Result<Vec<AggregateRecord>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let reference = |mask: u8| matched_reference(matched, mask);
    let mut cells: BTreeMap<(String, i64, u8), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.model.clone(), r.k, r.mask))
            .or_default()
            .push(r);
    }
    let pct = |v: f64, m: f64| 100.0 * v / m;
    cells
        .into_iter()
        .map(|((model, k, mask), mut rows)| {
            rows.sort_by(|a, b| {
                a.round
                    .cmp(&b.round)
                    .then(a.pca.total_cmp(&b.pca))
                    .then(a.dice.total_cmp(&b.dice))
            });
            let pca: Vec<f64> = rows.iter().map(|r| r.pca).collect();
            let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
            let (mean_pca, std_pca) = mean_std(&pca);
            let (mean_dice, std_dice) = mean_std(&dice);
            let (mp, md) = reference(mask)?;
            Ok(AggregateRecord {
                model,
                k,
                mask,
                rounds: rows.len(),
                mean_pca,
                std_pca,
                mean_dice,
                std_dice,
                relative_to_matched_pca: pct(mean_pca, mp),
                relative_to_matched_dice: pct(mean_dice, md),
                delta_percent_pca: pct(mean_pca - mp, mp),
                delta_percent_dice: pct(mean_dice - md, md),
            })
        })
        .collect()
}

fn csv_bytes<T: Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>, EvalError> {
    let err = |e: csv::Error| EvalError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| EvalError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

const METRICS_HEADER: &str = "model,k,round,mask,pca,dice,n_frames\n";

/// Write metric records as CSV (header `model,k,round,mask,pca,dice,n_frames`).
pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<(), EvalError> {
    let bytes = if records.is_empty() {
        METRICS_HEADER.as_bytes().to_vec()
    } else {
        csv_bytes(records, path)?
    };
    write_atomic(path, &bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| EvalError::Csv {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", i + 1),
            })
            .and_then(|rec: MetricRecord| {
                let ok = (0.0..=1.0).contains(&rec.pca)
                    && (0.0..=1.0).contains(&rec.dice)
                    && (1..=3).contains(&rec.mask);
                if ok {
                    Ok(rec)
                } else {
                    Err(EvalError::Csv {
                        path: path.to_path_buf(),
                        message: format!("row {}: metric or mask out of range", i + 1),
                    })
                }
            })
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRecord]) -> Result<(), EvalError> {
    let bytes = csv_bytes(rows, path)?;
    write_atomic(path, &bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_aggregate_json(path: &Path, rows: &[AggregateRecord]) -> Result<(), EvalError> {
    write_atomic(path, &to_json_pretty(&rows)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::seeds::rng_for;
    use rand::Rng;

    fn mask(w: usize, h: usize, bits: &[u8]) -> Mask {
        Grid::from_vec(w, h, bits.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_complement() {
        let mut rng = rng_for(&[1]);
        let g = Grid::from_fn(6, 5, |_, _| u8::from(rng.random_bool(0.5)));
        assert_eq!(pca(&g, &g).unwrap(), 1.0);
        assert_eq!(pca(&g.complement(), &g).unwrap(), 0.0);
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn dice_edge_cases() {
        let empty = Grid::filled(4, 4, 0u8);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let a = mask(2, 2, &[1, 0, 0, 0]);
        let b = mask(2, 2, &[0, 1, 0, 0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &Grid::filled(2, 2, 0)).unwrap(), 0.0);
    }

    #[test]
    fn half_coverage_gives_two_thirds() {
        // gt has 2k = 8 pixels, pred covers 4 of them and nothing else.
        let gt = mask(4, 4, &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pred = mask(4, 4, &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((dice(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dims_must_match() {
        let a = Grid::filled(2, 2, 0u8);
        let b = Grid::filled(3, 2, 0u8);
        assert!(matches!(pca(&a, &b), Err(EvalError::DimMismatch { .. })));
        assert!(matches!(dice(&a, &b), Err(EvalError::DimMismatch { .. })));
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = rng_for(&[2]);
        for _ in 0..50 {
            let a = Grid::from_fn(5, 5, |_, _| u8::from(rng.random_bool(0.4)));
            let b = Grid::from_fn(5, 5, |_, _| u8::from(rng.random_bool(0.4)));
            assert_eq!(pca(&a, &b).unwrap(), pca(&b, &a).unwrap());
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            if a != b {
                assert!(dice(&a, &b).unwrap() < 1.0);
            }
        }
    }

    fn rec(model: &str, k: i64, round: u32, mask: u8, pca: f64, dice: f64) -> MetricRecord {
        MetricRecord {
            model: model.into(),
            k,
            round,
            mask,
            pca,
            dice,
            n_frames: 1,
        }
    }

    fn matched(d: f64) -> Vec<MetricRecord> {
        (1..=3)
            .map(|m| rec("matched", MATCHED_K, 1, m, d, d))
            .collect()
    }

    #[test]
    fn single_round_has_zero_std() {
        let out = aggregate(&[rec("a", 5, 1, 1, 0.7, 0.6)], &matched(0.9)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].std_dice, 0.0);
        assert_eq!(out[0].mean_dice, 0.6);
    }

    #[test]
    fn relative_and_delta() {
        let out = aggregate(&[rec("a", 5, 1, 2, 0.9, 0.9)], &matched(0.9)).unwrap();
        assert_eq!(out[0].relative_to_matched_dice, 100.0);
        assert_eq!(out[0].delta_percent_dice, 0.0);
    }

    #[test]
    fn population_std() {
        let rows = [rec("a", 5, 1, 1, 0.8, 0.8), rec("a", 5, 2, 1, 1.0, 1.0)];
        let out = aggregate(&rows, &matched(0.9)).unwrap();
        assert!((out[0].mean_dice - 0.9).abs() < 1e-15);
        assert!((out[0].std_dice - 0.1).abs() < 1e-15);
    }

    #[test]
    fn missing_matched_mask_is_an_error() {
        let m = vec![rec("matched", MATCHED_K, 1, 1, 0.9, 0.9)];
        assert!(matches!(
            aggregate(&[rec("a", 1, 1, 2, 0.5, 0.5)], &m),
            Err(EvalError::MissingMatched { mask: 2 })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![rec("F1M1_2", 15, 3, 2, 0.987654321, 1.0 / 3.0)];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,k,round,mask,pca,dice,n_frames\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    struct Oracle(Vec<MaskTriple>);
    impl Segmenter for Oracle {
        fn input_dims(&self) -> (usize, usize) {
            self.0[0].dims()
        }
        fn segment(&self, frames: &[Image]) -> Result<Vec<MaskTriple>, ModelError> {
            // Frames carry their index in pixel (0, 0).
            Ok(frames
                .iter()
                .map(|f| self.0[f.at(0, 0) as usize].clone())
                .collect())
        }
    }

    struct AllTissue;
    impl Segmenter for AllTissue {
        fn input_dims(&self) -> (usize, usize) {
            (16, 16)
        }
        fn segment(&self, frames: &[Image]) -> Result<Vec<MaskTriple>, ModelError> {
            let one = Grid::filled(16, 16, 1u8);
            Ok(frames
                .iter()
                .map(|_| MaskTriple {
                    m1: one.clone(),
                    m2: one.clone(),
                    m3: one.clone(),
                })
                .collect())
        }
    }

    fn test_set(n: usize, seed: u64) -> Vec<LabeledFrame> {
        let mut rng = rng_for(&[seed]);
        (0..n)
            .map(|i| {
                let mut m = || Grid::from_fn(16, 16, |_, _| u8::from(rng.random_bool(0.3)));
                LabeledFrame::new(
                    Grid::filled(16, 16, i as f32),
                    MaskTriple {
                        m1: m(),
                        m2: m(),
                        m3: m(),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn oracle_stub_scores_perfectly() {
        let set = test_set(5, 3);
        let stub = Oracle(set.iter().map(|f| f.masks.clone()).collect());
        for r in evaluate_model(&stub, &set, "oracle", 0, 0).unwrap() {
            assert_eq!((r.pca, r.dice, r.n_frames), (1.0, 1.0, 5));
        }
    }

    #[test]
    fn all_tissue_stub_matches_closed_form() {
        let set = test_set(4, 4);
        let recs = evaluate_model(&AllTissue, &set, "const", 0, 0).unwrap();
        for (m, r) in recs.iter().enumerate() {
            let fr: Vec<f64> = set
                .iter()
                .map(|f| f.masks.as_array()[m].count_ones() as f64 / 256.0)
                .collect();
            let pca_want = fr.iter().sum::<f64>() / 4.0;
            let dice_want = fr
                .iter()
                .map(|f| if *f == 0.0 { 0.0 } else { 2.0 * f / (1.0 + f) })
                .sum::<f64>()
                / 4.0;
            assert!((r.pca - pca_want).abs() < 1e-12);
            assert!((r.dice - dice_want).abs() < 1e-12);
        }
    }

    #[test]
    fn per_frame_and_pooled_differ() {
        // Frame 0: 256 pixels, accuracy 0.5. Frame 1: 1024 pixels, accuracy 1.0.
        let m0 = Grid::from_fn(16, 16, |_, y| u8::from(y < 8));
        let m1 = Grid::filled(32, 32, 1u8);
        let small = LabeledFrame::new(
            Grid::filled(16, 16, 0.0),
            MaskTriple {
                m1: m0.clone(),
                m2: m0.clone(),
                m3: m0,
            },
        );
        let big = LabeledFrame::new(
            Grid::filled(32, 32, 1.0),
            MaskTriple {
                m1: m1.clone(),
                m2: m1.clone(),
                m3: m1,
            },
        );
        // Predicts all tissue at 16x16; resized to 32x32 for the big frame.
        let set = vec![small, big];
        let per = evaluate_masks(&AllTissue, &set, Averaging::PerFrame).unwrap();
        let pooled = evaluate_masks(&AllTissue, &set, Averaging::Pooled).unwrap();
        assert!((per[0].0 - 0.75).abs() < 1e-12);
        assert!((pooled[0].0 - 18.0 / 20.0).abs() < 1e-12);
        assert_ne!(per[0].0, pooled[0].0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(
            evaluate_model(&AllTissue, &[], "x", 0, 0),
            Err(EvalError::EmptyTestSet)
        ));
    }
}
