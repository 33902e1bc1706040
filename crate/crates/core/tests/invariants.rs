use proptest::prelude::*;

use atbseg::corpus::{load_corpus, save_corpus, CorpusProfile};
use atbseg::eval::{dice, pca, read_metrics_csv, write_metrics_csv};
use atbseg::nn::{load_checkpoint, save_checkpoint, CheckpointMeta};
use atbseg::phantom::phantom_corpus;
use atbseg::train::select_frames;
use atbseg::{Architecture, Mask, MetricRecord, ModelConfig, SegModel};

fn arb_mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        let cells = proptest::collection::vec(0u8..2, w * h);
        (cells.clone(), cells).prop_map(move |(a, b)| {
            (
                Mask::from_vec(w, h, a).unwrap(),
                Mask::from_vec(w, h, b).unwrap(),
            )
        })
    })
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_symmetric((a, b) in arb_mask_pair()) {
        let (p, d) = (pca(&a, &b).unwrap(), dice(&a, &b).unwrap());
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(p, pca(&b, &a).unwrap());
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(pca(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pca_counts_complement_agreement((a, b) in arb_mask_pair()) {
        // Agreement on the tissue class is agreement on the air class.
        prop_assert_eq!(pca(&a, &b).unwrap(), pca(&a.complement(), &b.complement()).unwrap());
    }

    #[test]
    fn frame_selection_is_sorted_distinct_and_seeded(
        pool in 1usize..120, k_frac in 0.0f64..1.0, seed in any::<u64>(), round in 1u32..20,
    ) {
        let k = 1 + ((pool - 1) as f64 * k_frac) as usize;
        let picked = select_frames(pool, k, seed, round).unwrap();
        prop_assert_eq!(picked.len(), k);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&i| i < pool));
        prop_assert_eq!(&picked, &select_frames(pool, k, seed, round).unwrap());
    }

    #[test]
    fn metrics_csv_round_trips(rows in proptest::collection::vec((0i64..20, 1u32..11, 1u8..4, 0.0f64..=1.0, 0.0f64..=1.0, 1usize..500), 0..20)) {
        let records: Vec<MetricRecord> = rows
            .into_iter()
            .map(|(k, round, mask, pca, dice, n_frames)| MetricRecord { model: "segnet-style/F12_2".into(), k, round, mask, pca, dice, n_frames })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &records).unwrap();
        prop_assert_eq!(read_metrics_csv(&path).unwrap(), records);
    }
}

#[test]
fn oversized_selection_is_rejected() {
    assert!(select_frames(4, 5, 1, 1).is_err());
    assert!(select_frames(4, 0, 1, 1).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let config = ModelConfig::new(Architecture::SegnetStyle, 16, 16)
        .with_stages(2)
        .with_base_channels(4)
        .with_seed(9);
    let model = SegModel::<f32>::new(config.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&path, &model, &CheckpointMeta::new(&config, 9, 0)).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.seed, 9);
    let img = atbseg::Image::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
    let a = model.forward(std::slice::from_ref(&img)).unwrap();
    let b = back.forward(std::slice::from_ref(&img)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_round_trips_through_disk() {
    let profile = CorpusProfile {
        name: "rt".into(),
        frame_width: 16,
        frame_height: 16,
        pixel_spacing: 1.0,
        frame_rate: 10.0,
        subsample_stride: 1,
    };
    let corpus = phantom_corpus(profile, 5, "R", 2, &[3, 2]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(&manifest).unwrap();
    assert_eq!(back.subjects.len(), 2);
    for (s, t) in corpus.subjects.iter().zip(&back.subjects) {
        assert_eq!(s.subject.id, t.subject.id);
        for (a, b) in s.videos.iter().zip(&t.videos) {
            assert_eq!(a.annotations, b.annotations);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                // 16-bit storage: within one quantisation step.
                let worst = fa
                    .pixels
                    .as_slice()
                    .iter()
                    .zip(fb.pixels.as_slice())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                assert!(worst <= 1.0 / 65535.0 + 1e-7, "{worst}");
            }
        }
    }
}
