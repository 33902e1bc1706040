//! Synthetic vocal-tract phantoms with exact ground truth.
//!
//! Each subject is three tissue blobs in normalized coordinates: a wide
//! band along the top of the frame (c1), a rounded mass in the lower left
//! (c2) and a tall strip along the right side (c3). Subjects differ by seeded
//! offsets, scales and per-vertex jitter; frames within a clip differ by
//! smooth sinusoidal vertex motion.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    quantize_intensity, save_corpus, ContourSet, Corpus, CorpusError, CorpusProfile, Frame,
    Landmark, Point, Polyline, Subject, SubjectId, SubjectVideos, VideoClip,
};
use crate::grid::{Image, Mask};
use crate::rasterize::masks_from_contours;
use crate::seeds::{derive_seed, rng_for, tag};

/// Default sinusoidal displacement, as a fraction of the image width.
pub const DEFAULT_AMPLITUDE: f64 = 0.03;

/// Frames per clip in the same-corpus benchmark.
pub const SUITE_A_FRAMES: usize = 40;
pub const SUITE_A_SUBJECTS: usize = 6;
pub const SUITE_A_VIDEOS: u32 = 15;
/// Clip lengths of the cross-corpus benchmark.
pub const SUITE_B_FRAMES: [usize; 2] = [91, 69];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub tissue_mean: f64,
    pub air_mean: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomAnatomy {
    pub subject_seed: u64,
    /// One simple polygon per contour, coordinates in `[0, 1]²`.
    pub control_points: [Vec<(f64, f64)>; 3],
    pub intensity: IntensityParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Fraction of the image width, in `[0, 0.1]`.
    pub amplitude: f64,
    /// Native frames per cycle, `> 1`.
    pub period: f64,
    pub phase_seed: u64,
}

impl MotionSpec {
    pub fn still() -> Self {
        Self {
            amplitude: 0.0,
            period: 2.0,
            phase_seed: 0,
        }
    }

    fn validate(&self) {
        assert!(
            (0.0..=0.1).contains(&self.amplitude),
            "motion amplitude outside [0, 0.1]"
        );
        assert!(self.period > 1.0, "motion period must exceed one frame");
    }
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    fn orient(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    }
    fn within(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> bool {
        r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
    }
    let (o1, o2, o3, o4) = (
        orient(a, b, c),
        orient(a, b, d),
        orient(c, d, a),
        orient(c, d, b),
    );
    if (o1 > 0.0) != (o2 > 0.0)
        && (o3 > 0.0) != (o4 > 0.0)
        && o1 != 0.0
        && o2 != 0.0
        && o3 != 0.0
        && o4 != 0.0
    {
        return true;
    }
    (o1 == 0.0 && within(a, b, c))
        || (o2 == 0.0 && within(a, b, d))
        || (o3 == 0.0 && within(c, d, a))
        || (o4 == 0.0 && within(c, d, b))
}

/// No two non-adjacent edges of the closed polygon touch.
pub fn is_simple_polygon(pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

const BLOB_VERTICES: usize = 18;

/// Rotated ellipse with per-vertex radial jitter.
fn blob(
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    n: usize,
    jitter: impl Fn(usize) -> f64,
) -> Vec<(f64, f64)> {
    let (sin, cos) = angle.sin_cos();
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            let r = 1.0 + jitter(i);
            let (ex, ey) = (rx * r * t.cos(), ry * r * t.sin());
            (cx + ex * cos - ey * sin, cy + ex * sin + ey * cos)
        })
        .collect()
}

/// Deterministic anatomy for `seed`.
pub fn generate_subject(seed: u64) -> PhantomAnatomy {
    let mut attempt = 0u64;
    loop {
        let mut rng = rng_for(&[tag("phantom-subject"), seed, attempt]);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

        let (ox, oy) = (u(-0.03, 0.03), u(-0.03, 0.03));
        let scale = u(0.94, 1.06);
        let place = |(x, y): (f64, f64)| -> (f64, f64) {
            let (cx, cy) = (0.5, 0.5);
            (
                (cx + (x - cx) * scale + ox).clamp(0.01, 0.99),
                (cy + (y - cy) * scale + oy).clamp(0.01, 0.99),
            )
        };

        let mut jit = Vec::new();
        for _ in 0..3 * BLOB_VERTICES {
            jit.push(u(-1.0, 1.0));
        }
        let mut shape =
            |k: usize, centre: (f64, f64), radii: (f64, f64), tilt: f64| -> Vec<(f64, f64)> {
                let (cx, cy) = (centre.0 + u(-0.02, 0.02), centre.1 + u(-0.02, 0.02));
                let (rx, ry) = (radii.0 * u(0.93, 1.07), radii.1 * u(0.93, 1.07));
                let angle = tilt + u(-0.08, 0.08);
                let j = &jit[k * BLOB_VERTICES..(k + 1) * BLOB_VERTICES];
                blob(cx, cy, rx, ry, angle, BLOB_VERTICES, |i| 0.04 * j[i])
                    .into_iter()
                    .map(place)
                    .collect()
            };
        // Upper band, lower-left round body, tall right-hand strip.
        let c1 = shape(0, (0.48, 0.18), (0.37, 0.12), 0.05);
        let c2 = shape(1, (0.36, 0.67), (0.21, 0.16), -0.2);
        let c3 = shape(2, (0.80, 0.64), (0.12, 0.25), 0.1);

        let intensity = IntensityParams {
            tissue_mean: u(0.65, 0.80),
            air_mean: u(0.08, 0.18),
            noise_sigma: u(0.02, 0.05),
        };
        let control_points = [c1, c2, c3];
        let ok = control_points
            .iter()
            .all(|p| p.len() >= 6 && is_simple_polygon(p) && polygon_area(p) >= 0.05);
        if ok {
            return PhantomAnatomy {
                subject_seed: seed,
                control_points,
                intensity,
            };
        }
        attempt += 1;
    }
}

/// Normalized control points at native time `t`.
fn displaced(anatomy: &PhantomAnatomy, motion: &MotionSpec, t: f64) -> [Vec<(f64, f64)>; 3] {
    let mut rng = rng_for(&[
        tag("phantom-motion"),
        anatomy.subject_seed,
        motion.phase_seed,
    ]);
    let mut out: [Vec<(f64, f64)>; 3] = Default::default();
    for (j, pts) in anatomy.control_points.iter().enumerate() {
        let direction = rng.random_range(0.0..TAU);
        let phase = rng.random_range(0.0..TAU);
        // The tongue (c2) moves most, the fixed band (c1) least.
        let weight = [0.5, 1.0, 0.7][j];
        out[j] = pts
            .iter()
            .map(|&(x, y)| {
                let local = rng.random_range(-0.5..0.5);
                let s = (TAU * t / motion.period + phase + local).sin();
                let d = motion.amplitude * weight * s;
                (
                    (x + d * direction.cos()).clamp(0.0, 1.0),
                    (y + d * direction.sin()).clamp(0.0, 1.0),
                )
            })
            .collect();
    }
    out
}

fn to_pixels(pts: &[(f64, f64)], profile: &CorpusProfile) -> Polyline {
    let sx = (profile.frame_width - 1) as f64;
    let sy = (profile.frame_height - 1) as f64;
    Polyline(
        pts.iter()
            .map(|&(x, y)| Point::new(x * sx, y * sy).quantized())
            .collect(),
    )
}

fn landmarks(
    c1: &Polyline,
    c2: &Polyline,
    c3: &Polyline,
) -> std::collections::BTreeMap<Landmark, Point> {
    let pick = |line: &Polyline, key: &dyn Fn(&Point) -> f64| -> Point {
        *line
            .points()
            .iter()
            .max_by(|a, b| key(a).total_cmp(&key(b)))
            .expect("non-empty contour")
    };
    [
        (Landmark::GlottisBeginning, pick(c3, &|p| p.y)),
        (Landmark::TongueBase, pick(c2, &|p| p.x)),
        (Landmark::Velum, pick(c1, &|p| p.x + p.y)),
        (Landmark::LowerLip, pick(c2, &|p| -p.x)),
        (Landmark::UpperLip, pick(c1, &|p| p.y - p.x)),
    ]
    .into_iter()
    .collect()
}

/// Contours of the anatomy at native time `t`, in pixel coordinates.
pub fn contours_at(
    anatomy: &PhantomAnatomy,
    profile: &CorpusProfile,
    motion: &MotionSpec,
    t: f64,
) -> ContourSet {
    let [a, b, c] = displaced(anatomy, motion, t);
    let (c1, c2, c3) = (
        to_pixels(&a, profile),
        to_pixels(&b, profile),
        to_pixels(&c, profile),
    );
    let landmarks = landmarks(&c1, &c2, &c3);
    ContourSet {
        c1,
        c2,
        c3,
        landmarks,
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * f64::from(img.at(clampi(x as isize + k as isize - radius, w), y)))
            .sum::<f64>() as f32
    });
    Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| {
                wt * f64::from(horizontal.at(x, clampi(y as isize + k as isize - radius, h)))
            })
            .sum::<f64>() as f32
    })
}

/// Render one frame: air background, tissue inside the union of the three
/// masks, σ = 1 px blur, additive Gaussian noise, clamp, 16-bit quantization.
pub fn render(
    anatomy: &PhantomAnatomy,
    contours: &ContourSet,
    profile: &CorpusProfile,
    noise_seed: u64,
) -> Image {
    let (w, h) = (profile.frame_width, profile.frame_height);
    let masks = masks_from_contours(contours, w, h).expect("phantom contours are valid");
    let union = Mask::from_fn(w, h, |x, y| {
        masks.m1.at(x, y) | masks.m2.at(x, y) | masks.m3.at(x, y)
    });
    let p = anatomy.intensity;
    let clean = union.map(|&v| {
        if v == 1 {
            p.tissue_mean as f32
        } else {
            p.air_mean as f32
        }
    });
    let blurred = gaussian_blur(&clean, 1.0);
    let mut rng = rng_for(&[tag("phantom-noise"), noise_seed]);
    let noise = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
    blurred.map(|&v| quantize_intensity((f64::from(v) + noise.sample(&mut rng)) as f32))
}

/// Generate `n_frames` kept frames of one clip. Kept frame `i` is rendered at
/// native time `i · stride` and carries native index `i · stride + 1`.
pub fn generate_clip(
    anatomy: &PhantomAnatomy,
    profile: &CorpusProfile,
    subject: &SubjectId,
    video_index: u32,
    n_frames: usize,
    motion: &MotionSpec,
) -> VideoClip {
    assert!(n_frames >= 1, "a clip needs at least one frame");
    motion.validate();
    let stride = profile.subsample_stride;
    let still = motion.amplitude == 0.0;
    let mut frames = Vec::with_capacity(n_frames);
    let mut annotations = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let native = i as u32 * stride;
        let contours = contours_at(anatomy, profile, motion, f64::from(native));
        // A motionless clip is a single repeated frame.
        let noise_key = if still { 0 } else { u64::from(native) };
        let noise_seed = derive_seed(&[
            anatomy.subject_seed,
            u64::from(video_index),
            motion.phase_seed,
            noise_key,
        ]);
        let pixels = render(anatomy, &contours, profile, noise_seed);
        frames.push(Frame {
            pixels,
            subject: subject.clone(),
            video_index,
            frame_index: native + 1,
        });
        annotations.push(contours);
    }
    VideoClip {
        subject: subject.clone(),
        video_index,
        frames,
        annotations,
    }
}

/// Build a phantom corpus: `subjects` named `{prefix}1..`, each with one clip
/// per entry of `clip_frames`.
pub fn phantom_corpus(
    profile: CorpusProfile,
    master_seed: u64,
    prefix: &str,
    subjects: usize,
    clip_frames: &[usize],
) -> Corpus {
    let period_range = {
        let s = f64::from(profile.subsample_stride);
        (12.0 * s, 24.0 * s)
    };
    let subject_list = (1..=subjects)
        .map(|n| {
            let id = SubjectId::new(&format!("{prefix}{n}")).expect("valid id");
            let seed = derive_seed(&[master_seed, tag(&profile.name), tag(id.as_str())]);
            let anatomy = generate_subject(seed);
            let videos = clip_frames
                .iter()
                .enumerate()
                .map(|(v, &n_frames)| {
                    let video_index = v as u32 + 1;
                    let mut rng = rng_for(&[seed, tag("clip"), u64::from(video_index)]);
                    let motion = MotionSpec {
                        amplitude: DEFAULT_AMPLITUDE,
                        period: rng.random_range(period_range.0..period_range.1),
                        phase_seed: rng.random(),
                    };
                    generate_clip(&anatomy, &profile, &id, video_index, n_frames, &motion)
                })
                .collect();
            SubjectVideos {
                subject: Subject {
                    id,
                    corpus: profile.name.clone(),
                },
                videos,
            }
        })
        .collect();
    Corpus::new(profile, subject_list).expect("phantom corpora are valid by construction")
}

/// The two benchmark corpora: same-corpus (68×68, P1..P6, 15 clips of 40
/// frames) and cross-corpus (84×84, Q1..Q2, clips of 91 and 69 frames).
pub fn benchmark_suite(master_seed: u64) -> (Corpus, Corpus) {
    let a = phantom_corpus(
        CorpusProfile::corpus_a(),
        master_seed,
        "P",
        SUITE_A_SUBJECTS,
        &[SUITE_A_FRAMES; SUITE_A_VIDEOS as usize],
    );
    let b = phantom_corpus(
        CorpusProfile::corpus_b(),
        master_seed,
        "Q",
        2,
        &SUITE_B_FRAMES,
    );
    (a, b)
}

/// Write both benchmark corpora under `out_dir/phantomA` and
/// `out_dir/phantomB`; returns their manifest paths.
pub fn generate_benchmark_suite(
    out_dir: &Path,
    master_seed: u64,
) -> Result<(PathBuf, PathBuf), CorpusError> {
    let (a, b) = benchmark_suite(master_seed);
    let ma = save_corpus(&a, &out_dir.join("phantomA"))?;
    let mb = save_corpus(&b, &out_dir.join("phantomB"))?;
    Ok((ma, mb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterize::masks_from_contours;

    #[test]
    fn same_seed_same_anatomy() {
        assert_eq!(generate_subject(42), generate_subject(42));
    }

    #[test]
    fn seeds_give_different_anatomies() {
        let (a, b) = (generate_subject(1), generate_subject(2));
        let max_diff = a
            .control_points
            .iter()
            .zip(&b.control_points)
            .flat_map(|(p, q)| p.iter().zip(q))
            .map(|(p, q)| (p.0 - q.0).abs().max((p.1 - q.1).abs()))
            .fold(0.0, f64::max);
        assert!(max_diff > 0.01, "{max_diff}");
    }

    /// Independent O(n²) check: every pair of non-adjacent edges must be
    /// disjoint, tested via exact orientation signs.
    fn oracle_simple(pts: &[(f64, f64)]) -> bool {
        let n = pts.len();
        let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
            ((q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)).signum()
        };
        for i in 0..n {
            for j in 0..n {
                let gap = (j + n - i) % n;
                if gap <= 1 || gap == n - 1 {
                    continue;
                }
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                if sign(a, b, c) != sign(a, b, d) && sign(c, d, a) != sign(c, d, b) {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn anatomies_are_simple_and_large_enough() {
        for seed in 0..200 {
            let a = generate_subject(seed);
            for pts in &a.control_points {
                assert!(pts.len() >= 6);
                assert!(oracle_simple(pts), "seed {seed}");
                assert!(polygon_area(pts) >= 0.05, "seed {seed}");
            }
            let p = a.intensity;
            assert!(p.tissue_mean > p.air_mean && p.noise_sigma < 0.2);
        }
    }

    #[test]
    fn still_single_frame_matches_scaled_anatomy() {
        let anatomy = generate_subject(5);
        let profile = CorpusProfile::corpus_a();
        let id = SubjectId::new("P1").unwrap();
        let clip = generate_clip(&anatomy, &profile, &id, 1, 1, &MotionSpec::still());
        let expected = to_pixels(&anatomy.control_points[1], &profile);
        assert_eq!(clip.annotations[0].c2, expected);
        let expected = Point::new(
            anatomy.control_points[0][0].0 * 67.0,
            anatomy.control_points[0][0].1 * 67.0,
        )
        .quantized();
        assert_eq!(clip.annotations[0].c1.points()[0], expected);
    }

    #[test]
    fn still_clip_frames_are_identical() {
        let anatomy = generate_subject(9);
        let id = SubjectId::new("P1").unwrap();
        let clip = generate_clip(
            &anatomy,
            &CorpusProfile::corpus_a(),
            &id,
            3,
            5,
            &MotionSpec::still(),
        );
        for f in &clip.frames[1..] {
            assert_eq!(f.pixels, clip.frames[0].pixels);
        }
        let idx: Vec<u32> = clip.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, [1, 2, 3, 4, 5]);
    }

    #[test]
    fn subsampled_clip_uses_native_indices() {
        let anatomy = generate_subject(9);
        let id = SubjectId::new("Q1").unwrap();
        let motion = MotionSpec {
            amplitude: 0.03,
            period: 60.0,
            phase_seed: 3,
        };
        let clip = generate_clip(&anatomy, &CorpusProfile::corpus_b(), &id, 1, 4, &motion);
        let idx: Vec<u32> = clip.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, [1, 5, 9, 13]);
        assert_ne!(clip.annotations[0], clip.annotations[3]);
    }

    #[test]
    fn tissue_is_brighter_than_air() {
        let anatomy = generate_subject(77);
        let profile = CorpusProfile::corpus_a();
        let id = SubjectId::new("P1").unwrap();
        let motion = MotionSpec {
            amplitude: 0.03,
            period: 15.0,
            phase_seed: 11,
        };
        let clip = generate_clip(&anatomy, &profile, &id, 1, 6, &motion);
        let gap = anatomy.intensity.tissue_mean - anatomy.intensity.air_mean;
        for (frame, ann) in clip.frames.iter().zip(&clip.annotations) {
            let m = masks_from_contours(ann, 68, 68).unwrap();
            let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
            for y in 0..68 {
                for x in 0..68 {
                    let v = f64::from(frame.pixels.at(x, y));
                    if m.m1.at(x, y) | m.m2.at(x, y) | m.m3.at(x, y) == 1 {
                        sin += v;
                        nin += 1;
                    } else {
                        sout += v;
                        nout += 1;
                    }
                }
            }
            assert!(sin / nin as f64 - sout / nout as f64 >= 0.5 * gap);
        }
    }

    #[test]
    fn shoelace_area_matches_raster_area() {
        for seed in 0..20 {
            let anatomy = generate_subject(seed);
            let cs = contours_at(
                &anatomy,
                &CorpusProfile::corpus_a(),
                &MotionSpec::still(),
                0.0,
            );
            let masks = masks_from_contours(&cs, 68, 68).unwrap();
            for id in crate::corpus::ContourId::ALL {
                let area = cs.contour(id).area();
                assert!(area >= 100.0);
                let count = masks.get(id).count_ones() as f64;
                assert!(
                    (count - area).abs() <= 0.02 * area,
                    "seed {seed} {id}: {count} vs {area}"
                );
            }
        }
    }

    #[test]
    fn masks_are_disjoint() {
        let anatomy = generate_subject(3);
        let cs = contours_at(
            &anatomy,
            &CorpusProfile::corpus_a(),
            &MotionSpec::still(),
            0.0,
        );
        let m = masks_from_contours(&cs, 68, 68).unwrap();
        let overlap = (0..68 * 68)
            .filter(|&i| {
                let s = m.m1.as_slice()[i] + m.m2.as_slice()[i] + m.m3.as_slice()[i];
                s > 1
            })
            .count();
        assert_eq!(overlap, 0);
    }
}
