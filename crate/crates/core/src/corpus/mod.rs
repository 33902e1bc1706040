//! Corpus domain types: acquisition profiles, frames, contour annotations
//! and the binary mask triples derived from them.
//!
//! Coordinates use the raster convention throughout the crate: the origin is
//! the centre of the top-left pixel, `x` grows rightward and `y` downward, so
//! pixel `(i, j)` has its centre at `(i as f64, j as f64)`.

mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Image, Mask};

pub use store::{
    load_corpus, load_mask_png, quantize_intensity, read_annotation, save_corpus, save_mask_png,
    write_annotation, Manifest, ManifestFrame, ManifestSubject, ManifestVideo,
};

/// Annotation coordinates are stored with this many decimal places.
pub const COORD_DECIMALS: i32 = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path} at {pointer}: {message}")]
    Json {
        path: PathBuf,
        pointer: String,
        message: String,
    },
    #[error("bad image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> CorpusError {
    CorpusError::Validation(msg.into())
}

/// Round a coordinate to the stored annotation precision.
pub fn quantize_coord(v: f64) -> f64 {
    let scale = 10f64.powi(COORD_DECIMALS);
    (v * scale).round() / scale
}

/// Acquisition parameters distinguishing one corpus from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub name: String,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Millimetres per pixel.
    pub pixel_spacing: f64,
    /// Native frames per second.
    pub frame_rate: f64,
    /// Every `subsample_stride`-th native frame is kept.
    pub subsample_stride: u32,
}

impl CorpusProfile {
    /// 68×68 at 2.9 mm, 23.18 fps, every frame kept.
    pub fn corpus_a() -> Self {
        Self {
            name: "corpusA".into(),
            frame_width: 68,
            frame_height: 68,
            pixel_spacing: 2.9,
            frame_rate: 23.18,
            subsample_stride: 1,
        }
    }

    /// 84×84 at 2.4 mm, 83.277 fps, one frame in four kept.
    pub fn corpus_b() -> Self {
        Self {
            name: "corpusB".into(),
            frame_width: 84,
            frame_height: 84,
            pixel_spacing: 2.4,
            frame_rate: 83.277,
            subsample_stride: 4,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.frame_width < 16 || self.frame_height < 16 {
            return Err(invalid(format!(
                "profile {}: frame size {}x{} below 16x16",
                self.name, self.frame_width, self.frame_height
            )));
        }
        // Written so that NaN is rejected too.
        if !(self.pixel_spacing > 0.0 && self.frame_rate > 0.0) {
            return Err(invalid(format!(
                "profile {}: pixel spacing and frame rate must be positive",
                self.name
            )));
        }
        if self.subsample_stride < 1 {
            return Err(invalid(format!(
                "profile {}: stride must be >= 1",
                self.name
            )));
        }
        let fixed = match self.name.as_str() {
            "corpusA" => Some(Self::corpus_a()),
            "corpusB" => Some(Self::corpus_b()),
            _ => None,
        };
        if let Some(fixed) = fixed {
            if *self != fixed {
                return Err(invalid(format!(
                    "profile {} does not match its fixed acquisition parameters",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Subject identifier such as `F5` or `M6`: one or more ASCII letters
/// followed by one or more digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SubjectId(String);

impl SubjectId {
    pub fn new(id: &str) -> Result<Self, CorpusError> {
        let letters = id.chars().take_while(|c| c.is_ascii_alphabetic()).count();
        let rest = &id[letters..];
        if letters == 0 || rest.is_empty() || !rest.chars().all(|c| c.is_ascii_digit()) {
            return Err(invalid(format!(
                "subject id {id:?} must be letters followed by digits"
            )));
        }
        Ok(Self(id.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Letter prefix, e.g. `F` for `F12`.
    pub fn prefix(&self) -> &str {
        let n = self
            .0
            .chars()
            .take_while(|c| c.is_ascii_alphabetic())
            .count();
        &self.0[..n]
    }

    /// Digit suffix, e.g. `12` for `F12`.
    pub fn number(&self) -> &str {
        &self.0[self.prefix().len()..]
    }
}

impl TryFrom<String> for SubjectId {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        SubjectId::new(&s)
    }
}

impl From<SubjectId> for String {
    fn from(id: SubjectId) -> Self {
        id.0
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: SubjectId,
    /// Name of the owning [`CorpusProfile`].
    pub corpus: String,
}

/// One grayscale rtMRI image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Image,
    pub subject: SubjectId,
    /// 1-based.
    pub video_index: u32,
    /// 1-based position in the native (unsubsampled) video.
    pub frame_index: u32,
}

impl Frame {
    pub fn validate(&self, profile: &CorpusProfile) -> Result<(), CorpusError> {
        if self.pixels.dims() != (profile.frame_width, profile.frame_height) {
            return Err(invalid(format!(
                "{} video {} frame {}: size {}x{} does not match profile {} ({}x{})",
                self.subject,
                self.video_index,
                self.frame_index,
                self.pixels.width(),
                self.pixels.height(),
                profile.name,
                profile.frame_width,
                profile.frame_height
            )));
        }
        if let Some(v) = self
            .pixels
            .as_slice()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(invalid(format!(
                "{} video {} frame {}: intensity {v} outside [0, 1]",
                self.subject, self.video_index, self.frame_index
            )));
        }
        Ok(())
    }
}

/// Sub-pixel point, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn quantized(self) -> Self {
        Self::new(quantize_coord(self.x), quantize_coord(self.y))
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Ordered vertex list. Closed last-to-first when rasterized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polyline(pub Vec<Point>);

impl Polyline {
    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Signed shoelace area of the closed polygon (positive when the vertex
    /// order is clockwise on screen, i.e. counter-clockwise in y-up axes).
    pub fn signed_area(&self) -> f64 {
        let pts = &self.0;
        let n = pts.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

/// Anatomical landmarks marked on every annotated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Landmark {
    /// Glottis beginning.
    #[serde(rename = "GLTB")]
    GlottisBeginning,
    #[serde(rename = "TB")]
    TongueBase,
    #[serde(rename = "VEL")]
    Velum,
    #[serde(rename = "LL")]
    LowerLip,
    #[serde(rename = "UL")]
    UpperLip,
}

impl Landmark {
    pub const ALL: [Landmark; 5] = [
        Landmark::GlottisBeginning,
        Landmark::TongueBase,
        Landmark::Velum,
        Landmark::LowerLip,
        Landmark::UpperLip,
    ];
}

/// Which of the three annotated contours (and the mask derived from it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContourId {
    C1,
    C2,
    C3,
}

impl ContourId {
    pub const ALL: [ContourId; 3] = [ContourId::C1, ContourId::C2, ContourId::C3];

    /// 1-based mask number.
    pub fn mask_number(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for ContourId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.mask_number())
    }
}

/// The per-frame annotation: three contours plus five landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSet {
    pub c1: Polyline,
    pub c2: Polyline,
    pub c3: Polyline,
    pub landmarks: BTreeMap<Landmark, Point>,
}

impl ContourSet {
    pub fn contour(&self, id: ContourId) -> &Polyline {
        match id {
            ContourId::C1 => &self.c1,
            ContourId::C2 => &self.c2,
            ContourId::C3 => &self.c3,
        }
    }

    /// Round every coordinate to the stored annotation precision.
    pub fn quantized(&self) -> Self {
        let q = |p: &Polyline| Polyline(p.0.iter().map(|pt| pt.quantized()).collect());
        Self {
            c1: q(&self.c1),
            c2: q(&self.c2),
            c3: q(&self.c3),
            landmarks: self
                .landmarks
                .iter()
                .map(|(k, v)| (*k, v.quantized()))
                .collect(),
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), CorpusError> {
        let in_bounds =
            |p: &Point| p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
        for id in ContourId::ALL {
            let line = self.contour(id);
            if line.len() < 3 {
                return Err(invalid(format!(
                    "contour {id} has {} vertices, need at least 3",
                    line.len()
                )));
            }
            if let Some(p) = line.points().iter().find(|p| !in_bounds(p)) {
                return Err(invalid(format!(
                    "contour {id} vertex ({}, {}) outside {width}x{height}",
                    p.x, p.y
                )));
            }
        }
        for lm in Landmark::ALL {
            match self.landmarks.get(&lm) {
                None => return Err(invalid(format!("landmark {lm:?} missing"))),
                Some(p) if !in_bounds(p) => {
                    return Err(invalid(format!("landmark {lm:?} outside frame")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Three binary training targets derived from contours c1, c2, c3.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriple {
    pub m1: Mask,
    pub m2: Mask,
    pub m3: Mask,
}

impl MaskTriple {
    pub fn new(m1: Mask, m2: Mask, m3: Mask) -> Result<Self, CorpusError> {
        if m1.dims() != m2.dims() || m1.dims() != m3.dims() {
            return Err(invalid("mask triple dimensions differ"));
        }
        for m in [&m1, &m2, &m3] {
            if m.as_slice().iter().any(|&v| v > 1) {
                return Err(invalid("mask values must be 0 or 1"));
            }
        }
        Ok(Self { m1, m2, m3 })
    }

    pub fn get(&self, id: ContourId) -> &Mask {
        match id {
            ContourId::C1 => &self.m1,
            ContourId::C2 => &self.m2,
            ContourId::C3 => &self.m3,
        }
    }

    pub fn as_array(&self) -> [&Mask; 3] {
        [&self.m1, &self.m2, &self.m3]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.m1.dims()
    }
}

/// One annotated video: frames with parallel contour annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub subject: SubjectId,
    pub video_index: u32,
    pub frames: Vec<Frame>,
    pub annotations: Vec<ContourSet>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, profile: &CorpusProfile) -> Result<(), CorpusError> {
        if self.frames.is_empty() {
            return Err(invalid(format!(
                "{} video {}: no frames",
                self.subject, self.video_index
            )));
        }
        if self.frames.len() != self.annotations.len() {
            return Err(invalid(format!(
                "{} video {}: {} frames but {} annotations",
                self.subject,
                self.video_index,
                self.frames.len(),
                self.annotations.len()
            )));
        }
        let mut prev = 0;
        for (frame, ann) in self.frames.iter().zip(&self.annotations) {
            if frame.subject != self.subject || frame.video_index != self.video_index {
                return Err(invalid(format!(
                    "{} video {}: frame provenance mismatch",
                    self.subject, self.video_index
                )));
            }
            if frame.frame_index <= prev {
                return Err(invalid(format!(
                    "{} video {}: frame indices not strictly increasing",
                    self.subject, self.video_index
                )));
            }
            prev = frame.frame_index;
            frame.validate(profile)?;
            ann.validate(profile.frame_width, profile.frame_height)
                .map_err(|e| {
                    invalid(format!(
                        "{} video {} frame {}: {e}",
                        self.subject, self.video_index, frame.frame_index
                    ))
                })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectVideos {
    pub subject: Subject,
    /// Ordered by video index.
    pub videos: Vec<VideoClip>,
}

/// A validated, immutable corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub profile: CorpusProfile,
    pub subjects: Vec<SubjectVideos>,
}

impl Corpus {
    pub fn new(profile: CorpusProfile, subjects: Vec<SubjectVideos>) -> Result<Self, CorpusError> {
        let corpus = Self { profile, subjects };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.profile.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.subject.id.clone()) {
                return Err(invalid(format!("duplicate subject {}", s.subject.id)));
            }
            if s.subject.corpus != self.profile.name {
                return Err(invalid(format!(
                    "subject {} belongs to corpus {}, not {}",
                    s.subject.id, s.subject.corpus, self.profile.name
                )));
            }
            for clip in &s.videos {
                if clip.subject != s.subject.id {
                    return Err(invalid(format!(
                        "clip of {} filed under {}",
                        clip.subject, s.subject.id
                    )));
                }
                clip.validate(&self.profile)?;
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectVideos> {
        self.subjects.iter().find(|s| s.subject.id.as_str() == id)
    }

    pub fn clip(&self, id: &str, video_index: u32) -> Option<&VideoClip> {
        self.subject(id)?
            .videos
            .iter()
            .find(|v| v.video_index == video_index)
    }

    pub fn frame_count(&self) -> usize {
        self.subjects
            .iter()
            .flat_map(|s| &s.videos)
            .map(VideoClip::len)
            .sum()
    }
}
