//! On-disk corpus layout: a manifest JSON, one 16-bit grayscale PNG per
//! frame and one annotation JSON per frame.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<subject>/v<video>/f<frame>.png
//! <dir>/<subject>/v<video>/f<frame>.json
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    invalid, ContourSet, Corpus, CorpusError, CorpusProfile, Frame, Subject, SubjectId,
    SubjectVideos, VideoClip,
};
use crate::fsutil::{from_json_slice, to_json_pretty};
use crate::grid::{Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub profile: CorpusProfile,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: SubjectId,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub index: u32,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    /// Native frame index; defaults to the 1-based list position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u32>,
    /// Path relative to the manifest directory.
    pub image: String,
    pub annotation: String,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CorpusError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    from_json_slice(&bytes).map_err(|e| CorpusError::Json {
        path: path.to_path_buf(),
        pointer: e.pointer,
        message: e.message,
    })
}

pub fn read_annotation(path: &Path) -> Result<ContourSet, CorpusError> {
    read_json(path)
}

/// Coordinates are rounded to the stored precision before writing.
pub fn write_annotation(path: &Path, cs: &ContourSet) -> Result<(), CorpusError> {
    fs::write(path, to_json_pretty(&cs.quantized())).map_err(|e| io_err(path, e))
}

/// Load and fully validate a corpus from its manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    let manifest: Manifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.profile.validate()?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for ms in &manifest.subjects {
        let mut videos = Vec::with_capacity(ms.videos.len());
        for mv in &ms.videos {
            let mut frames = Vec::with_capacity(mv.frames.len());
            let mut annotations = Vec::with_capacity(mv.frames.len());
            for (pos, mf) in mv.frames.iter().enumerate() {
                let pixels = read_gray_png(&root.join(&mf.image))?;
                annotations.push(read_annotation(&root.join(&mf.annotation))?);
                frames.push(Frame {
                    pixels,
                    subject: ms.id.clone(),
                    video_index: mv.index,
                    frame_index: mf.index.unwrap_or(pos as u32 + 1),
                });
            }
            videos.push(VideoClip {
                subject: ms.id.clone(),
                video_index: mv.index,
                frames,
                annotations,
            });
        }
        subjects.push(SubjectVideos {
            subject: Subject {
                id: ms.id.clone(),
                corpus: manifest.profile.name.clone(),
            },
            videos,
        });
    }
    Corpus::new(manifest.profile, subjects)
}

fn frame_stem(clip: &VideoClip, frame: &Frame) -> PathBuf {
    PathBuf::from(clip.subject.as_str())
        .join(format!("v{:02}", clip.video_index))
        .join(format!("f{:04}", frame.frame_index))
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Write the corpus under `dir` and return the manifest path. Output bytes
/// are a pure function of the corpus contents.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut subjects = Vec::with_capacity(corpus.subjects.len());
    for s in &corpus.subjects {
        let mut videos = Vec::with_capacity(s.videos.len());
        for clip in &s.videos {
            let mut frames = Vec::with_capacity(clip.len());
            for (frame, ann) in clip.frames.iter().zip(&clip.annotations) {
                let stem = frame_stem(clip, frame);
                let image = stem.with_extension("png");
                let annotation = stem.with_extension("json");
                let abs_image = dir.join(&image);
                if let Some(parent) = abs_image.parent() {
                    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
                }
                write_gray16_png(&abs_image, &frame.pixels)?;
                write_annotation(&dir.join(&annotation), ann)?;
                frames.push(ManifestFrame {
                    index: Some(frame.frame_index),
                    image: rel_string(&image),
                    annotation: rel_string(&annotation),
                });
            }
            videos.push(ManifestVideo {
                index: clip.video_index,
                frames,
            });
        }
        subjects.push(ManifestSubject {
            id: s.subject.id.clone(),
            videos,
        });
    }
    let manifest = Manifest {
        profile: corpus.profile.clone(),
        subjects,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, to_json_pretty(&manifest)).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Snap an intensity to the 16-bit storage grid so that a save/load cycle
/// reproduces it exactly.
pub fn quantize_intensity(v: f32) -> f32 {
    f32::from(to_u16(v)) / 65535.0
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let img_err = |e: png::EncodingError| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

fn write_gray16_png(path: &Path, img: &Image) -> Result<(), CorpusError> {
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .flat_map(|&v| to_u16(v).to_be_bytes())
        .collect();
    write_png(
        path,
        img.width(),
        img.height(),
        png::BitDepth::Sixteen,
        &bytes,
    )
}

/// Masks are stored as 8-bit PNG with tissue = 255.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<(), CorpusError> {
    let bytes: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn load_mask_png(path: &Path) -> Result<Mask, CorpusError> {
    let img = read_gray_png(path)?;
    Ok(img.map(|&v| u8::from(v >= 0.5)))
}

/// Decode an 8- or 16-bit grayscale PNG into `[0, 1]` intensities, dividing
/// by the largest value representable at the stored depth.
fn read_gray_png(path: &Path) -> Result<Image, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let img_err = |message: String| CorpusError::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(img_err(format!(
            "expected grayscale, got {:?}",
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| f32::from(v) / 255.0).collect(),
        d => return Err(img_err(format!("unsupported bit depth {d:?}"))),
    };
    Image::from_vec(w, h, data).ok_or_else(|| invalid(format!("{}: truncated", path.display())))
}
