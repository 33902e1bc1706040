//! Fixtures shared by the kernel benchmarks.

use atbseg::corpus::{ContourSet, CorpusProfile, MaskTriple};
use atbseg::phantom::phantom_corpus;
use atbseg::{Architecture, Image, ModelConfig, SegModel};

pub struct Fixture {
    pub images: Vec<Image>,
    pub contours: Vec<ContourSet>,
    pub masks: Vec<MaskTriple>,
}

/// `frames` phantom frames of one clip at `size`×`size`.
pub fn fixture(size: usize, frames: usize) -> Fixture {
    let profile = CorpusProfile {
        name: "bench".into(),
        frame_width: size,
        frame_height: size,
        pixel_spacing: 1.0,
        frame_rate: 25.0,
        subsample_stride: 1,
    };
    let corpus = phantom_corpus(profile, 1, "B", 1, &[frames]);
    let clip = &corpus.subjects[0].videos[0];
    let masks = clip
        .annotations
        .iter()
        .map(|c| {
            atbseg::rasterize::masks_from_contours(c, size, size)
                .expect("phantom contours rasterize")
        })
        .collect();
    Fixture {
        images: clip.frames.iter().map(|f| f.pixels.clone()).collect(),
        contours: clip.annotations.clone(),
        masks,
    }
}

pub fn model(variant: Architecture, size: usize) -> SegModel<f32> {
    let config = ModelConfig::new(variant, size, size)
        .with_stages(2)
        .with_base_channels(8)
        .with_seed(1);
    SegModel::new(config).expect("valid bench model")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = fixture(32, 3);
        assert_eq!(f.images.len(), 3);
        assert_eq!(f.masks.len(), 3);
        assert_eq!(f.images[0].dims(), (32, 32));
        let m = model(Architecture::UnetStyle, 32);
        assert_eq!(m.forward(&f.images[..1]).unwrap().len(), 1);
    }
}
