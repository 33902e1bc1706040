//! Contour-to-mask rasterization and cross-resolution resampling.
//!
//! Polygons are filled with the even-odd rule sampled at pixel centres.
//! Open polylines are closed last-to-first, and a centre lying exactly on an
//! edge counts as inside.

use thiserror::Error;

use crate::corpus::{ContourId, ContourSet, MaskTriple, Point, Polyline};
use crate::grid::{Image, Mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("degenerate contour: {vertices} vertices, need at least 3")]
    Degenerate { vertices: usize },
    #[error("vertex ({x}, {y}) outside {width}x{height} raster")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("contour {id}: {source}")]
    Contour {
        id: ContourId,
        #[source]
        source: Box<RasterError>,
    },
    #[error("target size {width}x{height} below 16x16")]
    TargetTooSmall { width: usize, height: usize },
}

/// `true` when `p` lies on the closed segment `a`–`b`.
fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    cross == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Rasterize a closed polygon onto a `width`×`height` grid.
pub fn contour_to_mask(
    polyline: &Polyline,
    width: usize,
    height: usize,
) -> Result<Mask, RasterError> {
    let pts = polyline.points();
    if pts.len() < 3 {
        return Err(RasterError::Degenerate {
            vertices: pts.len(),
        });
    }
    if let Some(p) = pts
        .iter()
        .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64))
    {
        return Err(RasterError::OutOfBounds {
            x: p.x,
            y: p.y,
            width,
            height,
        });
    }

    let n = pts.len();
    let mut mask = Mask::filled(width, height, 0);
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    let (ymin, ymax) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.y), hi.max(p.y))
        });
    let row_lo = ymin.ceil().max(0.0) as usize;
    let row_hi = (ymax.floor() as usize).min(height - 1);

    // Scanline pass: a centre is inside iff an odd number of edge crossings
    // lie strictly to its right.
    for row in row_lo..=row_hi {
        let py = row as f64;
        crossings.clear();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            if (a.y > py) != (b.y > py) {
                crossings.push((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
            }
        }
        crossings.sort_by(f64::total_cmp);
        let out = &mut mask.as_mut_slice()[row * width..(row + 1) * width];
        for span in crossings.chunks_exact(2) {
            let lo = span[0].max(0.0).ceil() as usize;
            let hi = span[1];
            let mut col = lo;
            while col < width && (col as f64) < hi {
                out[col] = 1;
                col += 1;
            }
        }
    }

    // Boundary pass: centres exactly on an edge are inside.
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let x0 = a.x.min(b.x).ceil() as usize;
        let x1 = (a.x.max(b.x).floor() as usize).min(width - 1);
        let y0 = a.y.min(b.y).ceil() as usize;
        let y1 = (a.y.max(b.y).floor() as usize).min(height - 1);
        for row in y0..=y1 {
            for col in x0..=x1 {
                if on_segment(Point::new(col as f64, row as f64), a, b) {
                    mask.set(col, row, 1);
                }
            }
        }
    }
    Ok(mask)
}

/// Rasterize all three contours of an annotation.
pub fn masks_from_contours(
    cs: &ContourSet,
    width: usize,
    height: usize,
) -> Result<MaskTriple, RasterError> {
    let raster = |id: ContourId| {
        contour_to_mask(cs.contour(id), width, height).map_err(|e| RasterError::Contour {
            id,
            source: Box::new(e),
        })
    };
    Ok(MaskTriple {
        m1: raster(ContourId::C1)?,
        m2: raster(ContourId::C2)?,
        m3: raster(ContourId::C3)?,
    })
}

fn check_target(width: usize, height: usize) -> Result<(), RasterError> {
    if width < 16 || height < 16 {
        return Err(RasterError::TargetTooSmall { width, height });
    }
    Ok(())
}

/// Source coordinate of destination pixel centre `d` under centre-aligned
/// scaling, clamped to the source extent.
fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    let s = (d as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
    s.clamp(0.0, (src - 1) as f64)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resampling with centre-aligned pixel grids.
pub fn resize_frame(
    frame: &Image,
    target_width: usize,
    target_height: usize,
) -> Result<Image, RasterError> {
    check_target(target_width, target_height)?;
    let (sw, sh) = frame.dims();
    if (sw, sh) == (target_width, target_height) {
        return Ok(frame.clone());
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        (0..dst)
            .map(|d| {
                let s = source_coord(d, src, dst);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(target_width, sw);
    let ys = taps(target_height, sh);
    Ok(Image::from_fn(target_width, target_height, |x, y| {
        let (x0, x1, tx) = xs[x];
        let (y0, y1, ty) = ys[y];
        let top = lerp(frame.at(x0, y0), frame.at(x1, y0), tx);
        let bottom = lerp(frame.at(x0, y1), frame.at(x1, y1), tx);
        lerp(top, bottom, ty).clamp(0.0, 1.0)
    }))
}

/// Nearest source index for destination index `d`, ties resolved toward the
/// lower index. Exact integer arithmetic: the source coordinate is
/// `((2d + 1)·src − dst) / (2·dst)` and we take `ceil(coord − 1/2)`.
fn nearest_index(d: usize, src: usize, dst: usize) -> usize {
    let num = (2 * d as i64 + 1) * src as i64 - 2 * dst as i64;
    let den = 2 * dst as i64;
    let idx = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
    idx.clamp(0, src as i64 - 1) as usize
}

/// Nearest-neighbour resampling; output stays binary.
pub fn resize_mask(
    mask: &Mask,
    target_width: usize,
    target_height: usize,
) -> Result<Mask, RasterError> {
    check_target(target_width, target_height)?;
    let (sw, sh) = mask.dims();
    let xs: Vec<usize> = (0..target_width)
        .map(|d| nearest_index(d, sw, target_width))
        .collect();
    let ys: Vec<usize> = (0..target_height)
        .map(|d| nearest_index(d, sh, target_height))
        .collect();
    Ok(Mask::from_fn(target_width, target_height, |x, y| {
        u8::from(mask.at(xs[x], ys[y]) != 0)
    }))
}

/// Resize every mask of a triple.
pub fn resize_masks(
    masks: &MaskTriple,
    width: usize,
    height: usize,
) -> Result<MaskTriple, RasterError> {
    Ok(MaskTriple {
        m1: resize_mask(&masks.m1, width, height)?,
        m2: resize_mask(&masks.m2, width, height)?,
        m3: resize_mask(&masks.m3, width, height)?,
    })
}
