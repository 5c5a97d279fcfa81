//! Grayscale slice with the mask outline drawn on top, as 8-bit RGB.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume_io::ImageVolume;

pub const CONTOUR_RGB: [u8; 3] = [255, 0, 0];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Maps an image pixel to a voxel index for a slice normal to `axis`.
///
/// Axis 2 shows (x, y); axes 0 and 1 show z upwards.
fn slice_layout(dims: [usize; 3], axis: usize) -> (usize, usize, impl Fn(usize, usize, usize) -> [usize; 3]) {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let flip = axis != 2;
    let map = move |x: usize, y: usize, index: usize| {
        let mut c = [0usize; 3];
        c[axis] = index;
        c[u] = x;
        c[v] = if flip { h - 1 - y } else { y };
        c
    };
    (w, h, map)
}

/// Slice `index` normal to `axis` of `vol`, windowed to `[lo, hi]`, with the
/// boundary of `mask` painted in [`CONTOUR_RGB`].
pub fn render_overlay(
    vol: &ImageVolume,
    mask: &ImageVolume,
    axis: usize,
    index: usize,
    window: (f64, f64),
) -> Result<RgbImage> {
    if !mask.is_mask() {
        return Err(Error::NotAMask);
    }
    if !mask.geometry().approx_eq(vol.geometry(), 1e-6) {
        return Err(Error::GeometryMismatch("overlay mask grid differs from volume".into()));
    }
    if axis > 2 {
        return Err(Error::IndexOutOfRange { index: axis, len: 3 });
    }
    let dims = vol.dims();
    if index >= dims[axis] {
        return Err(Error::IndexOutOfRange {
            index,
            len: dims[axis],
        });
    }
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let (w, h, at) = slice_layout(dims, axis);
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && {
            let c = at(x as usize, y as usize, index);
            mask.get(c[0], c[1], c[2]) > 0.5
        }
    };
    let mut pixels = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let edge = inside(xi, yi)
                && !(inside(xi - 1, yi) && inside(xi + 1, yi) && inside(xi, yi - 1) && inside(xi, yi + 1));
            if edge {
                pixels.extend_from_slice(&CONTOUR_RGB);
            } else {
                let c = at(x, y, index);
                let t = ((vol.get(c[0], c[1], c[2]) - lo) / (hi - lo)).clamp(0.0, 1.0);
                let g = (t * 255.0).round() as u8;
                pixels.extend_from_slice(&[g, g, g]);
            }
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&img.pixels).map_err(io)?;
    writer.finish().map_err(io)
}
