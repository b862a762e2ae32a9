//! Image containers, resolution bookkeeping and lane rasterization.
//!
//! Images are stored channel-major (`c, y, x`). Pixel `(row r, col c)` has its
//! center at the continuous coordinate `(x = c, y = r)`, matching how lane
//! annotations address columns and rows.

mod io;
mod raster;

pub use io::{load_image, load_label_map, save_image, save_label_map};
pub use raster::{rasterize_into, rasterize_lane, rasterize_lane_mask, LaneMask};

use lanegan_tensor::kernels::reflect_index;
use lanegan_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `[1, c, h, w]` tensor view of the image.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// First batch item of an NCHW tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let (_, c, h, w) = t.dims4();
        let data = t.data()[..c * h * w].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(h, w, c, data).expect("tensor dims are positive")
    }

    /// Mean Rec.601 luma in `[0, 1]`, treating stored values as `[-1, 1]`.
    pub fn mean_luminance(&self) -> f64 {
        let plane = self.height * self.width;
        let to01 = |v: f32| (v as f64 + 1.0) * 0.5;
        if self.channels < 3 {
            return self.data[..plane].iter().map(|&v| to01(v)).sum::<f64>() / plane as f64;
        }
        let (r, g, b) = (
            &self.data[..plane],
            &self.data[plane..2 * plane],
            &self.data[2 * plane..3 * plane],
        );
        (0..plane)
            .map(|i| 0.299 * to01(r[i]) + 0.587 * to01(g[i]) + 0.114 * to01(b[i]))
            .sum::<f64>()
            / plane as f64
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::filled(height, width, self.channels, 0.0);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }
}

/// Record of the padding applied before an encoder and of the feature-map
/// size in front of each downsampling stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub original_height: usize,
    pub original_width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub per_stage_dims: Vec<(usize, usize)>,
}

impl ScaleTrace {
    pub fn for_dims(height: usize, width: usize, multiple: usize) -> Self {
        let m = multiple.max(1);
        Self {
            original_height: height,
            original_width: width,
            pad_bottom: height.div_ceil(m) * m - height,
            pad_right: width.div_ceil(m) * m - width,
            per_stage_dims: Vec::new(),
        }
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (
            self.original_height + self.pad_bottom,
            self.original_width + self.pad_right,
        )
    }
}

/// Reflection-pads the bottom and right borders up to the next multiple.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> (Image, ScaleTrace) {
    let trace = ScaleTrace::for_dims(img.height, img.width, multiple);
    let (ph, pw) = trace.padded_dims();
    if (ph, pw) == img.dims() {
        return (img.clone(), trace);
    }
    let mut out = Image::filled(ph, pw, img.channels, 0.0);
    for c in 0..img.channels {
        for y in 0..ph {
            let sy = reflect_index(y as isize, img.height);
            for x in 0..pw {
                let sx = reflect_index(x as isize, img.width);
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    (out, trace)
}

/// Undoes [`pad_to_multiple`] by keeping the top-left original region.
pub fn crop_to_trace(img: &Image, trace: &ScaleTrace) -> Result<Image> {
    if img.dims() != trace.padded_dims() {
        return Err(Error::contract(format!(
            "image is {}x{} but trace expects {}x{} (original {}x{} + pads {},{})",
            img.height,
            img.width,
            trace.padded_dims().0,
            trace.padded_dims().1,
            trace.original_height,
            trace.original_width,
            trace.pad_bottom,
            trace.pad_right
        )));
    }
    let (h, w) = (trace.original_height, trace.original_width);
    let mut out = Image::filled(h, w, img.channels, 0.0);
    for c in 0..img.channels {
        for y in 0..h {
            let src = (c * img.height + y) * img.width;
            let dst = (c * h + y) * w;
            out.data[dst..dst + w].copy_from_slice(&img.data[src..src + w]);
        }
    }
    Ok(out)
}

/// An ordered lane polyline; `y` is strictly monotone along the points.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
}

impl Polyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::contract("polyline coordinates must be finite"));
        }
        if points.len() >= 2 {
            let increasing = points[1].1 > points[0].1;
            let monotone = points.windows(2).all(|w| {
                if increasing {
                    w[1].1 > w[0].1
                } else {
                    w[1].1 < w[0].1
                }
            });
            if !monotone {
                return Err(Error::contract("polyline rows must be strictly monotone"));
            }
        }
        Ok(Self { points })
    }

    /// Builds a stroke without the row-monotone check, e.g. a horizontal
    /// segment used as a geometric fixture. Coordinates must still be finite.
    pub fn new_unchecked(points: Vec<(f64, f64)>) -> Self {
        debug_assert!(points.iter().all(|(x, y)| x.is_finite() && y.is_finite()));
        Self { points }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    /// Same polyline ordered by increasing `y`.
    pub fn sorted_by_row(&self) -> Self {
        if self.points.len() >= 2 && self.points[0].1 > self.points[1].1 {
            self.reversed()
        } else {
            self.clone()
        }
    }

    /// Multiplies every coordinate, e.g. to map between resolutions.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
        }
    }
}
