use image::{Rgb, RgbImage};

use super::FrameError;
use crate::Tensor;

/// Side length of network inputs.
pub const OUTPUT_SIZE: usize = 150;

const CROP_W: u32 = 480;
const CROP_H: u32 = 360;

/// Column range left after stripping symmetric side borders down to 4:3.
fn strip_borders(width: u32, height: u32) -> (u32, u32) {
    let target = height * 4 / 3;
    if width > target {
        ((width - target) / 2, target)
    } else {
        (0, width)
    }
}

/// Border strip, central crop to 480x360, bilinear resize to 150x150 and
/// scaling to [0, 1]. Returns a `[150, 150, 3]` tensor.
pub fn preprocess(frame: &RgbImage) -> Result<Tensor<f32>, FrameError> {
    let (w, h) = frame.dimensions();
    let (x_strip, w_strip) = strip_borders(w, h);
    if w_strip < CROP_W || h < CROP_H {
        return Err(FrameError::TooSmall {
            width: w_strip,
            height: h,
        });
    }
    let x0 = x_strip + (w_strip - CROP_W) / 2;
    let y0 = (h - CROP_H) / 2;
    Ok(resize_region(frame, x0, y0, CROP_W, CROP_H, OUTPUT_SIZE))
}

/// Source sample positions and weights for half-pixel-centered bilinear
/// resampling of `n_in` samples to `n_out`.
fn taps(n_in: u32, n_out: usize) -> Vec<(u32, u32, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as u32;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

fn resize_region(frame: &RgbImage, x0: u32, y0: u32, w: u32, h: u32, size: usize) -> Tensor<f32> {
    let xs = taps(w, size);
    let ys = taps(h, size);
    let mut data = Vec::with_capacity(size * size * 3);
    for &(y_lo, y_hi, fy) in &ys {
        for &(x_lo, x_hi, fx) in &xs {
            let px = |x: u32, y: u32| frame.get_pixel(x0 + x, y0 + y).0;
            let (a, b, c, d) = (
                px(x_lo, y_lo),
                px(x_hi, y_lo),
                px(x_lo, y_hi),
                px(x_hi, y_hi),
            );
            for k in 0..3 {
                let top = a[k] as f32 + fx * (b[k] as f32 - a[k] as f32);
                let bottom = c[k] as f32 + fx * (d[k] as f32 - c[k] as f32);
                data.push((top + fy * (bottom - top)) / 255.0);
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("sized buffer")
}

/// `[H, W, 3]` tensor in [0, 1] to an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage, FrameError> {
    let &[h, w, 3] = t.shape() else {
        return Err(FrameError::BadTensor(t.shape().to_vec()));
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([0, 1, 2].map(|k| (d[i + k] * 255.0).round().clamp(0.0, 255.0) as u8))
    }))
}

/// 8-bit image to an `[H, W, 3]` tensor in [0, 1].
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("sized buffer")
}
