//! Hexcone RGB to HSV conversion with 4x box downsampling.

use crate::error::{invalid, Result};
use crate::rgb::RgbImage;
use crate::tensor::{Shape, Tensor};

/// Downsampling factor applied to each HSV plane.
pub const HSV_DOWNSAMPLE: usize = 4;

/// H, S and V planes at `ceil(h/4) x ceil(w/4)`; H is the hue angle / 360.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvPlanes {
    pub height: usize,
    pub width: usize,
    pub hue: Vec<f64>,
    pub saturation: Vec<f64>,
    pub value: Vec<f64>,
}

impl HsvPlanes {
    /// `(1, 3, h, w)` tensor with channels H, S, V.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.hue.len());
        data.extend_from_slice(&self.hue);
        data.extend_from_slice(&self.saturation);
        data.extend_from_slice(&self.value);
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data).expect("plane sizes agree")
    }
}

/// Converts one pixel; components in `[0, 1]`, achromatic hue is 0.
pub fn rgb_to_hsv_pixel(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|v| v as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (sector / 6.0, s, v)
}

/// Full-resolution conversion followed by 4x4 box averaging; edge blocks
/// average over the pixels they actually cover.
pub fn rgb_to_hsv(img: &RgbImage) -> Result<HsvPlanes> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(invalid("cannot convert an empty image"));
    }
    let oh = h.div_ceil(HSV_DOWNSAMPLE);
    let ow = w.div_ceil(HSV_DOWNSAMPLE);
    let mut sums = vec![[0.0f64; 3]; oh * ow];
    let mut counts = vec![0usize; oh * ow];
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv_pixel(img.get(y, x));
            let cell = (y / HSV_DOWNSAMPLE) * ow + x / HSV_DOWNSAMPLE;
            sums[cell][0] += hh;
            sums[cell][1] += ss;
            sums[cell][2] += vv;
            counts[cell] += 1;
        }
    }
    let plane = |k: usize| -> Vec<f64> { sums.iter().zip(&counts).map(|(s, &c)| s[k] / c as f64).collect() };
    Ok(HsvPlanes {
        height: oh,
        width: ow,
        hue: plane(0),
        saturation: plane(1),
        value: plane(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primaries_and_gray() {
        assert_eq!(rgb_to_hsv_pixel([255, 0, 0]), (0.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv_pixel([0, 255, 0]);
        assert!((h - 1.0 / 3.0).abs() < 1e-12 && s == 1.0 && v == 1.0);
        let (h, s, v) = rgb_to_hsv_pixel([128, 128, 128]);
        assert_eq!((h, s), (0.0, 0.0));
        assert!((v - 128.0 / 255.0).abs() < 1e-15);
        assert_eq!(rgb_to_hsv_pixel([0, 0, 0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn magenta_wraps_into_last_sector() {
        let (h, _, _) = rgb_to_hsv_pixel([255, 0, 128]);
        assert!(h > 0.9 && h < 1.0, "{h}");
    }

    #[test]
    fn planes_have_ceil_quarter_size() {
        let img = RgbImage::filled(10, 7, [10, 200, 30]).unwrap();
        let p = rgb_to_hsv(&img).unwrap();
        assert_eq!((p.height, p.width), (3, 2));
        assert_eq!(p.hue.len(), 6);
        let (h, s, v) = rgb_to_hsv_pixel([10, 200, 30]);
        for i in 0..6 {
            assert!((p.hue[i] - h).abs() < 1e-12);
            assert!((p.saturation[i] - s).abs() < 1e-12);
            assert!((p.value[i] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_block_averages_available_pixels() {
        // 5 columns: the second block holds only column 4.
        let img = RgbImage::from_fn(4, 5, |_, x| if x == 4 { [255, 255, 255] } else { [0, 0, 0] }).unwrap();
        let p = rgb_to_hsv(&img).unwrap();
        assert_eq!(p.value, vec![0.0, 1.0]);
    }
}
