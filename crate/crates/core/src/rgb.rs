//! 8-bit RGB images and their on-disk forms.
//!
//! Besides PNG, images can be stored in a raw fixture format used for
//! byte-exact tests:
//!
//! ```text
//! b"RGB8"            magic
//! u32 LE             height
//! u32 LE             width
//! height*width*3     interleaved R, G, B bytes, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const RAW_MAGIC: &[u8; 4] = b"RGB8";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Interleaved RGB, row-major.
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(invalid(format!(
                "{}x{} image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        RgbImage::new(height, width, pixels)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        RgbImage::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pads bottom and right edges by reflection so both sides become
    /// multiples of `m`.
    pub fn reflect_pad_to_multiple(&self, m: usize) -> RgbImage {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if i < n {
                i
            } else if n == 1 {
                0
            } else {
                // mirror about the last pixel, bouncing if the pad exceeds n
                let period = 2 * (n - 1);
                let r = i % period;
                if r < n {
                    r
                } else {
                    period - r
                }
            }
        };
        RgbImage::from_fn(h, w, |y, x| self.get(reflect(y, self.height), reflect(x, self.width)))
            .expect("padded dimensions are positive")
    }

    /// Network input: `(1, 3, h, w)` with values `v/255 - 0.5`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0 - 0.5
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| invalid("pixel buffer does not match dimensions"))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.pixels.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
            return Err(invalid("not a raw RGB8 image"));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        RgbImage::new(h, w, bytes[12..].to_vec())
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_raw_bytes())?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        RgbImage::from_raw_bytes(&fs::read(path)?)
    }

    /// Loads by extension: `.raw`/`.rgb8` as the raw format, anything else
    /// through the PNG decoder.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("raw") | Some("rgb8") => RgbImage::load_raw(path),
            _ => RgbImage::load_png(path),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("raw") | Some("rgb8") => self.save_raw(path),
            Some("png") => self.save_png(path),
            _ => Err(Error::InvalidArgument(format!(
                "unsupported image extension: {}",
                path.display()
            ))),
        }
    }
}

/// Stacks images of one size into a `(n, 3, h, w)` network input.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let items: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&items)
}
