//! 8-bit images and their file formats.

use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(contract(format!("image size {width}x{height} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(contract(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid dimensions")
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, pixels).expect("valid dimensions")
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Three-channel copy (grey is replicated).
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self::from_fn(self.width, self.height, 3, |x, y, _| self.get(x, y, 0))
    }

    /// Planar `[C × H × W]` values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            self.pixels[p * c + ch] as f64 / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor), rounding and clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(contract(format!("expected a [C x H x W] tensor, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = t.data();
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                pixels[p * c + ch] = quantize(d[ch * h * w + p] * 255.0);
            }
        }
        Self::new(w, h, c, pixels)
    }

    /// Sub-image with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(contract(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, self.channels, |cx, cy, c| self.get(x + cx, y + cy, c)))
    }

    /// Horizontal flip followed by `rot` quarter turns counter-clockwise.
    pub fn transformed(&self, flip: bool, rot: usize) -> Self {
        let mut img = if flip {
            Self::from_fn(self.width, self.height, self.channels, |x, y, c| {
                self.get(self.width - 1 - x, y, c)
            })
        } else {
            self.clone()
        };
        for _ in 0..rot % 4 {
            let src = img;
            img = Self::from_fn(src.height, src.width, src.channels, |x, y, c| {
                src.get(src.width - 1 - y, x, c)
            });
        }
        img
    }

    pub fn read(path: &Path) -> Result<Self> {
        if is_pnm(path) {
            return read_pnm(&fs::read(path)?);
        }
        let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let img = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                Self::new(g.width() as usize, g.height() as usize, 1, g.into_raw())?
            }
            _ => {
                let rgb = img.to_rgb8();
                Self::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())?
            }
        };
        Ok(img)
    }

    /// Writes PNG, or binary PNM for `.ppm`/`.pgm`/`.pnm` paths.
    pub fn write(&self, path: &Path) -> Result<()> {
        if is_pnm(path) {
            fs::write(path, self.to_pnm())?;
            return Ok(());
        }
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Binary PNM bytes: `P6` for RGB, `P5` for grey.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

/// Parses binary `P6`/`P5` with `maxval` 255.
pub fn read_pnm(bytes: &[u8]) -> Result<ImagePlane> {
    let bad = |m: &str| Error::Format(format!("PNM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(bad(&format!("unsupported magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| bad(&format!("invalid {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("only maxval 255 is supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(bad("truncated raster"));
    }
    ImagePlane::new(width, height, channels, bytes[start..start + need].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImagePlane {
        ImagePlane::from_fn(5, 3, 3, |x, y, c| (x * 40 + y * 7 + c * 3) as u8)
    }

    #[test]
    fn tensor_round_trip() {
        let img = sample();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert_eq!(t.get(&[1, 2, 4]), img.get(4, 2, 1) as f64 / 255.0);
        assert_eq!(ImagePlane::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn pnm_round_trip() {
        let img = sample();
        assert_eq!(read_pnm(&img.to_pnm()).unwrap(), img);
        let grey = ImagePlane::from_fn(4, 2, 1, |x, y, _| (x + 10 * y) as u8);
        assert_eq!(read_pnm(&grey.to_pnm()).unwrap(), grey);
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x01\x02".to_vec();
        assert_eq!(read_pnm(&with_comment).unwrap().pixels, vec![1, 2]);
        assert!(read_pnm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(read_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for img in [sample(), ImagePlane::filled(3, 4, 1, 77)] {
            let p = dir.path().join("x.png");
            img.write(&p).unwrap();
            assert_eq!(ImagePlane::read(&p).unwrap(), img);
            let q = dir.path().join("x.ppm");
            img.write(&q).unwrap();
            assert_eq!(ImagePlane::read(&q).unwrap(), img);
        }
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(ImagePlane::read(&junk), Err(Error::Format(_))));
    }

    #[test]
    fn transforms() {
        let img = sample();
        assert_eq!(img.transformed(false, 4), img);
        assert_eq!(img.transformed(true, 0).transformed(true, 0), img);
        let r = img.transformed(false, 1);
        assert_eq!((r.width, r.height), (3, 5));
        assert_eq!(r.transformed(false, 3), img);
        let c = img.crop(1, 1, 3, 2).unwrap();
        assert_eq!(c.get(0, 0, 2), img.get(1, 1, 2));
        assert!(img.crop(3, 0, 3, 1).is_err());
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(254.5), 255);
        assert_eq!(quantize(300.0), 255);
        assert_eq!(quantize(12.49), 12);
    }
}
