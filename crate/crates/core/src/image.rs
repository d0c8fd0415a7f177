//! Grayscale/RGB rasters, bilinear resampling and netpbm I/O.
//!
//! One bilinear routine serves both dataset ingestion and Grad-CAM
//! upsampling. It uses align-corners sampling: the corner pixels of the source
//! map exactly onto the corners of the target, so constants are preserved and
//! outputs never leave the source's value range.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image", "dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{}x{} needs {} values, got {}", width, height, width * height, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear resampling to `width` x `height`, corners aligned.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("resize", "target dimensions must be positive"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = axis_samples(self.width, width);
        let ys = axis_samples(self.height, height);
        let mut data = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &xs {
                let fx = T::lit(fx);
                let top = self.get(x0, y0) + (self.get(x1, y0) - self.get(x0, y0)) * fx;
                let bottom = self.get(x0, y1) + (self.get(x1, y1) - self.get(x0, y1)) * fx;
                let v = top + (bottom - top) * fy;
                data.push(v);
            }
        }
        Ok(Self { width, height, data })
    }

    /// Quantizes `[0, 1]` intensities to 8 bits (values outside are clipped).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let scale = T::lit(255.0);
        Self::new(width, height, bytes.iter().map(|&b| T::from_count(b as usize) / scale).collect())
    }

    /// Writes a binary 8-bit PGM (P5).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_u8());
        write_file(path, &buf)
    }
}

/// Source pixel pair and blend weight for each target coordinate.
fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            if dst == 1 {
                // single output sample sits at the source center
                let pos = (src - 1) as f64 / 2.0;
                let lo = pos.floor() as usize;
                return (lo, (lo + 1).min(src - 1), pos - lo as f64);
            }
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let frac = (num % den) as f64 / den as f64;
            (lo, (lo + 1).min(src - 1), frac)
        })
        .collect()
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Writes a binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.data);
        write_file(path, &buf)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5) with any maxval up to 65535, scaled to `[0, 1]`.
pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::data(path, None, msg))
}

fn parse_pgm<T: Scalar>(bytes: &[u8]) -> std::result::Result<Image<T>, String> {
    let mut pos = 0usize;
    let mut header = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or("empty file")?;
    if magic != b"P5" {
        return Err(format!("not a binary PGM (magic {:?})", String::from_utf8_lossy(magic)));
    }
    for field in header.iter_mut() {
        let tok = next_token(bytes, &mut pos).ok_or("truncated PGM header")?;
        *field = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes.get(pos..pos + need).ok_or("truncated PGM raster")?;
    let scale = T::from_count(maxval);
    let data = if bpp == 1 {
        raster.iter().map(|&b| T::from_count(b as usize) / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| T::from_count(u16::from_be_bytes([c[0], c[1]]) as usize) / scale)
            .collect()
    };
    Image::new(width, height, data).map_err(|e| e.to_string())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads a PNG and converts it to grayscale in `[0, 1]`.
pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = ::image::open(path).map_err(|e| Error::data(path, None, e.to_string()))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let scale = T::lit(65535.0);
    Image::new(
        w,
        h,
        gray.as_raw().iter().map(|&v| T::from_count(v as usize) / scale).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ramp_upsample_keeps_corners_and_is_linear() {
        // a linear ramp is reproduced exactly by bilinear interpolation
        let src = Image::<f64>::from_fn(16, 16, |x, y| (x as f64 + 2.0 * y as f64) / 45.0);
        let dst = src.resize_bilinear(32, 32).unwrap();
        assert_eq!((dst.width(), dst.height()), (32, 32));
        assert_eq!(dst.get(0, 0), src.get(0, 0));
        assert_eq!(dst.get(31, 0), src.get(15, 0));
        assert_eq!(dst.get(0, 31), src.get(0, 15));
        assert_eq!(dst.get(31, 31), src.get(15, 15));
        for y in 0..32 {
            for x in 0..32 {
                let sx = x as f64 * 15.0 / 31.0;
                let sy = y as f64 * 15.0 / 31.0;
                let oracle = (sx + 2.0 * sy) / 45.0;
                assert!((dst.get(x, y) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_from_single_pixel_and_to_single_pixel() {
        let one = Image::<f64>::filled(1, 1, 0.25);
        assert!(one.resize_bilinear(5, 3).unwrap().data().iter().all(|&v| v == 0.25));
        let row = Image::<f64>::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(row.resize_bilinear(1, 1).unwrap().data(), &[0.5]);
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::<f64>::from_fn(7, 5, |x, y| ((x * 5 + y) % 11) as f64 / 10.0);
        img.write_pgm(&path).unwrap();
        let back: Image<f64> = read_pgm(&path).unwrap();
        assert_eq!((back.width(), back.height()), (7, 5));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn pgm_255_is_one_and_comments_are_skipped() {
        let bytes = b"P5\n# comment\n2 1\n255\n\xff\x00";
        let img: Image<f64> = parse_pgm(bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
        assert!(parse_pgm::<f64>(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm::<f64>(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn png_is_read_as_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf = ::image::GrayImage::from_raw(2, 2, vec![0, 255, 51, 102]).unwrap();
        buf.save(&path).unwrap();
        let img: Image<f64> = read_png(&path).unwrap();
        assert_eq!(img.data()[1], 1.0);
        assert!((img.data()[2] - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bilinear_preserves_constants_and_range(
            w in 1usize..9, h in 1usize..9, tw in 1usize..20, th in 1usize..20,
            c in 0.0f64..1.0, vals in proptest::collection::vec(0.0f64..1.0, 81),
        ) {
            let flat = Image::filled(w, h, c).resize_bilinear(tw, th).unwrap();
            prop_assert!(flat.data().iter().all(|&v| v == c));

            let img = Image::new(w, h, vals[..w * h].to_vec()).unwrap();
            let (lo, hi) = img.min_max();
            let up = img.resize_bilinear(tw, th).unwrap();
            prop_assert!(up.data().iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        }
    }
}
