//! Motion-blur augmentation.
//!
//! Kernels are rasterized camera-shake trajectories: a random walk with
//! inertia, scaled to the kernel by `intensity`, splatted bilinearly and
//! normalized. Images are filtered by 2D correlation with replicated
//! borders.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const KERNEL_SUM_TOL: f64 = 1e-9;

/// Square, odd-sized, nonnegative kernel summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    /// Row-major.
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("kernel size {size} is not odd")));
        }
        if weights.len() != size * size {
            return Err(Error::dims(format!("{} weights for a {size}x{size} kernel", weights.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("kernel weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::InvalidInput(format!("kernel weights sum to {sum}")));
        }
        Ok(Self { size, weights })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if let Some(c) = w.get_mut(size * size / 2) {
            *c = 1.0;
        }
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// One line per row, space-separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.weights.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::InvalidInput(format!("kernel entry {t:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::dims("kernel text is not square"));
        }
        Self::new(size, rows.concat())
    }
}

/// Random motion-blur kernel. `intensity` in `[0, 1]` scales both the
/// trajectory's inertia and its extent; zero gives a delta.
pub fn generate_kernel(size: usize, intensity: f64, seed: u64) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::InvalidInput(format!("kernel size {size} is not odd")));
    }
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::InvalidInput(format!("intensity {intensity} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 8 * size;
    let inertia = 0.5 + 0.45 * intensity;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vel = [angle.cos(), angle.sin()];
    let mut pos = [0.0f64, 0.0];
    let mut path = Vec::with_capacity(steps);
    for _ in 0..steps {
        path.push(pos);
        for (v, p) in vel.iter_mut().zip(pos.iter_mut()) {
            let kick: f64 = StandardNormal.sample(&mut rng);
            *v = inertia * *v + (1.0 - inertia) * kick;
            *p += *v;
        }
    }

    let n = path.len() as f64;
    let mean = path.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let extent = path
        .iter()
        .map(|p| (p[0] - mean[0]).hypot(p[1] - mean[1]))
        .fold(0.0, f64::max);
    let half = (size / 2) as f64;
    let gain = if extent > 0.0 { intensity * half / extent } else { 0.0 };

    let mut w = vec![0.0; size * size];
    let max = (size - 1) as f64;
    for p in &path {
        let x = (half + (p[0] - mean[0]) * gain).clamp(0.0, max);
        let y = (half + (p[1] - mean[1]) * gain).clamp(0.0, max);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        w[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        w[y0 * size + x1] += fx * (1.0 - fy);
        w[y1 * size + x0] += (1.0 - fx) * fy;
        w[y1 * size + x1] += fx * fy;
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    BlurKernel::new(size, w)
}

/// Interleaved, row-major floating-point image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels || channels == 0 {
            return Err(Error::dims(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Correlation with `kernel`, replicating border pixels.
pub fn convolve(image: &Image, kernel: &BlurKernel) -> Image {
    let (w, h, ch) = (image.width, image.height, image.channels);
    let k = kernel.size();
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * ch;
            for i in 0..k {
                let sy = clamp(y as isize + i as isize - r, h);
                for j in 0..k {
                    let kw = kernel.at(i, j);
                    if kw == 0.0 {
                        continue;
                    }
                    let sx = clamp(x as isize + j as isize - r, w);
                    let src = (sy * w + sx) * ch;
                    for c in 0..ch {
                        out[base + c] += kw * image.data[src + c];
                    }
                }
            }
        }
    }
    Image {
        width: w,
        height: h,
        channels: ch,
        data: out,
    }
}

/// Reads a PGM (one channel) or PPM (three channels) image into `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color().channel_count(), 1 | 2);
    let (channels, raw) = if gray {
        (1, img.to_luma16().into_raw())
    } else {
        (3, img.to_rgb16().into_raw())
    };
    let data = raw.into_iter().map(|v| v as f64 / 65535.0).collect();
    Image::new(w, h, channels, data)
}

/// Writes an 8-bit PGM or PPM depending on the channel count.
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::InvalidInput(format!("cannot write a {c}-channel image as PNM"))),
    };
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    image::codecs::pnm::PnmEncoder::new(&mut out).encode(bytes.as_slice(), w, h, color)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).unwrap()
    }

    fn naive(img: &Image, k: &BlurKernel) -> Image {
        let r = (k.size() / 2) as i64;
        let mut out = img.clone();
        for y in 0..img.height as i64 {
            for x in 0..img.width as i64 {
                for c in 0..img.channels {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = (y + dy).max(0).min(img.height as i64 - 1) as usize;
                            let sx = (x + dx).max(0).min(img.width as i64 - 1) as usize;
                            acc += k.at((dy + r) as usize, (dx + r) as usize) * img.get(sx, sy, c);
                        }
                    }
                    out.data[(y as usize * img.width + x as usize) * img.channels + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_intensity_is_delta() {
        for seed in 0..5 {
            assert_eq!(generate_kernel(9, 0.0, seed).unwrap(), BlurKernel::delta(9).unwrap());
        }
    }

    #[test]
    fn kernels_are_normalized_and_reproducible() {
        for seed in 0..50 {
            for &(size, intensity) in &[(3, 0.5), (9, 0.2), (15, 1.0), (21, 0.7)] {
                let k = generate_kernel(size, intensity, seed).unwrap();
                assert!(k.weights().iter().all(|w| *w >= 0.0));
                assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(k, generate_kernel(size, intensity, seed).unwrap());
            }
        }
        assert_ne!(generate_kernel(15, 1.0, 1).unwrap(), generate_kernel(15, 1.0, 2).unwrap());
        assert!(generate_kernel(4, 0.5, 0).is_err());
        assert!(generate_kernel(5, 1.5, 0).is_err());
    }

    #[test]
    fn kernel_validation() {
        assert!(BlurKernel::new(3, vec![0.5; 9]).is_err());
        assert!(BlurKernel::new(3, vec![1.0 / 9.0; 8]).is_err());
        let mut w = vec![0.0; 9];
        w[0] = 1.5;
        w[1] = -0.5;
        assert!(BlurKernel::new(3, w).is_err());
        let k = generate_kernel(7, 0.6, 3).unwrap();
        assert_eq!(BlurKernel::from_text(&k.to_text()).unwrap(), k);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 17, 11, 3);
        let out = convolve(&img, &BlurKernel::delta(5).unwrap());
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Image::filled(20, 13, 1, 0.37);
        let out = convolve(&img, &generate_kernel(9, 1.0, 4).unwrap());
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..3 {
            let img = random_image(&mut rng, 64, 64, 1 + 2 * (seed as usize % 2));
            let k = generate_kernel(11, 0.8, seed).unwrap();
            let (a, b) = (convolve(&img, &k), naive(&img, &k));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_is_preserved_when_borders_are_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = generate_kernel(7, 0.9, 5).unwrap();
        let r = k.size() / 2;
        let mut img = Image::filled(48, 40, 1, 0.25);
        for y in r..40 - r {
            for x in r..48 - r {
                img.data[y * 48 + x] = rng.random();
            }
        }
        let mean = |im: &Image| im.data.iter().sum::<f64>() / im.data.len() as f64;
        assert!((mean(&convolve(&img, &k)) - mean(&img)).abs() < 1e-6);
    }

    #[test]
    fn pnm_round_trip() {
        let dir = std::env::temp_dir().join(format!("wb-pnm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for (ch, name) in [(1, "a.pgm"), (3, "a.ppm")] {
            let data = (0..4 * 3 * ch).map(|i| (i % 256) as f64 / 255.0).collect();
            let img = Image::new(4, 3, ch, data).unwrap();
            let p = dir.join(name);
            write_pnm(&p, &img).unwrap();
            let back = read_pnm(&p).unwrap();
            assert_eq!(back.channels, ch);
            for (a, b) in back.data.iter().zip(&img.data) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(read_pnm(&dir.join("missing.pgm")).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn convolution_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = random_image(&mut rng, 9, 7, 2);
            let j = random_image(&mut rng, 9, 7, 2);
            let k = generate_kernel(5, rng.random(), seed).unwrap();
            let mix = Image::new(9, 7, 2, i.data.iter().zip(&j.data).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = convolve(&mix, &k);
            let (ci, cj) = (convolve(&i, &k), convolve(&j, &k));
            for (idx, v) in lhs.data.iter().enumerate() {
                prop_assert!((v - (a * ci.data[idx] + b * cj.data[idx])).abs() < 1e-12);
            }
        }
    }
}
