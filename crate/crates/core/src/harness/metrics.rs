//! Full-reference fidelity metrics on single-channel images in `[0, 1]`.

use crate::error::{Error, Result};

/// PSNR reported when the mean squared error drops below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::Shape {
                op: "Image::new",
                left: vec![height, width],
                right: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("Image::new"));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Image {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(self.at(x / factor, y / factor));
            }
        }
        Image { width: w, height: h, pixels }
    }
}

fn same_shape(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape {
            op,
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter over all positions where the window fits.
fn filter_valid(src: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (width - n + 1, height - n + 1);
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * horiz[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// every window position fully inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}",
            a.width, a.height
        )));
    }
    let taps = gaussian_taps();
    let (w, h) = (a.width, a.height);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_x = filter_valid(&a.pixels, w, h, &taps);
    let mu_y = filter_valid(&b.pixels, w, h, &taps);
    let e_xx = filter_valid(&prod(|x, _| x * x), w, h, &taps);
    let e_yy = filter_valid(&prod(|_, y| y * y), w, h, &taps);
    let e_xy = filter_valid(&prod(|x, y| x * y), w, h, &taps);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
    }
    Ok(total / mu_x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let px = SeedStream::new(seed, 0).uniform(&[w * h], 0.0, 1.0).into_data();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = random_image(1, 16, 12);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset() {
        let a = Image::new(12, 12, vec![0.25; 144]).unwrap();
        let b = Image::new(12, 12, vec![0.35; 144]).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mse_is_symmetric() {
        let (a, b) = (random_image(2, 13, 11), random_image(3, 13, 11));
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }

    #[test]
    fn negative_scores_below_one() {
        let a = random_image(4, 16, 16);
        let neg = Image::new(16, 16, a.pixels().iter().map(|p| 1.0 - p).collect()).unwrap();
        let s = ssim(&a, &neg).unwrap();
        assert!(s < 1.0 && s >= -1.0, "{s}");
    }

    #[test]
    fn shape_and_size_errors() {
        let a = random_image(5, 12, 12);
        let b = random_image(5, 12, 13);
        assert!(matches!(mse(&a, &b), Err(Error::Shape { .. })));
        let tiny = random_image(6, 10, 10);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Domain(_))));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn upscale_replicates_pixels() {
        let a = Image::new(2, 1, vec![0.1, 0.9]).unwrap();
        let u = a.upscale(2);
        assert_eq!(u.pixels(), &[0.1, 0.1, 0.9, 0.9, 0.1, 0.1, 0.9, 0.9]);
    }
}
