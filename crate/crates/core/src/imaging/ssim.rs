use super::Image;
use crate::tensor::Mat;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicate padding.
fn blur(map: &Mat, taps: &[f64]) -> Mat {
    let (h, w) = map.shape();
    let half = (taps.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Mat::from_fn(h, w, |y, x| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * map.get(y, clamp(x as isize + k as isize - half, w)))
            .sum()
    });
    Mat::from_fn(h, w, |y, x| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * horiz.get(clamp(y as isize + k as isize - half, h), x))
            .sum()
    })
}

/// Per-pixel SSIM on luminance, turned into a manipulation map
/// `clip((1 − SSIM) / 2, 0, 1)` so that untouched regions map to 0.
pub fn ssim_map(real: &Image, fake: &Image) -> Result<Mat> {
    if !real.same_shape(fake) {
        return Err(Error::Input("ssim_map: images differ in shape".into()));
    }
    if real.height() < SSIM_WINDOW || real.width() < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim_map needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            real.height(),
            real.width()
        )));
    }
    let taps = gaussian_window();
    let x = real.luminance();
    let y = fake.luminance();
    let mu_x = blur(&x, &taps);
    let mu_y = blur(&y, &taps);
    let xx = blur(&x.zip_map(&x, |a, b| a * b), &taps);
    let yy = blur(&y.zip_map(&y, |a, b| a * b), &taps);
    let xy = blur(&x.zip_map(&y, |a, b| a * b), &taps);
    Ok(Mat::from_fn(x.rows(), x.cols(), |r, c| {
        let (mx, my) = (mu_x.get(r, c), mu_y.get(r, c));
        let vx = xx.get(r, c) - mx * mx;
        let vy = yy.get(r, c) - my * my;
        let cov = xy.get(r, c) - mx * my;
        let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        ((1.0 - s) / 2.0).clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_give_zero_map() {
        let img = Image::from_fn(16, 16, |y, x, c| ((y * 3 + x * 5 + c) % 11) as f64 / 10.0);
        let m = ssim_map(&img, &img).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn too_small_is_rejected() {
        let img = Image::filled(10, 16, 0.5);
        assert!(matches!(ssim_map(&img, &img), Err(Error::Input(_))));
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = Image::from_fn(12, 13, |y, x, c| ((y * 7 + x * 2 + c) % 9) as f64 / 8.0);
        let b = Image::from_fn(12, 13, |y, x, c| ((y + x * 4 + 2 * c) % 7) as f64 / 6.0);
        let ab = ssim_map(&a, &b).unwrap();
        let ba = ssim_map(&b, &a).unwrap();
        for (p, q) in ab.data().iter().zip(ba.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
