//! Procedural paired forgeries with exact ground-truth masks.
//!
//! A real image is a multi-octave value-noise texture. Its fake counterpart
//! has one rectangular or elliptical region replaced by a donor texture drawn
//! from a separate random stream with different octave statistics, feathered
//! at the boundary, and then every pixel of the fake receives i.i.d. Gaussian
//! noise. The mask marks only the spliced region, so the global noise shows
//! up in pixel comparisons without being a forgery cue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, ImageSample, Label};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Fraction of the image area covered by the spliced region.
    pub patch_area_frac: f64,
    /// Standard deviation of the noise added to every pixel of the fake.
    pub global_noise_sigma: f64,
    /// Width in pixels of the linear feathering inside the splice boundary.
    pub blend_width: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_area_frac: 0.2,
            global_noise_sigma: 0.05,
            blend_width: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if !(0.05..=0.5).contains(&self.patch_area_frac) {
            return Err(Error::Config(format!(
                "patch_area_frac must lie in [0.05, 0.5], got {}",
                self.patch_area_frac
            )));
        }
        if !(0.0..=0.2).contains(&self.global_noise_sigma) {
            return Err(Error::Config(format!(
                "global_noise_sigma must lie in [0, 0.2], got {}",
                self.global_noise_sigma
            )));
        }
        if !(self.blend_width >= 0.0 && self.blend_width.is_finite()) {
            return Err(Error::Config("blend_width must be non-negative".into()));
        }
        Ok(())
    }
}

// Independent random streams per pair.
const STREAM_HOST: u64 = 0;
const STREAM_DONOR: u64 = 1;
const STREAM_SHAPE: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, index: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(which));
    rng
}

#[derive(Clone, Copy, Debug)]
struct TextureStyle {
    base: [f64; 3],
    tint: [f64; 3],
    contrast: f64,
    persistence: f64,
    grain: f64,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise with lattice spacing `cell`, in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let (oy, ox) = (rng.random::<f64>(), rng.random::<f64>());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell as f64 + oy;
        let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell as f64 + ox;
            let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy.min(n - 1) * n + xx.min(n - 1)];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn render_texture(rng: &mut ChaCha8Rng, size: usize, style: &TextureStyle) -> Image {
    let mut lum = vec![0.0; size * size];
    let mut total_amp = 0.0;
    let mut amp = 1.0;
    let mut cell = (size / 2).max(2);
    loop {
        let octave = value_noise(rng, size, cell);
        for (l, o) in lum.iter_mut().zip(&octave) {
            *l += amp * o;
        }
        total_amp += amp;
        amp *= style.persistence;
        if cell <= 2 {
            break;
        }
        cell /= 2;
    }
    // Low-amplitude per-channel colour variation.
    let chroma: Vec<Vec<f64>> = (0..3)
        .map(|_| value_noise(rng, size, (size / 4).max(2)))
        .collect();
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let l = lum[i] / total_amp - 0.5;
            let grain = style.grain * (rng.random::<f64>() - 0.5) * 2.0;
            for c in 0..3 {
                let v = style.base[c]
                    + style.contrast * style.tint[c] * l
                    + 0.08 * (chroma[c][i] - 0.5)
                    + grain;
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn host_style(rng: &mut ChaCha8Rng) -> TextureStyle {
    TextureStyle {
        base: [
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
        ],
        tint: [
            rng.random_range(0.8..1.2),
            rng.random_range(0.8..1.2),
            rng.random_range(0.8..1.2),
        ],
        contrast: rng.random_range(0.6..1.2),
        persistence: rng.random_range(0.35..0.55),
        grain: rng.random_range(0.0..0.06),
    }
}

/// Donor colours stay close to the host; the octave mix is rougher and the
/// grain is absent, which is the splice's statistical signature.
fn donor_style(rng: &mut ChaCha8Rng, host: &TextureStyle) -> TextureStyle {
    let mut base = host.base;
    for b in &mut base {
        *b = (*b + rng.random_range(-0.08..0.08)).clamp(0.2, 0.8);
    }
    TextureStyle {
        base,
        tint: host.tint,
        contrast: host.contrast * rng.random_range(0.9..1.3),
        persistence: rng.random_range(0.7..0.9),
        grain: 0.0,
    }
}

/// Binary region mask covering `frac` of the image.
fn region_mask(rng: &mut ChaCha8Rng, size: usize, frac: f64) -> Mat {
    let area = frac * (size * size) as f64;
    let aspect: f64 = rng.random_range(0.7..1.4);
    let mut mask = Mat::zeros(size, size);
    if rng.random_bool(0.5) {
        let w = ((area * aspect).sqrt().round() as usize).clamp(2, size - 1);
        let h = ((area / w as f64).round() as usize).clamp(2, size - 1);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask.set(y, x, 1.0);
            }
        }
    } else {
        let a = (area * aspect / std::f64::consts::PI).sqrt();
        let b = area / (std::f64::consts::PI * a);
        let cx = rng.random_range(a..size as f64 - a);
        let cy = rng.random_range(b..size as f64 - b);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - cx) / a;
                let dy = (y as f64 + 0.5 - cy) / b;
                if dx * dx + dy * dy <= 1.0 {
                    mask.set(y, x, 1.0);
                }
            }
        }
    }
    mask
}

/// Chamfer distance from each inside pixel to the nearest outside pixel
/// (outside pixels and the image border count as distance 0 neighbours).
fn inside_distance(mask: &Mat) -> Mat {
    let (h, w) = mask.shape();
    let big = (h + w) as f64;
    let mut d = Mat::from_fn(h, w, |y, x| if mask.get(y, x) > 0.5 { big } else { 0.0 });
    let diag = std::f64::consts::SQRT_2;
    let get = |d: &Mat, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            d.get(y as usize, x as usize)
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let cur = d.get(y as usize, x as usize);
            if cur == 0.0 {
                continue;
            }
            let best = cur
                .min(get(&d, y - 1, x) + 1.0)
                .min(get(&d, y, x - 1) + 1.0)
                .min(get(&d, y - 1, x - 1) + diag)
                .min(get(&d, y - 1, x + 1) + diag);
            d.set(y as usize, x as usize, best);
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let cur = d.get(y as usize, x as usize);
            if cur == 0.0 {
                continue;
            }
            let best = cur
                .min(get(&d, y + 1, x) + 1.0)
                .min(get(&d, y, x + 1) + 1.0)
                .min(get(&d, y + 1, x + 1) + diag)
                .min(get(&d, y + 1, x - 1) + diag);
            d.set(y as usize, x as usize, best);
        }
    }
    d
}

/// Generates the `index`-th real/fake pair. Pure in `(spec, index)`.
pub fn synth_pair(spec: &SyntheticSpec, index: u64) -> Result<(ImageSample, ImageSample)> {
    spec.validate()?;
    let size = spec.image_size;

    let mut host_rng = stream(spec.seed, index, STREAM_HOST);
    let host = host_style(&mut host_rng);
    let real = render_texture(&mut host_rng, size, &host);

    let mut donor_rng = stream(spec.seed, index, STREAM_DONOR);
    let dstyle = donor_style(&mut donor_rng, &host);
    let donor = render_texture(&mut donor_rng, size, &dstyle);

    let mut shape_rng = stream(spec.seed, index, STREAM_SHAPE);
    let mask = region_mask(&mut shape_rng, size, spec.patch_area_frac);
    let dist = inside_distance(&mask);

    let mut noise_rng = stream(spec.seed, index, STREAM_NOISE);
    let noise = Normal::new(0.0, spec.global_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut fake = real.clone();
    for y in 0..size {
        for x in 0..size {
            let alpha = if mask.get(y, x) > 0.5 {
                if spec.blend_width > 0.0 {
                    (dist.get(y, x) / spec.blend_width).min(1.0)
                } else {
                    1.0
                }
            } else {
                0.0
            };
            for c in 0..3 {
                let spliced = alpha * donor.get(y, x, c) + (1.0 - alpha) * real.get(y, x, c);
                let n = if spec.global_noise_sigma > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                fake.set(y, x, c, (spliced + n).clamp(0.0, 1.0));
            }
        }
    }

    let real = ImageSample {
        id: format!("{index:06}_real"),
        image: real,
        label: Label::Real,
        gt_mask: None,
    };
    let fake = ImageSample {
        id: format!("{index:06}_fake"),
        image: fake,
        label: Label::Fake,
        gt_mask: Some(mask),
    };
    Ok((real, fake))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_area_matches_fraction() {
        let spec = SyntheticSpec {
            patch_area_frac: 0.2,
            image_size: 32,
            ..Default::default()
        };
        for index in 0..40 {
            let (_, fake) = synth_pair(&spec, index).unwrap();
            let frac = fake.gt_mask.unwrap().sum() / 1024.0;
            assert!((0.15..=0.25).contains(&frac), "index {index}: {frac}");
        }
    }

    #[test]
    fn deterministic_in_seed_and_index() {
        let spec = SyntheticSpec::default();
        assert_eq!(synth_pair(&spec, 5).unwrap(), synth_pair(&spec, 5).unwrap());
        assert_ne!(
            synth_pair(&spec, 5).unwrap().0.image,
            synth_pair(&spec, 6).unwrap().0.image
        );
    }

    #[test]
    fn rejects_bad_spec() {
        for spec in [
            SyntheticSpec {
                patch_area_frac: 0.6,
                ..Default::default()
            },
            SyntheticSpec {
                patch_area_frac: 0.01,
                ..Default::default()
            },
            SyntheticSpec {
                image_size: 8,
                ..Default::default()
            },
            SyntheticSpec {
                global_noise_sigma: 0.3,
                ..Default::default()
            },
        ] {
            assert!(matches!(synth_pair(&spec, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn real_has_no_mask_and_pixels_in_range() {
        let (real, fake) = synth_pair(&SyntheticSpec::default(), 3).unwrap();
        assert!(real.gt_mask.is_none());
        assert_eq!(real.label, Label::Real);
        assert_eq!(fake.label, Label::Fake);
        for img in [&real.image, &fake.image] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_noise_leaves_outside_untouched() {
        let spec = SyntheticSpec {
            global_noise_sigma: 0.0,
            ..Default::default()
        };
        let (real, fake) = synth_pair(&spec, 11).unwrap();
        let mask = fake.gt_mask.as_ref().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(y, x) < 0.5 {
                    for c in 0..3 {
                        assert_eq!(real.image.get(y, x, c), fake.image.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn noise_changes_nearly_every_outside_pixel() {
        let (real, fake) = synth_pair(&SyntheticSpec::default(), 2).unwrap();
        let mask = fake.gt_mask.as_ref().unwrap();
        let (mut changed, mut total) = (0, 0);
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(y, x) < 0.5 {
                    total += 1;
                    if (0..3).any(|c| real.image.get(y, x, c) != fake.image.get(y, x, c)) {
                        changed += 1;
                    }
                }
            }
        }
        assert!(changed as f64 / total as f64 > 0.99);
    }
}
