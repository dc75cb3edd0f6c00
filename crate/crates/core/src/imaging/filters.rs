use std::f64::consts::SQRT_2;

use super::Image;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Largest attainable Sobel magnitude for inputs in `[0, 1]`.
const SOBEL_MAX: f64 = 4.0 * SQRT_2;

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-channel Sobel gradient magnitude with replicate padding, scaled into
/// `[0, 1]`.
pub fn sobel_map(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let at = |dy: isize, dx: isize, c: usize| {
                image.get(
                    clamp_idx(y as isize + dy, h),
                    clamp_idx(x as isize + dx, w),
                    c,
                )
            };
            for c in 0..3 {
                let gx = (at(-1, 1, c) + 2.0 * at(0, 1, c) + at(1, 1, c))
                    - (at(-1, -1, c) + 2.0 * at(0, -1, c) + at(1, -1, c));
                let gy = (at(1, -1, c) + 2.0 * at(1, 0, c) + at(1, 1, c))
                    - (at(-1, -1, c) + 2.0 * at(-1, 0, c) + at(-1, 1, c));
                out.set(y, x, c, ((gx * gx + gy * gy).sqrt() / SOBEL_MAX).min(1.0));
            }
        }
    }
    out
}

/// Mean absolute difference over channels. With a threshold, values below it
/// are zeroed and values at or above it are kept as they are.
pub fn pixel_diff_map(real: &Image, fake: &Image, threshold: Option<f64>) -> Result<Mat> {
    if !real.same_shape(fake) {
        return Err(Error::Input(format!(
            "pixel_diff_map: {}x{} vs {}x{}",
            real.height(),
            real.width(),
            fake.height(),
            fake.width()
        )));
    }
    Ok(Mat::from_fn(real.height(), real.width(), |y, x| {
        let d = (0..3)
            .map(|c| (fake.get(y, x, c) - real.get(y, x, c)).abs())
            .sum::<f64>()
            / 3.0;
        match threshold {
            Some(t) if d < t => 0.0,
            _ => d,
        }
    }))
}

/// Corner-aligned 1-D interpolation taps: for each output index, the two
/// source indices and the weight of the second.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = if n_out > 1 {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(map: &Mat, out_h: usize, out_w: usize) -> Mat {
    let (h, w) = map.shape();
    assert!(h >= 1 && w >= 1, "resize_bilinear needs a non-empty map");
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let (lo_v, hi_v) = (map.min(), map.max());
    Mat::from_fn(out_h, out_w, |i, j| {
        let (y0, y1, fy) = ty[i];
        let (x0, x1, fx) = tx[j];
        let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
        let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(lo_v, hi_v)
    })
}

/// The `(out_h·out_w) × (h·w)` matrix that performs [`resize_bilinear`] on a
/// row-major flattened map.
pub fn bilinear_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> Mat {
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut m = Mat::zeros(out_h * out_w, h * w);
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let r = i * out_w + j;
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let c = y * w + x;
                    m.set(r, c, m.get(r, c) + wy * wx);
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_edge(size: usize) -> Image {
        Image::from_fn(size, size, |_, x, _| if x < size / 2 { 0.0 } else { 1.0 })
    }

    #[test]
    fn sobel_constant_is_zero() {
        let out = sobel_map(&Image::filled(8, 8, 0.37));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step() {
        // Hand convolution: at either side of the edge |Gx| = 1+2+1 = 4, Gy = 0.
        let out = sobel_map(&step_edge(8));
        for y in 0..8 {
            for x in [3, 4] {
                assert!((out.get(y, x, 0) - 0.707_106_781).abs() < 1e-8);
            }
            assert_eq!(out.get(y, 1, 2), 0.0);
            assert_eq!(out.get(y, 6, 1), 0.0);
        }
    }

    #[test]
    fn sobel_corner_in_range() {
        let img = Image::from_fn(5, 5, |y, x, _| if y <= 2 && x <= 2 { 0.0 } else { 1.0 });
        let out = sobel_map(&img);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pixel_diff_rules() {
        let real = Image::filled(4, 4, 0.5);
        assert!(pixel_diff_map(&real, &real, None).unwrap().data().iter().all(|&v| v == 0.0));

        let fake = Image::from_fn(4, 4, |y, x, _| {
            if y < 2 && x < 2 {
                0.8
            } else {
                0.55
            }
        });
        let m = pixel_diff_map(&real, &fake, Some(0.1)).unwrap();
        assert!((m.get(0, 0) - 0.3).abs() < 1e-12);
        assert_eq!(m.get(3, 3), 0.0);
        let raw = pixel_diff_map(&real, &fake, None).unwrap();
        assert!((raw.get(3, 3) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pixel_diff_shape_mismatch() {
        let a = Image::filled(4, 4, 0.0);
        let b = Image::filled(4, 5, 0.0);
        assert!(matches!(pixel_diff_map(&a, &b, None), Err(Error::Input(_))));
    }

    #[test]
    fn resize_identity_and_ramp() {
        let m = Mat::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(resize_bilinear(&m, 2, 2), m);
        let up = resize_bilinear(&m, 4, 4);
        for r in 0..4 {
            for (c, expected) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((up.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_matrix_matches_resize() {
        let m = Mat::from_fn(3, 5, |r, c| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        let direct = resize_bilinear(&m, 7, 4);
        let flat = bilinear_matrix(3, 5, 7, 4).matmul(&m.clone().reshape(15, 1));
        for (a, b) in direct.data().iter().zip(flat.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn image_strategy() -> impl Strategy<Value = Image> {
        (3usize..9, 3usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * 3)
                .prop_map(move |d| Image::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn sobel_in_unit_range(img in image_strategy()) {
            let out = sobel_map(&img);
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn pixel_diff_symmetric_and_bounded(
            (a, b) in image_strategy().prop_flat_map(|a| {
                let (h, w) = (a.height(), a.width());
                (Just(a), proptest::collection::vec(0.0f64..=1.0, h * w * 3)
                    .prop_map(move |d| Image::new(h, w, d).unwrap()))
            }),
            t in proptest::option::of(0.0f64..0.5),
        ) {
            let ab = pixel_diff_map(&a, &b, t).unwrap();
            let ba = pixel_diff_map(&b, &a, t).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert!(ab.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn resize_stays_in_range(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            oh in 1usize..10, ow in 1usize..10,
        ) {
            let m = Mat::from_vec(3, 4, vals);
            let r = resize_bilinear(&m, oh, ow);
            prop_assert!(r.data().iter().all(|&v| v >= m.min() && v <= m.max()));
        }
    }

    #[test]
    fn resize_constant() {
        let m = Mat::filled(3, 3, 0.25);
        assert!(resize_bilinear(&m, 9, 5).data().iter().all(|&v| v == 0.25));
    }
}
