//! Per-frame measurements used by the R1 motion and aesthetics filters.

use image::{GrayImage, RgbImage};

/// Indices of the frames picked by systematic sampling.
///
/// With at least `count` frames, index `k` is `floor(k·(n−1)/(count−1))`,
/// spreading picks evenly from first to last. Shorter sequences are
/// stretched by rounding the same position to the nearest frame (halves
/// round up), so every frame appears and the tail repeats the last one.
pub fn sample_indices(n: usize, count: usize) -> Vec<usize> {
    assert!(n >= 1 && count >= 2, "sample_indices needs n >= 1 and count >= 2");
    let span = (n - 1) as u64;
    let steps = (count - 1) as u64;
    (0..count as u64)
        .map(|k| {
            let num = k * span;
            let idx = if n >= count { num / steps } else { (2 * num + steps) / (2 * steps) };
            idx as usize
        })
        .collect()
}

/// Centered `size`×`size` window; a side shorter than `size` is kept whole.
pub fn center_crop(frame: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = frame.dimensions();
    let cw = w.min(size);
    let ch = h.min(size);
    let x0 = ((w - cw) / 2) as usize;
    let y0 = ((h - ch) / 2) as usize;
    let (stride, row) = (w as usize * 3, cw as usize * 3);
    let raw = frame.as_raw();
    let mut out = Vec::with_capacity(row * ch as usize);
    for y in y0..y0 + ch as usize {
        let start = y * stride + x0 * 3;
        out.extend_from_slice(&raw[start..start + row]);
    }
    RgbImage::from_raw(cw, ch, out).expect("crop buffer matches its dimensions")
}

/// Integer luma, `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn to_gray(frame: &RgbImage) -> GrayImage {
    let (w, h) = frame.dimensions();
    let raw = frame.as_raw().chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    GrayImage::from_raw(w, h, raw).expect("one luma byte per pixel")
}

/// Sum of absolute per-pixel differences. Images must share dimensions.
pub fn abs_diff_sum(a: &GrayImage, b: &GrayImage) -> u64 {
    debug_assert_eq!(a.dimensions(), b.dimensions());
    a.as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum()
}

/// Opponent-channel colorfulness: `σ_rgyb + 0.3·μ_rgyb` with
/// `rg = R − G`, `yb = (R + G)/2 − B` and population moments.
///
/// Moments are accumulated in integers (yb doubled) so uniform frames come
/// out with exactly zero spread.
pub fn colorfulness(frame: &RgbImage) -> f64 {
    let n = frame.width() as i128 * frame.height() as i128;
    if n == 0 {
        return 0.0;
    }
    // per-pixel terms fit i64 comfortably; only the final products need i128
    let (mut s_rg, mut ss_rg, mut s_yb2, mut ss_yb2) = (0i64, 0i64, 0i64, 0i64);
    for p in frame.as_raw().chunks_exact(3) {
        let (r, g, b) = (p[0] as i64, p[1] as i64, p[2] as i64);
        let rg = r - g;
        let yb2 = r + g - 2 * b;
        s_rg += rg;
        ss_rg += rg * rg;
        s_yb2 += yb2;
        ss_yb2 += yb2 * yb2;
    }
    let (s_rg, ss_rg, s_yb2, ss_yb2) = (s_rg as i128, ss_rg as i128, s_yb2 as i128, ss_yb2 as i128);
    let nf = n as f64;
    let var_rg = (n * ss_rg - s_rg * s_rg) as f64 / (nf * nf);
    let var_yb = (n * ss_yb2 - s_yb2 * s_yb2) as f64 / (4.0 * nf * nf);
    let mean_rg = s_rg as f64 / nf;
    let mean_yb = s_yb2 as f64 / (2.0 * nf);
    (var_rg + var_yb).sqrt() + 0.3 * (mean_rg * mean_rg + mean_yb * mean_yb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    // Two-pass floating point reference.
    fn colorfulness_two_pass(img: &RgbImage) -> f64 {
        let rg: Vec<f64> = img.pixels().map(|p| p[0] as f64 - p[1] as f64).collect();
        let yb: Vec<f64> = img
            .pixels()
            .map(|p| (p[0] as f64 + p[1] as f64) / 2.0 - p[2] as f64)
            .collect();
        let n = rg.len() as f64;
        let m_rg = rg.iter().sum::<f64>() / n;
        let m_yb = yb.iter().sum::<f64>() / n;
        let v_rg = rg.iter().map(|x| (x - m_rg).powi(2)).sum::<f64>() / n;
        let v_yb = yb.iter().map(|x| (x - m_yb).powi(2)).sum::<f64>() / n;
        (v_rg + v_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
    }

    #[test]
    fn sampling_indices() {
        assert_eq!(sample_indices(9, 5), [0, 2, 4, 6, 8]);
        assert_eq!(sample_indices(5, 5), [0, 1, 2, 3, 4]);
        assert_eq!(sample_indices(2, 5), [0, 0, 1, 1, 1]);
        assert_eq!(sample_indices(1, 5), [0; 5]);
        assert_eq!(sample_indices(10, 5), [0, 2, 4, 6, 9]);
        assert_eq!(sample_indices(300, 5), [0, 74, 149, 224, 299]);
    }

    #[test]
    fn crop_offsets() {
        let img = RgbImage::from_fn(640, 480, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 0]));
        let c = center_crop(&img, 200);
        assert_eq!(c.dimensions(), (200, 200));
        assert_eq!(c.get_pixel(0, 0), &Rgb([220, 140, 0]));

        let small = RgbImage::from_fn(200, 200, |x, y| Rgb([x as u8, y as u8, 7]));
        assert_eq!(center_crop(&small, 200), small);

        let narrow = RgbImage::from_fn(150, 480, |x, y| Rgb([x as u8, (y % 256) as u8, 0]));
        let c = center_crop(&narrow, 200);
        assert_eq!(c.dimensions(), (150, 200));
        assert_eq!(c.get_pixel(0, 0), &Rgb([0, 140, 0]));
    }

    #[test]
    fn luma_rounding() {
        assert_eq!(luma(0, 0, 0), 0);
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(255, 0, 0), 76); // 76.245
        assert_eq!(luma(0, 255, 0), 150); // 149.685
        assert_eq!(luma(0, 0, 255), 29); // 29.07
        for (r, g, b) in [(13u8, 200u8, 77u8), (1, 2, 3), (250, 3, 128)] {
            let exact = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            assert_eq!(luma(r, g, b) as f64, exact.round());
        }
    }

    #[test]
    fn colorfulness_reference_values() {
        assert_eq!(colorfulness(&RgbImage::from_pixel(64, 64, Rgb([90, 90, 90]))), 0.0);
        let red = colorfulness(&RgbImage::from_pixel(64, 64, Rgb([255, 0, 0])));
        let hand = 0.3 * (255.0f64 * 255.0 + 127.5 * 127.5).sqrt();
        assert!((red - hand).abs() < 1e-9);
        assert!((red - 85.53).abs() < 0.01);

        let half = RgbImage::from_fn(10, 10, |x, _| if x < 5 { Rgb([255, 0, 0]) } else { Rgb([0, 255, 0]) });
        assert!((colorfulness(&half) - colorfulness_two_pass(&half)).abs() < 1e-9);
    }

    #[test]
    fn doubling_rg_doubles_score() {
        // yb = 0 needs R + G = 2B.
        let two = |d: u8| {
            RgbImage::from_fn(8, 8, |x, _| {
                if x % 2 == 0 {
                    Rgb([100 + d, 100 - d, 100])
                } else {
                    Rgb([100 - d, 100 + d, 100])
                }
            })
        };
        let one = colorfulness(&two(20));
        let dbl = colorfulness(&two(40));
        assert!(one > 0.0);
        assert!((dbl - 2.0 * one).abs() < 1e-9);
    }

    fn arb_image() -> impl Strategy<Value = RgbImage> {
        (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
                .prop_map(move |buf| RgbImage::from_raw(w, h, buf).unwrap())
        })
    }

    proptest! {
        #[test]
        fn colorfulness_matches_two_pass(img in arb_image()) {
            prop_assert!((colorfulness(&img) - colorfulness_two_pass(&img)).abs() < 1e-6);
        }

        #[test]
        fn colorfulness_permutation_invariant(img in arb_image(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (w, h) = img.dimensions();
            let mut px: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
            px.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = RgbImage::from_raw(w, h, px.concat()).unwrap();
            prop_assert!((colorfulness(&img) - colorfulness(&shuffled)).abs() < 1e-9);
        }

        #[test]
        fn gray_frames_score_zero(v in any::<u8>(), w in 1u32..20, h in 1u32..20) {
            prop_assert_eq!(colorfulness(&RgbImage::from_pixel(w, h, Rgb([v, v, v]))), 0.0);
        }

        #[test]
        fn sampling_is_monotone_and_bounded(n in 1usize..500, count in 2usize..12) {
            let idx = sample_indices(n, count);
            prop_assert_eq!(idx.len(), count);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(*idx.last().unwrap(), n - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
