use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Fixed(f32),
    /// Otsu's method on the 256-bin histogram.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedMask {
    pub mask: Image,
    /// The threshold actually applied (`NaN` when none could be chosen).
    pub threshold: f32,
    /// Set when `Auto` met a constant image and fell back to all-background.
    pub constant_input: bool,
}

/// `mask = 1` where `image ≥ threshold`.
pub fn binarize_mask(image: &Image, threshold: Threshold) -> BinarizedMask {
    let t = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Auto => match otsu_threshold(image) {
            Some(t) => t,
            None => {
                return BinarizedMask {
                    mask: Image::filled(image.width(), image.height(), 0.0),
                    threshold: f32::NAN,
                    constant_input: true,
                }
            }
        },
    };
    let pixels = image.pixels().iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    BinarizedMask {
        mask: Image::new(image.width(), image.height(), pixels).expect("same dimensions"),
        threshold: t,
        constant_input: false,
    }
}

/// Otsu threshold over byte-quantized intensities, or `None` for an image
/// with a single occupied bin. Ties across a plateau of equally good cuts
/// resolve to the plateau's middle; the returned value sits halfway between
/// bins so that `v ≥ t` agrees with the byte-level split.
pub fn otsu_threshold(image: &Image) -> Option<f32> {
    let mut hist = [0u64; 256];
    for b in image.to_bytes() {
        hist[b as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0f64, 0f64);
    let mut best = f64::NEG_INFINITY;
    let (mut lo, mut hi) = (1usize, 1usize);
    // cut t: background = bins < t, foreground = bins ≥ t
    for t in 1..256 {
        w0 += hist[t - 1] as f64;
        s0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = s0 / w0 - (sum_all - s0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best {
            best = between;
            lo = t;
            hi = t;
        } else if between == best && hi == t - 1 {
            hi = t;
        }
    }
    let t = (lo + hi) / 2;
    Some((t as f32 - 0.5) / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_input_is_unchanged() {
        let im = Image::square(4, (0..16).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        assert_eq!(binarize_mask(&im, Threshold::Fixed(0.5)).mask, im);
        assert_eq!(binarize_mask(&im, Threshold::Auto).mask, im);
    }

    #[test]
    fn step_image() {
        let mut im = Image::filled(8, 8, 0.2);
        for y in 0..8 {
            for x in 4..8 {
                im.set(x, y, 0.9);
            }
        }
        let m = binarize_mask(&im, Threshold::Fixed(0.5)).mask;
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), (x >= 4) as u8 as f32);
            }
        }
    }

    #[test]
    fn constant_image_warns() {
        let out = binarize_mask(&Image::filled(5, 5, 0.7), Threshold::Auto);
        assert!(out.constant_input);
        assert!(out.mask.pixels().iter().all(|&v| v == 0.0));
    }

    /// Exhaustive between-class variance over every byte cut.
    fn brute_force_best_cuts(image: &Image) -> Vec<usize> {
        let bytes = image.to_bytes();
        let mut scores = Vec::new();
        for t in 1..256usize {
            let (bg, fg): (Vec<f64>, Vec<f64>) = (
                bytes.iter().filter(|&&b| (b as usize) < t).map(|&b| b as f64).collect(),
                bytes
                    .iter()
                    .filter(|&&b| (b as usize) >= t)
                    .map(|&b| b as f64)
                    .collect(),
            );
            if bg.is_empty() || fg.is_empty() {
                scores.push((t, f64::NEG_INFINITY));
                continue;
            }
            let m0 = bg.iter().sum::<f64>() / bg.len() as f64;
            let m1 = fg.iter().sum::<f64>() / fg.len() as f64;
            let n = bytes.len() as f64;
            scores.push((t, bg.len() as f64 / n * fg.len() as f64 / n * (m0 - m1).powi(2)));
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        scores
            .into_iter()
            .filter(|s| (s.1 - best).abs() <= 1e-12 * best.abs())
            .map(|s| s.0)
            .collect()
    }

    #[test]
    fn bimodal_auto_matches_fixed_midpoint() {
        let px: Vec<f32> = (0..100).map(|i| if i % 3 == 0 { 0.8 } else { 0.1 }).collect();
        let im = Image::square(10, px).unwrap();
        let auto = binarize_mask(&im, Threshold::Auto);
        assert_eq!(auto.mask, binarize_mask(&im, Threshold::Fixed(0.45)).mask);
        let cut = (auto.threshold * 255.0 + 0.5).round() as usize;
        assert!(brute_force_best_cuts(&im).contains(&cut));
    }

    #[test]
    fn otsu_agrees_with_brute_force_on_noisy_images() {
        let mut state = 12345u64;
        for _ in 0..10 {
            let px: Vec<f32> = (0..256)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 33) % 256) as f32 / 255.0
                })
                .collect();
            let im = Image::square(16, px).unwrap();
            let t = otsu_threshold(&im).unwrap();
            let cut = (t * 255.0 + 0.5).round() as usize;
            assert!(brute_force_best_cuts(&im).contains(&cut));
        }
    }
}
