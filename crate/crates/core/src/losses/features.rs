//! Fixed convolutional feature bank used by the perceptual loss.
//!
//! Stands in for a pretrained feature extractor: a handful of oriented edge
//! kernels plus seeded random kernels at two scales, each followed by a
//! ReLU. Responses whose receptive field contains no foreground pixel are
//! zeroed before comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FloatGrid;

/// One `size × size × channels` kernel evaluated every `stride` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilter {
    pub size: usize,
    pub stride: usize,
    pub channels: usize,
    /// Indexed `[(dy * size + dx) * channels + c]`.
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ConvFilter {
    #[inline]
    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// Output grid size for an input of `h × w`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Inclusive input row and column ranges seen by output cell `(row, col)`,
    /// clipped to an `h × w` input.
    pub fn receptive_field(
        &self,
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    ) -> ((usize, usize), (usize, usize)) {
        let r = self.radius() as i64;
        let (ci, cj) = ((row * self.stride) as i64, (col * self.stride) as i64);
        let clip = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
        (
            (clip(ci - r, h), clip(ci + r, h)),
            (clip(cj - r, w), clip(cj + r, w)),
        )
    }

    fn respond(&self, img: &FloatGrid, row: usize, col: usize) -> f64 {
        let r = self.radius() as i64;
        let (ci, cj) = ((row * self.stride) as i64, (col * self.stride) as i64);
        let (h, w) = (img.height() as i64, img.width() as i64);
        let mut acc = self.bias;
        for dy in 0..self.size as i64 {
            let y = ci + dy - r;
            if y < 0 || y >= h {
                continue;
            }
            for dx in 0..self.size as i64 {
                let x = cj + dx - r;
                if x < 0 || x >= w {
                    continue;
                }
                let base = ((dy as usize) * self.size + dx as usize) * self.channels;
                let px = img.pixel(y as usize, x as usize);
                for c in 0..self.channels {
                    acc += self.weights[base + c] * px[c];
                }
            }
        }
        acc.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub seed: u64,
    filters: Vec<ConvFilter>,
}

/// Summed-area table over a binary mask for O(1) window occupancy tests.
struct MaskIntegral {
    w: usize,
    sums: Vec<u32>,
}

impl MaskIntegral {
    fn new(mask: &FloatGrid) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let mut sums = vec![0u32; (h + 1) * (w + 1)];
        for i in 0..h {
            let mut row = 0u32;
            for j in 0..w {
                row += u32::from(mask.at(i, j) != 0.0);
                sums[(i + 1) * (w + 1) + j + 1] = sums[i * (w + 1) + j + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn any(&self, (r0, r1): (usize, usize), (c0, c1): (usize, usize)) -> bool {
        let s = |i: usize, j: usize| self.sums[i * (self.w + 1) + j];
        s(r1 + 1, c1 + 1) + s(r0, c0) > s(r0, c1 + 1) + s(r1 + 1, c0)
    }
}

impl FeatureBank {
    /// Default bank for `channels`-channel inputs: four oriented 3×3 edge
    /// kernels, four random 3×3 kernels at stride 1 and four random 5×5
    /// kernels at stride 2.
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut filters = Vec::new();
        let sobel_x = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
        let sobel_y = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        let diag_a = [0.0, 1.0, 2.0, -1.0, 0.0, 1.0, -2.0, -1.0, 0.0];
        let diag_b = [2.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, -2.0];
        for k in [sobel_x, sobel_y, diag_a, diag_b] {
            let weights = k
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / (8.0 * channels as f64), channels))
                .collect();
            filters.push(ConvFilter {
                size: 3,
                stride: 1,
                channels,
                weights,
                bias: 0.0,
            });
        }
        for (size, stride) in [(3, 1); 4].into_iter().chain([(5, 2); 4]) {
            let mut weights: Vec<f64> = (0..size * size * channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mean = weights.iter().sum::<f64>() / weights.len() as f64;
            weights.iter_mut().for_each(|x| *x -= mean);
            let l1: f64 = weights.iter().map(|x| x.abs()).sum();
            weights.iter_mut().for_each(|x| *x /= l1);
            filters.push(ConvFilter {
                size,
                stride,
                channels,
                weights,
                bias: rng.random_range(-0.05..0.05),
            });
        }
        Self { seed, filters }
    }

    pub fn filters(&self) -> &[ConvFilter] {
        &self.filters
    }

    /// Largest receptive-field radius over all filters.
    pub fn max_radius(&self) -> usize {
        self.filters
            .iter()
            .map(ConvFilter::radius)
            .max()
            .unwrap_or(0)
    }

    /// Rectified responses of every filter; cells whose receptive field holds
    /// no mask pixel are zero.
    pub fn responses(&self, img: &FloatGrid, mask: &FloatGrid) -> Result<Vec<FloatGrid>> {
        self.check(img, mask)?;
        let integral = MaskIntegral::new(mask);
        let (h, w) = (img.height(), img.width());
        Ok(self
            .filters
            .iter()
            .map(|f| {
                let (oh, ow) = f.output_size(h, w);
                FloatGrid::from_fn(oh, ow, 1, |i, j, _| {
                    let (rr, cr) = f.receptive_field(i, j, h, w);
                    if integral.any(rr, cr) {
                        f.respond(img, i, j)
                    } else {
                        0.0
                    }
                })
            })
            .collect())
    }

    fn check(&self, img: &FloatGrid, mask: &FloatGrid) -> Result<()> {
        img.ensure_mask_for(mask, "feature bank")?;
        if let Some(f) = self.filters.first() {
            if f.channels != img.channels() {
                return Err(Error::ShapeMismatch(format!(
                    "feature bank expects {} channels, image has {}",
                    f.channels,
                    img.channels()
                )));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference between masked feature responses of `a` and `b`,
/// averaged over every response cell whose receptive field touches the mask.
pub fn perceptual_loss(
    a: &FloatGrid,
    b: &FloatGrid,
    mask: &FloatGrid,
    bank: &FeatureBank,
) -> Result<f64> {
    a.ensure_same_shape(b, "perceptual_loss")?;
    bank.check(a, mask)?;
    let integral = MaskIntegral::new(mask);
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in &bank.filters {
        let (oh, ow) = f.output_size(h, w);
        for i in 0..oh {
            for j in 0..ow {
                let (rr, cr) = f.receptive_field(i, j, h, w);
                if integral.any(rr, cr) {
                    sum += (f.respond(a, i, j) - f.respond(b, i, j)).abs();
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> FloatGrid {
        FloatGrid::from_fn(20, 24, 3, |i, j, c| {
            0.5 + 0.3 * ((0.5 * i as f64 + c as f64).sin() * (0.3 * j as f64).cos())
        })
    }

    fn center_mask() -> FloatGrid {
        FloatGrid::from_fn(20, 24, 1, |i, j, _| {
            if (6..14).contains(&i) && (8..16).contains(&j) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identical_inputs_give_zero() {
        let bank = FeatureBank::new(7, 3);
        let img = image();
        assert_eq!(
            perceptual_loss(&img, &img, &center_mask(), &bank).unwrap(),
            0.0
        );
    }

    #[test]
    fn background_edits_beyond_receptive_field_are_ignored() {
        let bank = FeatureBank::new(7, 3);
        let a = image();
        let mut b = a.clone();
        // A kept cell reaches at most 2r beyond the mask: r to its centre,
        // r more to the edge of its window.
        let reach = 2 * bank.max_radius();
        for i in 0..20 {
            for j in 0..24 {
                let far = i + reach < 6 || i > 13 + reach || j + reach < 8 || j > 15 + reach;
                if far {
                    for c in 0..3 {
                        b.set(i, j, c, 1.0 - a.get(i, j, c));
                    }
                }
            }
        }
        assert_ne!(a, b);
        assert_eq!(perceptual_loss(&a, &b, &center_mask(), &bank).unwrap(), 0.0);
    }

    #[test]
    fn edits_inside_mask_are_penalized() {
        let bank = FeatureBank::new(7, 3);
        let a = image();
        let mut b = a.clone();
        b.set(10, 12, 0, 0.95);
        b.set(10, 12, 1, 0.05);
        assert!(perceptual_loss(&a, &b, &center_mask(), &bank).unwrap() > 0.0);
    }

    #[test]
    fn responses_zero_outside_receptive_field() {
        let bank = FeatureBank::new(1, 3);
        let mask = center_mask();
        let resp = bank.responses(&image(), &mask).unwrap();
        for (f, r) in bank.filters().iter().zip(&resp) {
            for i in 0..r.height() {
                for j in 0..r.width() {
                    let ((r0, r1), (c0, c1)) = f.receptive_field(i, j, 20, 24);
                    let touches = (r0..=r1).any(|y| (c0..=c1).any(|x| mask.at(y, x) != 0.0));
                    if !touches {
                        assert_eq!(r.at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn bank_is_deterministic_per_seed() {
        assert_eq!(FeatureBank::new(3, 3), FeatureBank::new(3, 3));
        assert_ne!(FeatureBank::new(3, 3), FeatureBank::new(4, 3));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let bank = FeatureBank::new(3, 1);
        assert!(perceptual_loss(&image(), &image(), &center_mask(), &bank).is_err());
    }
}
