//! Dense float grids shared by images, depth maps, NOCS maps and masks.
//!
//! Pixel `(row i, column j)` sits at continuous coordinates `(u = j, v = i)`;
//! every sampler and camera model in the crate uses this convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous image coordinate. `u` runs along columns, `v` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub u: f64,
    pub v: f64,
}

impl GridPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Row-major `height × width × channels` grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// The four taps of a bilinear lookup.
///
/// `rows`/`cols` are already clamped to the grid, so out-of-bounds lookups
/// degrade to edge-clamped interpolation.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    /// Fractional offsets along u and v.
    pub fu: f64,
    pub fv: f64,
    /// False if any neighbour with non-zero weight lies outside the grid.
    pub in_bounds: bool,
}

impl BilinearTaps {
    /// Weights for `(r0,c0), (r0,c1), (r1,c0), (r1,c1)`.
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fu, fv) = (self.fu, self.fv);
        [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ]
    }

    /// Pixel indices in the same order as [`BilinearTaps::weights`].
    #[inline]
    pub fn pixels(&self) -> [(usize, usize); 4] {
        [
            (self.rows[0], self.cols[0]),
            (self.rows[0], self.cols[1]),
            (self.rows[1], self.cols[0]),
            (self.rows[1], self.cols[1]),
        ]
    }
}

impl FloatGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a grid from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Single-channel grid from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(height, width, 1, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &FloatGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &FloatGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn ensure_same_shape(&self, other: &FloatGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub(crate) fn ensure_mask_for(&self, mask: &FloatGrid, what: &str) -> Result<()> {
        if mask.channels != 1 || !self.same_extent(mask) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: mask {}x{}x{} does not cover grid {}x{}",
                mask.height, mask.width, mask.channels, self.height, self.width
            )));
        }
        Ok(())
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.offset(row, col) + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let o = self.offset(row, col) + channel;
        self.data[o] = value;
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = self.offset(row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Value of a single-channel grid, or channel 0.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[self.offset(row, col)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FloatGrid {
        FloatGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &FloatGrid, f: impl Fn(f64, f64) -> f64) -> Result<FloatGrid> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(FloatGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Mean over every element.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Thresholds at 0.5 into {0, 1}.
    pub fn binarized(&self) -> FloatGrid {
        self.map(|x| if x >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Number of pixels with a non-zero mask value (channel 0).
    pub fn count_nonzero(&self) -> usize {
        (0..self.height)
            .flat_map(|i| (0..self.width).map(move |j| (i, j)))
            .filter(|&(i, j)| self.at(i, j) != 0.0)
            .count()
    }

    /// Pixel-wise product of two single-channel masks.
    pub fn mask_and(&self, other: &FloatGrid) -> Result<FloatGrid> {
        self.zip_map(other, |a, b| if a != 0.0 && b != 0.0 { 1.0 } else { 0.0 })
    }

    /// Erodes a binary mask with a 3×3 structuring element, `radius` times.
    /// Pixels outside the grid count as background.
    pub fn eroded(&self, radius: usize) -> FloatGrid {
        let mut cur = self.binarized();
        for _ in 0..radius {
            let prev = cur.clone();
            for i in 0..self.height {
                for j in 0..self.width {
                    if prev.at(i, j) == 0.0 {
                        continue;
                    }
                    let mut keep = true;
                    'n: for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (ni, nj) = (i as i64 + di, j as i64 + dj);
                            if ni < 0
                                || nj < 0
                                || ni >= self.height as i64
                                || nj >= self.width as i64
                                || prev.at(ni as usize, nj as usize) == 0.0
                            {
                                keep = false;
                                break 'n;
                            }
                        }
                    }
                    if !keep {
                        cur.set(i, j, 0, 0.0);
                    }
                }
            }
        }
        cur
    }

    /// Extracts one channel as a single-channel grid.
    pub fn channel(&self, channel: usize) -> FloatGrid {
        FloatGrid::from_fn(self.height, self.width, 1, |i, j, _| {
            self.get(i, j, channel)
        })
    }

    /// Channel-wise mean as a single-channel grid.
    pub fn channel_mean(&self) -> FloatGrid {
        let c = self.channels as f64;
        FloatGrid::from_fn(self.height, self.width, 1, |i, j, _| {
            self.pixel(i, j).iter().sum::<f64>() / c
        })
    }

    /// Computes the bilinear taps at `p`.
    #[inline]
    pub fn bilinear_taps(&self, p: GridPoint) -> BilinearTaps {
        let max_c = self.width as f64 - 1.0;
        let max_r = self.height as f64 - 1.0;
        let in_bounds = p.u >= 0.0 && p.v >= 0.0 && p.u <= max_c && p.v <= max_r;
        let u = if p.u.is_finite() {
            p.u.clamp(0.0, max_c)
        } else {
            0.0
        };
        let v = if p.v.is_finite() {
            p.v.clamp(0.0, max_r)
        } else {
            0.0
        };
        let c0 = u.floor();
        let r0 = v.floor();
        let fu = u - c0;
        let fv = v - r0;
        let c0 = c0 as usize;
        let r0 = r0 as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        BilinearTaps {
            rows: [r0, r1],
            cols: [c0, c1],
            fu,
            fv,
            in_bounds,
        }
    }

    /// Bilinear lookup into `out` (length = channels). Returns the in-bounds flag.
    pub fn sample_bilinear_into(&self, p: GridPoint, out: &mut [f64]) -> bool {
        let taps = self.bilinear_taps(p);
        self.sample_taps_into(&taps, out);
        taps.in_bounds
    }

    pub(crate) fn sample_taps_into(&self, taps: &BilinearTaps, out: &mut [f64]) {
        let w = taps.weights();
        let px = taps.pixels();
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let mut acc = 0.0;
            for k in 0..4 {
                if w[k] != 0.0 {
                    acc += w[k] * self.get(px[k].0, px[k].1, c);
                }
            }
            *o = acc;
        }
    }

    /// Bilinear interpolation of the four pixel centres around `p`.
    ///
    /// Out-of-bounds points return edge-clamped interpolation together with
    /// `in_bounds == false`.
    pub fn sample_bilinear(&self, p: GridPoint) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.channels];
        let ok = self.sample_bilinear_into(p, &mut out);
        (out, ok)
    }

    /// Forward difference along columns, last column zero.
    pub fn gradient_x(&self) -> Result<FloatGrid> {
        if self.width < 2 {
            return Err(Error::DimensionTooSmall {
                axis: "x",
                needed: 2,
                got: self.width,
            });
        }
        Ok(FloatGrid::from_fn(
            self.height,
            self.width,
            self.channels,
            |i, j, c| {
                if j + 1 < self.width {
                    self.get(i, j + 1, c) - self.get(i, j, c)
                } else {
                    0.0
                }
            },
        ))
    }

    /// Forward difference along rows, last row zero.
    pub fn gradient_y(&self) -> Result<FloatGrid> {
        if self.height < 2 {
            return Err(Error::DimensionTooSmall {
                axis: "y",
                needed: 2,
                got: self.height,
            });
        }
        Ok(FloatGrid::from_fn(
            self.height,
            self.width,
            self.channels,
            |i, j, c| {
                if i + 1 < self.height {
                    self.get(i + 1, j, c) - self.get(i, j, c)
                } else {
                    0.0
                }
            },
        ))
    }

    /// Mean over masked pixels of the channel-averaged value.
    pub fn masked_mean(&self, mask: &FloatGrid) -> Result<f64> {
        self.ensure_mask_for(mask, "masked_mean")?;
        let mut sum = 0.0;
        let mut n = 0usize;
        let c = self.channels as f64;
        for i in 0..self.height {
            for j in 0..self.width {
                if mask.at(i, j) != 0.0 {
                    sum += self.pixel(i, j).iter().sum::<f64>() / c;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_grid_samples_constant() {
        let g = FloatGrid::filled(5, 7, 2, 0.7);
        let (v, ok) = g.sample_bilinear(GridPoint::new(2.3, 1.8));
        assert!(ok);
        for x in v {
            assert!((x - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_half_step() {
        let g = FloatGrid::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let (v, ok) = g.sample_bilinear(GridPoint::new(0.5, 0.0));
        assert!(ok);
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn exact_center_reproduces_value() {
        let g = FloatGrid::from_fn(3, 3, 3, |i, j, c| (i * 7 + j * 3 + c) as f64 * 0.1);
        let (v, ok) = g.sample_bilinear(GridPoint::new(1.0, 1.0));
        assert!(ok);
        assert_eq!(v, g.pixel(1, 1).to_vec());
        // Last row / column are still in bounds.
        let (v, ok) = g.sample_bilinear(GridPoint::new(2.0, 2.0));
        assert!(ok);
        assert_eq!(v, g.pixel(2, 2).to_vec());
    }

    #[test]
    fn out_of_bounds_is_flagged_and_clamped() {
        let g = FloatGrid::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let (v, ok) = g.sample_bilinear(GridPoint::new(-0.5, 0.0));
        assert!(!ok);
        assert_eq!(v[0], 1.0);
        let (_, ok) = g.sample_bilinear(GridPoint::new(1.0001, 0.0));
        assert!(!ok);
    }

    #[test]
    fn gradients_match_hand_differences() {
        let g = FloatGrid::from_rows(&[&[1.0, 3.0], &[2.0, 2.0]]).unwrap();
        let gx = g.gradient_x().unwrap();
        assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0]);
        let gy = g.gradient_y().unwrap();
        assert_eq!(gy.data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn ramp_gradient() {
        let g = FloatGrid::from_fn(4, 5, 1, |_, j, _| j as f64);
        let gx = g.gradient_x().unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(gx.at(i, j), if j < 4 { 1.0 } else { 0.0 });
            }
        }
        assert!(FloatGrid::filled(3, 3, 1, 2.0)
            .gradient_y()
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_rejects_thin_grids() {
        let g = FloatGrid::zeros(3, 1, 1);
        assert!(matches!(
            g.gradient_x(),
            Err(Error::DimensionTooSmall { axis: "x", .. })
        ));
        assert!(FloatGrid::zeros(1, 3, 1).gradient_y().is_err());
    }

    #[test]
    fn masked_mean_cases() {
        let g = FloatGrid::from_rows(&[&[1.0, 5.0], &[9.0, 9.0]]).unwrap();
        let m = FloatGrid::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(g.masked_mean(&m).unwrap(), 3.0);
        let c = FloatGrid::filled(2, 2, 3, 2.0);
        assert_eq!(c.masked_mean(&m).unwrap(), 2.0);
        assert!(matches!(
            g.masked_mean(&FloatGrid::zeros(2, 2, 1)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn erosion_peels_border() {
        let m = FloatGrid::filled(5, 5, 1, 1.0);
        let e = m.eroded(1);
        assert_eq!(e.count_nonzero(), 9);
        assert_eq!(m.eroded(2).count_nonzero(), 1);
    }

    fn grid_strategy() -> impl Strategy<Value = FloatGrid> {
        (2usize..6, 2usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(-10.0f64..10.0, h * w * c)
                .prop_map(move |d| FloatGrid::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn integer_centers_are_exact(g in grid_strategy()) {
            for i in 0..g.height() {
                for j in 0..g.width() {
                    let (v, ok) = g.sample_bilinear(GridPoint::new(j as f64, i as f64));
                    prop_assert!(ok);
                    prop_assert_eq!(&v[..], g.pixel(i, j));
                }
            }
        }

        #[test]
        fn full_mask_mean_is_plain_mean(g in grid_strategy()) {
            let m = FloatGrid::filled(g.height(), g.width(), 1, 1.0);
            prop_assert!((g.masked_mean(&m).unwrap() - g.mean()).abs() < 1e-12);
        }

        #[test]
        fn gradients_are_linear(g in grid_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let h = g.map(|x| x.sin());
            let combo = g.zip_map(&h, |x, y| a * x + b * y).unwrap();
            for (lhs, (gx, hx)) in [
                (combo.gradient_x().unwrap(), (g.gradient_x().unwrap(), h.gradient_x().unwrap())),
                (combo.gradient_y().unwrap(), (g.gradient_y().unwrap(), h.gradient_y().unwrap())),
            ] {
                let rhs = gx.zip_map(&hx, |x, y| a * x + b * y).unwrap();
                for (l, r) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((l - r).abs() < 1e-9);
                }
            }
        }
    }
}
