//! Per-pixel SSIM with a 3×3 mean window.

use crate::error::Result;
use crate::grid::FloatGrid;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// SSIM map of `a` against `b`, averaged over channels.
///
/// Window statistics use a 3×3 box filter with reflected borders.
pub fn ssim(a: &FloatGrid, b: &FloatGrid) -> Result<FloatGrid> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let mut out = FloatGrid::zeros(h, w, 1);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in -1i64..=1 {
                    let r = reflect(i as i64 + di, h);
                    for dj in -1i64..=1 {
                        let q = reflect(j as i64 + dj, w);
                        let x = a.get(r, q, c);
                        let y = b.get(r, q, c);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let mu_a = sa / 9.0;
                let mu_b = sb / 9.0;
                let var_a = saa / 9.0 - mu_a * mu_a;
                let var_b = sbb / 9.0 - mu_b * mu_b;
                let cov = sab / 9.0 - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
            }
            out.set(i, j, 0, acc / ch as f64);
        }
    }
    Ok(out)
}
