//! Structural similarity with a uniform sliding window.
//!
//! Each `window x window` patch contributes
//! `(2 μx μy + C1)(2 σxy + C2) / ((μx² + μy² + C1)(σx² + σy² + C2))`
//! with population moments; the index is the mean over all valid windows,
//! planes and images.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams::for_range(1.0)
    }
}

impl SsimParams {
    /// Window 7 with the conventional `(0.01 L)²` and `(0.03 L)²` constants.
    pub fn for_range(dynamic_range: f64) -> Self {
        SsimParams {
            window: 7,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            bail!(
                Config,
                "SSIM window must be odd and >= 3, got {}",
                self.window
            );
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 || self.dynamic_range <= 0.0 {
            bail!(Config, "SSIM constants must be positive");
        }
        Ok(())
    }
}

/// (planes, height, width) of an image tensor; rank 2 (HxW), 3 (CxHxW) or 4 (NxCxHxW).
fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    let d = t.dims();
    match d.len() {
        2 => Ok((1, d[0], d[1])),
        3 => Ok((d[0], d[1], d[2])),
        4 => Ok((d[0] * d[1], d[2], d[3])),
        _ => bail!(Dimension, "SSIM expects an image tensor, got {:?}", d),
    }
}

fn check(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<(usize, usize, usize)> {
    p.validate()?;
    if x.dims() != y.dims() {
        bail!(
            Dimension,
            "SSIM inputs differ in shape: {:?} vs {:?}",
            x.dims(),
            y.dims()
        );
    }
    let (np, h, w) = planes(x)?;
    if p.window > h || p.window > w {
        bail!(
            Dimension,
            "SSIM window {} larger than {}x{} image",
            p.window,
            h,
            w
        );
    }
    Ok((np, h, w))
}

/// Mean SSIM of one plane, optionally accumulating d(mean)/dx into `grad`.
fn plane_ssim(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    p: &SsimParams,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let k = p.window;
    let n = (k * k) as f64;
    let (hw, ww) = (h - k + 1, w - k + 1);
    let count = (hw * ww) as f64;
    let mut total = 0.0;
    for oy in 0..hw {
        for ox in 0..ww {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                let row = (oy + dy) * w + ox;
                for i in row..row + k {
                    let (a, b) = (x[i], y[i]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            let a1 = 2.0 * mx * my + p.c1;
            let a2 = 2.0 * cxy + p.c2;
            let b1 = mx * mx + my * my + p.c1;
            let b2 = vx + vy + p.c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if let Some(g) = grad.as_deref_mut() {
                // dS/dx_i = [(dA1 A2 + A1 dA2) B1 B2 - A1 A2 (dB1 B2 + B1 dB2)] / (B1 B2)^2
                let den = b1 * b2;
                let scale = 1.0 / (count * den * den);
                for dy in 0..k {
                    let row = (oy + dy) * w + ox;
                    for i in row..row + k {
                        let da1 = 2.0 * my / n;
                        let da2 = 2.0 * (y[i] - my) / n;
                        let db1 = 2.0 * mx / n;
                        let db2 = 2.0 * (x[i] - mx) / n;
                        let num = (da1 * a2 + a1 * da2) * den - a1 * a2 * (db1 * b2 + b1 * db2);
                        g[i] += num * scale;
                    }
                }
            }
        }
    }
    total / count
}

/// Mean SSIM over every window, plane and image. Not clamped.
pub fn ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<f64> {
    let (np, h, w) = check(x, y, p)?;
    let hw = h * w;
    let s: f64 = (0..np)
        .map(|i| {
            plane_ssim(
                &x.data()[i * hw..][..hw],
                &y.data()[i * hw..][..hw],
                h,
                w,
                p,
                None,
            )
        })
        .sum();
    Ok(s / np as f64)
}

/// SSIM reported on `[0, 1]`.
pub fn ssim_clamped(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<f64> {
    Ok(ssim(x, y, p)?.clamp(0.0, 1.0))
}

/// Per-image SSIM for `[N, C, H, W]` batches, each clamped to `[0, 1]`.
pub fn ssim_per_image(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<Vec<f64>> {
    check(x, y, p)?;
    let d = x.dims();
    if d.len() != 4 {
        bail!(Dimension, "per-image SSIM expects NCHW, got {:?}", d);
    }
    let (c, h, w) = (d[1], d[2], d[3]);
    let hw = h * w;
    Ok((0..d[0])
        .map(|n| {
            let s: f64 = (0..c)
                .map(|ch| {
                    let at = (n * c + ch) * hw;
                    plane_ssim(
                        &x.data()[at..at + hw],
                        &y.data()[at..at + hw],
                        h,
                        w,
                        p,
                        None,
                    )
                })
                .sum();
            (s / c as f64).clamp(0.0, 1.0)
        })
        .collect())
}

/// Mean SSIM and its gradient with respect to `x`.
pub(crate) fn ssim_value_and_grad(
    x: &Tensor,
    y: &Tensor,
    p: &SsimParams,
) -> Result<(f64, Vec<f64>)> {
    let (np, h, w) = check(x, y, p)?;
    let hw = h * w;
    let mut grad = vec![0.0; x.numel()];
    let mut total = 0.0;
    for i in 0..np {
        let g = &mut grad[i * hw..][..hw];
        total += plane_ssim(
            &x.data()[i * hw..][..hw],
            &y.data()[i * hw..][..hw],
            h,
            w,
            p,
            Some(g),
        );
    }
    grad.iter_mut().for_each(|g| *g /= np as f64);
    Ok((total / np as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new_f64(dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, &[2, 3, 12, 10]);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_closed_form() {
        let p = SsimParams::for_range(1.0);
        let a = Tensor::new_f64(&[8, 8], vec![1.0; 64]).unwrap();
        let b = Tensor::new_f64(&[8, 8], vec![0.0; 64]).unwrap();
        let expected = 1e-4 / 1.0001;
        assert!((ssim(&a, &b, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = random_image(&mut rng, &[1, 16, 16]);
            let y = random_image(&mut rng, &[1, 16, 16]);
            let p = SsimParams::default();
            assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_params() {
        let a = Tensor::new_f64(&[8, 8], vec![0.0; 64]).unwrap();
        let b = Tensor::new_f64(&[8, 9], vec![0.0; 72]).unwrap();
        assert!(matches!(
            ssim(&a, &b, &SsimParams::default()),
            Err(crate::Error::Dimension(_))
        ));
        let p = SsimParams {
            window: 4,
            ..SsimParams::default()
        };
        assert!(ssim(&a, &a, &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, &[1, 1, 9, 9]);
        let y = random_image(&mut rng, &[1, 1, 9, 9]);
        let p = SsimParams {
            window: 5,
            ..SsimParams::default()
        };
        let (_, g) = ssim_value_and_grad(&x, &y, &p).unwrap();
        let h = 1e-6;
        for i in [0, 13, 40, 80] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (ssim(&xp, &y, &p).unwrap() - ssim(&xm, &y, &p).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "i={} fd={} an={}",
                i,
                fd,
                g[i]
            );
        }
    }
}
