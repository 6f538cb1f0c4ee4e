//! Volume quality metrics: PSNR, NMSE, and SSIM.
//!
//! All statistics accumulate in f64 regardless of the tensor precision.
//! SSIM uses uniform cubic windows evaluated through integral volumes, so
//! the cost is linear in voxels rather than voxels times window size.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// PSNR value reported when prediction and reference are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Quality of one denoised volume against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub nmse: f64,
    pub ssim: f64,
    pub site_id: u32,
    pub count_level: f64,
    pub subject_id: u32,
}

impl MetricReport {
    pub fn measure<T: Element>(
        pred: &Tensor<T>,
        reference: &Tensor<T>,
        site_id: u32,
        count_level: f64,
        subject_id: u32,
    ) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(pred, reference)?,
            nmse: nmse(pred, reference)?,
            ssim: ssim(pred, reference)?,
            site_id,
            count_level,
            subject_id,
        })
    }
}

fn check_congruent<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<()> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "metric inputs have shapes {:?} and {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, with peak = max(reference).
/// Identical volumes report [`PSNR_CAP_DB`].
pub fn psnr<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_congruent(pred, reference)?;
    let rd = reference.data();
    let peak = rd.iter().map(|v| v.to_f64()).fold(f64::MIN, f64::max);
    if peak <= 0.0 {
        return Err(Error::domain(
            "psnr needs a reference with a positive peak value",
        ));
    }
    let pd = pred.data();
    let mut se = 0.0f64;
    for (&p, &r) in pd.iter().zip(rd.iter()) {
        let diff = p.to_f64() - r.to_f64();
        se += diff * diff;
    }
    let mse = se / pd.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized mean squared error: `||pred - ref||^2 / ||ref||^2`.
pub fn nmse<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_congruent(pred, reference)?;
    let pd = pred.data();
    let rd = reference.data();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&p, &r) in pd.iter().zip(rd.iter()) {
        let rv = r.to_f64();
        let diff = p.to_f64() - rv;
        num += diff * diff;
        den += rv * rv;
    }
    if den == 0.0 {
        return Err(Error::domain("nmse needs a nonzero reference"));
    }
    Ok(num / den)
}

/// Mean SSIM over all valid uniform 7x7x7 windows, with dynamic range
/// taken from the reference (`max - min`).
pub fn ssim<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    let rd = reference.data();
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for &v in rd.iter() {
        let f = v.to_f64();
        lo = lo.min(f);
        hi = hi.max(f);
    }
    drop(rd);
    let mut range = hi - lo;
    if range <= 0.0 {
        // Constant reference: fall back to a unit range instead of a
        // degenerate zero that would zero both stabilizers.
        range = 1.0;
    }
    ssim_with_range(pred, reference, range)
}

/// Extracts the trailing three spatial dims; leading dims must be 1.
fn spatial3<T: Element>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "ssim expects a single volume with three spatial dims, got {s:?}"
        )));
    }
    Ok((s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]))
}

/// Integral volume: `out[h][w][d]` = sum over the box `[0,h) x [0,w) x [0,d)`.
fn integral(values: impl Iterator<Item = f64>, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (w1, d1) = (w + 1, d + 1);
    let mut out = vec![0.0f64; (h + 1) * w1 * d1];
    let mut vals = values;
    for i in 1..=h {
        for j in 1..=w {
            let mut row_sum = 0.0;
            for k in 1..=d {
                row_sum += vals.next().unwrap();
                // plane above + column to the left within this plane.
                out[(i * w1 + j) * d1 + k] =
                    out[((i - 1) * w1 + j) * d1 + k] + out[(i * w1 + (j - 1)) * d1 + k]
                        - out[((i - 1) * w1 + (j - 1)) * d1 + k]
                        + row_sum;
            }
        }
    }
    out
}

#[inline]
fn box_sum(iv: &[f64], w1: usize, d1: usize, i: usize, j: usize, k: usize, n: usize) -> f64 {
    let (i1, j1, k1) = (i + n, j + n, k + n);
    let at = |a: usize, b: usize, c: usize| iv[(a * w1 + b) * d1 + c];
    at(i1, j1, k1) - at(i, j1, k1) - at(i1, j, k1) - at(i1, j1, k)
        + at(i, j, k1)
        + at(i, j1, k)
        + at(i1, j, k)
        - at(i, j, k)
}

/// SSIM with an externally fixed dynamic range; symmetric in its volume
/// arguments.
pub fn ssim_with_range<T: Element>(
    pred: &Tensor<T>,
    reference: &Tensor<T>,
    range: f64,
) -> Result<f64> {
    check_congruent(pred, reference)?;
    let (h, w, d) = spatial3(pred)?;
    let n = SSIM_WINDOW;
    if h < n || w < n || d < n {
        return Err(Error::shape(format!(
            "volume {h}x{w}x{d} is smaller than the {n}^3 ssim window"
        )));
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let pd = pred.data();
    let rd = reference.data();
    let sp = integral(pd.iter().map(|v| v.to_f64()), h, w, d);
    let sr = integral(rd.iter().map(|v| v.to_f64()), h, w, d);
    let spp = integral(pd.iter().map(|v| v.to_f64() * v.to_f64()), h, w, d);
    let srr = integral(rd.iter().map(|v| v.to_f64() * v.to_f64()), h, w, d);
    let spr = integral(
        pd.iter().zip(rd.iter()).map(|(p, r)| p.to_f64() * r.to_f64()),
        h,
        w,
        d,
    );
    drop(pd);
    drop(rd);

    let (w1, d1) = (w + 1, d + 1);
    let inv_n = 1.0 / (n * n * n) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for i in 0..=h - n {
        for j in 0..=w - n {
            for k in 0..=d - n {
                let mx = box_sum(&sp, w1, d1, i, j, k, n) * inv_n;
                let my = box_sum(&sr, w1, d1, i, j, k, n) * inv_n;
                let vx = box_sum(&spp, w1, d1, i, j, k, n) * inv_n - mx * mx;
                let vy = box_sum(&srr, w1, d1, i, j, k, n) * inv_n - my * my;
                let cxy = box_sum(&spr, w1, d1, i, j, k, n) * inv_n - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
