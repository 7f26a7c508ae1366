//! Volumetric PSNR and SSIM.
//!
//! SSIM uses a uniform 7×7×7 window over every fully contained position,
//! sample (N−1) statistics, `K1 = 0.01`, `K2 = 0.03`, and the reference's
//! `max − min` as data range unless one is supplied.

use ndarray::{ArrayBase, Axis, Data, Dimension, Ix3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(pred: &Volume<f32>, reference: &Volume<f32>) -> Result<()> {
    if pred.data.dim() != reference.data.dim() {
        return Err(Error::Dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.data.dim(),
            reference.data.dim()
        )));
    }
    Ok(())
}

/// PSNR over paired samples with peak `max(reference)`; `+∞` for identical data.
pub fn psnr_values<T: Copy + Into<f64>>(pred: impl IntoIterator<Item = T>, reference: impl IntoIterator<Item = T>) -> Result<f64> {
    let (mut sse, mut peak, mut n) = (0.0f64, f64::NEG_INFINITY, 0usize);
    let (mut pi, mut ri) = (pred.into_iter(), reference.into_iter());
    loop {
        match (pi.next(), ri.next()) {
            (Some(p), Some(r)) => {
                let (p, r): (f64, f64) = (p.into(), r.into());
                sse += (p - r) * (p - r);
                peak = peak.max(r);
                n += 1;
            }
            (None, None) => break,
            _ => return Err(Error::Dimension("metric inputs differ in length".into())),
        }
    }
    if n == 0 {
        return Err(Error::Dimension("empty metric inputs".into()));
    }
    if !(peak > 0.0) {
        return Err(Error::Metric(format!("undefined PSNR peak: reference maximum is {peak}")));
    }
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / n as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR between equally shaped arrays of any dimensionality.
pub fn psnr_array<T, S, D>(pred: &ArrayBase<S, D>, reference: &ArrayBase<S, D>) -> Result<f64>
where
    T: Copy + Into<f64>,
    S: Data<Elem = T>,
    D: Dimension,
{
    if pred.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    psnr_values(pred.iter().copied(), reference.iter().copied())
}

/// `10·log10(max(ref)² / MSE)` over the whole volume.
pub fn psnr(pred: &Volume<f32>, reference: &Volume<f32>) -> Result<f64> {
    psnr_array(&pred.data, &reference.data)
}

/// 3D inclusive prefix sums with a zero border, so box sums are O(1).
struct Integral {
    d: [usize; 3],
    s: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [a, b, c] = dims;
        let d = [a + 1, b + 1, c + 1];
        let mut s = vec![0.0; d[0] * d[1] * d[2]];
        let at = |i: usize, j: usize, k: usize| (i * d[1] + j) * d[2] + k;
        for i in 1..=a {
            for j in 1..=b {
                for k in 1..=c {
                    let v = f(((i - 1) * b + (j - 1)) * c + (k - 1));
                    s[at(i, j, k)] = v + s[at(i - 1, j, k)] + s[at(i, j - 1, k)] + s[at(i, j, k - 1)]
                        - s[at(i - 1, j - 1, k)]
                        - s[at(i - 1, j, k - 1)]
                        - s[at(i, j - 1, k - 1)]
                        + s[at(i - 1, j - 1, k - 1)];
                }
            }
        }
        Integral { d, s }
    }

    /// Sum over `[i, i+w0) × [j, j+w1) × [k, k+w2)`.
    fn box_sum(&self, i: usize, j: usize, k: usize, w: [usize; 3]) -> f64 {
        let d = self.d;
        let at = |i: usize, j: usize, k: usize| self.s[(i * d[1] + j) * d[2] + k];
        let (i1, j1, k1) = (i + w[0], j + w[1], k + w[2]);
        at(i1, j1, k1) - at(i, j1, k1) - at(i1, j, k1) - at(i1, j1, k) + at(i, j, k1) + at(i, j1, k) + at(i1, j, k)
            - at(i, j, k)
    }
}

fn window_for(n: usize) -> usize {
    let w = SSIM_WINDOW.min(n);
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

fn ssim_grid(x: &[f64], y: &[f64], dims: [usize; 3], range: f64) -> f64 {
    let w = dims.map(window_for);
    let n = (w[0] * w[1] * w[2]) as f64;
    let cov_norm = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let sx = Integral::new(dims, |i| x[i]);
    let sy = Integral::new(dims, |i| y[i]);
    let sxx = Integral::new(dims, |i| x[i] * x[i]);
    let syy = Integral::new(dims, |i| y[i] * y[i]);
    let sxy = Integral::new(dims, |i| x[i] * y[i]);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=dims[0] - w[0] {
        for j in 0..=dims[1] - w[1] {
            for k in 0..=dims[2] - w[2] {
                let mx = sx.box_sum(i, j, k, w) / n;
                let my = sy.box_sum(i, j, k, w) / n;
                let vx = cov_norm * (sxx.box_sum(i, j, k, w) / n - mx * mx);
                let vy = cov_norm * (syy.box_sum(i, j, k, w) / n - my * my);
                let cxy = cov_norm * (sxy.box_sum(i, j, k, w) / n - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Mean local SSIM of two 3D grids with an explicit data range.
pub fn ssim_array<T, S>(pred: &ArrayBase<S, Ix3>, reference: &ArrayBase<S, Ix3>, data_range: f64) -> Result<f64>
where
    T: Copy + Into<f64>,
    S: Data<Elem = T>,
{
    if pred.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Metric(format!("SSIM data range must be positive, got {data_range}")));
    }
    let (a, b, c) = pred.dim();
    let x: Vec<f64> = pred.iter().map(|&v| v.into()).collect();
    let y: Vec<f64> = reference.iter().map(|&v| v.into()).collect();
    Ok(ssim_grid(&x, &y, [a, b, c], data_range))
}

/// Mean local SSIM with an explicit data range, averaged over channels.
pub fn ssim_with_range(pred: &Volume<f32>, reference: &Volume<f32>, data_range: f64) -> Result<f64> {
    check_shapes(pred, reference)?;
    let mut acc = 0.0;
    for c in 0..pred.channels() {
        acc += ssim_array(&pred.data.index_axis(Axis(0), c), &reference.data.index_axis(Axis(0), c), data_range)?;
    }
    Ok(acc / pred.channels() as f64)
}

/// Mean local SSIM with data range `max(ref) − min(ref)`.
pub fn ssim(pred: &Volume<f32>, reference: &Volume<f32>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (lo, hi) = reference.min_max();
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return Err(Error::Metric("SSIM undefined: reference has zero data range".into()));
    }
    ssim_with_range(pred, reference, range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zero std for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over subjects.
    pub psnr_db: f64,
    pub ssim: f64,
    pub psnr_summary: MeanStd,
    pub ssim_summary: MeanStd,
    pub per_subject: Vec<SubjectMetrics>,
}

impl MetricReport {
    pub fn from_subjects(per_subject: Vec<SubjectMetrics>) -> Result<Self> {
        if per_subject.is_empty() {
            return Err(Error::EmptyDataset("no subjects to summarize".into()));
        }
        let p: Vec<f64> = per_subject.iter().map(|s| s.psnr_db).collect();
        let s: Vec<f64> = per_subject.iter().map(|s| s.ssim).collect();
        let (psnr_summary, ssim_summary) = (MeanStd::of(&p), MeanStd::of(&s));
        Ok(MetricReport {
            psnr_db: psnr_summary.mean,
            ssim: ssim_summary.mean,
            psnr_summary,
            ssim_summary,
            per_subject,
        })
    }

    /// Scores one subject and appends it.
    pub fn evaluate(subject: &str, pred: &Volume<f32>, reference: &Volume<f32>) -> Result<SubjectMetrics> {
        Ok(SubjectMetrics {
            subject: subject.to_string(),
            psnr_db: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
        })
    }
}
