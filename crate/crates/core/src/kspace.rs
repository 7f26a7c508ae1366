//! Fourier-domain machinery: variable-density masks, retrospective
//! undersampling, data consistency, phase restoration and coil projection.
//!
//! k-space grids are stored centred (DC at index `n/2` along every axis).
//! Transforms are orthonormal and evaluated in double precision.

use ndarray::{Array2, Array3, Array4, Axis, Zip};
use num_complex::{Complex32, Complex64};
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::volume::{Sample, Volume};
use crate::{seed, Error, Result};

/// Binary phase-encode plane mask, broadcast along the readout axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub grid: Array2<u8>,
    /// Target acceleration factor.
    pub r: f64,
    /// Solved density standard deviation in pixels.
    pub sigma: f64,
    pub seed: u64,
}

impl SamplingMask {
    /// Mask sampling every point (rate 1). Useful as an identity operator.
    pub fn full(n1: usize, n2: usize) -> Self {
        SamplingMask {
            grid: Array2::ones((n1, n2)),
            r: 1.0,
            sigma: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn center(&self) -> (usize, usize) {
        let (n1, n2) = self.grid.dim();
        (n1 / 2, n2 / 2)
    }

    pub fn rate(&self) -> f64 {
        self.grid.iter().map(|&v| v as f64).sum::<f64>() / self.grid.len() as f64
    }

    pub fn is_sampled(&self, i: usize, j: usize) -> bool {
        self.grid[[i, j]] != 0
    }
}

/// Acceptance probability `min(1, exp(-d²/(2σ²)))` for every grid point.
pub fn density(n1: usize, n2: usize, sigma: f64) -> Array2<f64> {
    let (c1, c2) = ((n1 / 2) as f64, (n2 / 2) as f64);
    Array2::from_shape_fn((n1, n2), |(i, j)| {
        let d2 = (i as f64 - c1).powi(2) + (j as f64 - c2).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp().min(1.0)
    })
}

fn mean_density(n1: usize, n2: usize, sigma: f64) -> f64 {
    density(n1, n2, sigma).mean().unwrap_or(0.0)
}

/// Solves for σ such that the mean acceptance probability equals `rate`.
pub fn solve_sigma(n1: usize, n2: usize, rate: f64) -> Result<f64> {
    let floor = 1.0 / (n1 * n2) as f64;
    if !(rate > floor && rate < 1.0) {
        return Err(Error::InvalidRate(format!(
            "rate {rate} unreachable on a {n1}x{n2} grid (must lie in ({floor}, 1))"
        )));
    }
    let mut lo = 1e-3;
    let mut hi = (n1.max(n2) as f64) * 4.0;
    while mean_density(n1, n2, hi) < rate {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = mean_density(n1, n2, mid);
        if (m - rate).abs() <= 1e-4 * rate {
            return Ok(mid);
        }
        if m < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Variable-density random mask with a Gaussian density centred on DC.
pub fn generate_vd_mask(n1: usize, n2: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    if n1 < 4 || n2 < 4 {
        return Err(Error::Dimension(format!("mask grid {n1}x{n2} must be at least 4x4")));
    }
    if !(r > 1.0) || !r.is_finite() {
        return Err(Error::InvalidRate(format!("acceleration factor {r} must exceed 1")));
    }
    let sigma = solve_sigma(n1, n2, 1.0 / r)?;
    let p = density(n1, n2, sigma);
    let mut rng = seed::rng(seed);
    let mut grid = p.mapv(|pk| u8::from(rng.random::<f64>() < pk));
    grid[[n1 / 2, n2 / 2]] = 1;
    Ok(SamplingMask { grid, r, sigma, seed })
}

/// Undersampled k-space of a single-channel volume.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceVolume {
    pub data: Array3<Complex32>,
    pub mask: SamplingMask,
    pub readout_axis: usize,
}

impl KSpaceVolume {
    /// Phase-encode axes in increasing order.
    pub fn phase_axes(&self) -> (usize, usize) {
        phase_axes(self.readout_axis)
    }

    /// Whether grid point `idx` lies on the sampling pattern.
    pub fn sampled(&self, idx: [usize; 3]) -> bool {
        let (a, b) = self.phase_axes();
        self.mask.is_sampled(idx[a], idx[b])
    }
}

fn phase_axes(readout_axis: usize) -> (usize, usize) {
    match readout_axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn check_mask(dims: [usize; 3], mask: &SamplingMask, readout_axis: usize) -> Result<()> {
    if readout_axis > 2 {
        return Err(Error::Dimension(format!("readout axis {readout_axis} outside 0..3")));
    }
    let (a, b) = phase_axes(readout_axis);
    if mask.shape() != (dims[a], dims[b]) {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match phase-encode dims ({}, {}) of volume {:?}",
            mask.shape(),
            dims[a],
            dims[b],
            dims
        )));
    }
    Ok(())
}

fn single_channel<T: Sample>(vol: &Volume<T>, what: &str) -> Result<()> {
    if vol.channels() != 1 {
        return Err(Error::Dimension(format!(
            "{what} expects a single-channel volume, got {} channels",
            vol.channels()
        )));
    }
    Ok(())
}

fn fft_axis(data: &mut Array3<Complex64>, axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = data.shape()[axis];
    if n == 1 {
        return;
    }
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let scale = 1.0 / (n as f64).sqrt();
    let mut buf = vec![Complex64::default(); n];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let half = n / 2;
    for mut lane in data.lanes_mut(Axis(axis)) {
        if inverse {
            // ifftshift on the way in
            for (j, b) in buf.iter_mut().enumerate() {
                *b = lane[(j + half) % n];
            }
        } else {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = lane[j];
            }
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        if inverse {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = buf[j] * scale;
            }
        } else {
            // fftshift on the way out
            for (k, v) in buf.iter().enumerate() {
                lane[(k + half) % n] = v * scale;
            }
        }
    }
}

/// Orthonormal 3D DFT with the DC term moved to the grid centre.
pub fn fft3c(img: &Array3<Complex32>) -> Array3<Complex32> {
    let mut work = img.mapv(|z| Complex64::new(z.re as f64, z.im as f64));
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        fft_axis(&mut work, axis, false, &mut planner);
    }
    work.mapv(|z| Complex32::new(z.re as f32, z.im as f32))
}

/// Inverse of [`fft3c`].
pub fn ifft3c(ksp: &Array3<Complex32>) -> Array3<Complex32> {
    let mut work = ksp.mapv(|z| Complex64::new(z.re as f64, z.im as f64));
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        fft_axis(&mut work, axis, true, &mut planner);
    }
    work.mapv(|z| Complex32::new(z.re as f32, z.im as f32))
}

fn apply_mask(ksp: &mut Array3<Complex32>, mask: &SamplingMask, readout_axis: usize) {
    let (a, b) = phase_axes(readout_axis);
    for ((i, j, k), v) in ksp.indexed_iter_mut() {
        let idx = [i, j, k];
        if mask.grid[[idx[a], idx[b]]] == 0 {
            *v = Complex32::new(0.0, 0.0);
        }
    }
}

fn complex_volume(grid: Array3<Complex32>, spacing: [f32; 3]) -> Result<Volume<Complex32>> {
    Ok(Volume::from_grid(grid)?.with_spacing(spacing))
}

/// Retrospective undersampling: masked k-space plus the zero-filled image.
pub fn undersample<T: Sample>(
    img: &Volume<T>,
    mask: &SamplingMask,
    readout_axis: usize,
) -> Result<(KSpaceVolume, Volume<Complex32>)> {
    single_channel(img, "undersample")?;
    check_mask(img.dims(), mask, readout_axis)?;
    let grid = img.grid().mapv(|v| v.to_complex());
    let mut ksp = fft3c(&grid);
    apply_mask(&mut ksp, mask, readout_axis);
    let zf = complex_volume(ifft3c(&ksp), img.spacing)?;
    Ok((
        KSpaceVolume {
            data: ksp,
            mask: mask.clone(),
            readout_axis,
        },
        zf,
    ))
}

/// Zero-filled reconstruction of acquired data.
pub fn zero_filled(acquired: &KSpaceVolume) -> Result<Volume<Complex32>> {
    complex_volume(ifft3c(&acquired.data), [1.0; 3])
}

fn replace_sampled(ksp: &mut Array3<Complex32>, acquired: &KSpaceVolume) {
    let (a, b) = acquired.phase_axes();
    Zip::indexed(ksp).and(&acquired.data).for_each(|(i, j, k), v, &acq| {
        let idx = [i, j, k];
        if acquired.mask.grid[[idx[a], idx[b]]] != 0 {
            *v = acq;
        }
    });
}

/// Replaces the spectrum of `pred` at acquired points with the measured data.
pub fn data_consistency(pred: &Volume<Complex32>, acquired: &KSpaceVolume) -> Result<Volume<Complex32>> {
    single_channel(pred, "data consistency")?;
    if pred.dims() != <[usize; 3]>::try_from(acquired.data.shape()).unwrap_or([0; 3]) {
        return Err(Error::Dimension(format!(
            "prediction {:?} does not match k-space {:?}",
            pred.dims(),
            acquired.data.shape()
        )));
    }
    check_mask(pred.dims(), &acquired.mask, acquired.readout_axis)?;
    let mut ksp = fft3c(&pred.grid());
    replace_sampled(&mut ksp, acquired);
    complex_volume(ifft3c(&ksp), pred.spacing)
}

/// `magnitude · exp(i·arg(reference))`. Negative magnitudes are clamped to
/// zero; the returned count says how many were.
pub fn phase_restore(magnitude: &Volume<f32>, reference: &Volume<Complex32>) -> Result<(Volume<Complex32>, usize)> {
    magnitude.expect_same_shape(reference, "phase restore")?;
    let mut clamped = 0usize;
    let mut data = Array4::<Complex32>::zeros(magnitude.data.raw_dim());
    Zip::from(&mut data)
        .and(&magnitude.data)
        .and(&reference.data)
        .for_each(|out, &m, &r| {
            let m = if m < 0.0 {
                clamped += 1;
                0.0
            } else {
                m
            };
            let phase = r.im.atan2(r.re);
            *out = Complex32::from_polar(m, phase);
        });
    if clamped > 0 {
        log::warn!("phase_restore clamped {clamped} negative magnitudes to zero");
    }
    let mut vol = Volume::new(data)?.with_spacing(magnitude.spacing);
    vol.refresh_range();
    Ok((vol, clamped))
}

/// Complex coil sensitivity maps `[coils, d0, d1, d2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    pub maps: Array4<Complex32>,
}

impl CoilSensitivities {
    pub fn new(maps: Array4<Complex32>) -> Result<Self> {
        if maps.shape().iter().any(|&d| d == 0) {
            return Err(Error::Dimension("empty sensitivity maps".into()));
        }
        Ok(CoilSensitivities { maps })
    }

    pub fn coils(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Rescales maps so that the coil-summed squared magnitude is 1 at every
    /// voxel where any coil is non-zero.
    pub fn normalized(&self) -> Self {
        let mut maps = self.maps.clone();
        let energy = self.maps.map_axis(Axis(0), |lane| lane.iter().map(|z| z.norm_sqr()).sum::<f32>());
        for mut coil in maps.outer_iter_mut() {
            Zip::from(&mut coil).and(&energy).for_each(|z, &e| {
                if e > 0.0 {
                    *z /= e.sqrt();
                }
            });
        }
        CoilSensitivities { maps }
    }

    /// Largest deviation of `Σ|S|²` from 1 over voxels where it is non-zero.
    pub fn normalization_error(&self) -> f32 {
        self.maps
            .map_axis(Axis(0), |lane| lane.iter().map(|z| z.norm_sqr()).sum::<f32>())
            .iter()
            .filter(|&&e| e > 0.0)
            .map(|e| (e - 1.0).abs())
            .fold(0.0, f32::max)
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        let s = self.maps.shape();
        if [s[1], s[2], s[3]] != dims {
            return Err(Error::Dimension(format!(
                "sensitivity maps {:?} do not match image dims {:?}",
                &s[1..],
                dims
            )));
        }
        Ok(())
    }
}

/// Multiplies a coil-combined image by each sensitivity map.
pub fn coil_project(combined: &Volume<Complex32>, sens: &CoilSensitivities) -> Result<Array4<Complex32>> {
    single_channel(combined, "coil projection")?;
    sens.check(combined.dims())?;
    let img = combined.data.index_axis(Axis(0), 0);
    let mut out = sens.maps.clone();
    for mut coil in out.outer_iter_mut() {
        coil.zip_mut_with(&img, |s, &x| *s *= x);
    }
    Ok(out)
}

/// Adjoint of [`coil_project`]: `Σ_c conj(S_c) · x_c`.
pub fn coil_combine(percoil: &Array4<Complex32>, sens: &CoilSensitivities) -> Result<Volume<Complex32>> {
    if percoil.shape()[0] != sens.coils() {
        return Err(Error::Dimension(format!(
            "{} coil images for {} sensitivity maps",
            percoil.shape()[0],
            sens.coils()
        )));
    }
    let s = percoil.shape();
    sens.check([s[1], s[2], s[3]])?;
    let mut acc = Array3::<Complex32>::zeros((s[1], s[2], s[3]));
    for (x, m) in percoil.outer_iter().zip(sens.maps.outer_iter()) {
        Zip::from(&mut acc).and(&x).and(&m).for_each(|a, &x, &m| *a += m.conj() * x);
    }
    Volume::from_grid(acc)
}

/// Undersamples every coil image with the same mask.
pub fn undersample_coils(
    percoil: &Array4<Complex32>,
    mask: &SamplingMask,
    readout_axis: usize,
) -> Result<Vec<KSpaceVolume>> {
    percoil
        .outer_iter()
        .map(|coil| {
            let vol = Volume::from_grid(coil.to_owned())?;
            undersample(&vol, mask, readout_axis).map(|(k, _)| k)
        })
        .collect()
}

/// Multi-coil data consistency: project the combined prediction onto coils,
/// enforce consistency per coil, and combine again.
pub fn data_consistency_coils(
    pred: &Volume<Complex32>,
    acquired: &[KSpaceVolume],
    sens: &CoilSensitivities,
) -> Result<Volume<Complex32>> {
    let mut percoil = coil_project(pred, sens)?;
    if acquired.len() != sens.coils() {
        return Err(Error::Dimension(format!(
            "{} acquired coils for {} sensitivity maps",
            acquired.len(),
            sens.coils()
        )));
    }
    for (mut coil, acq) in percoil.outer_iter_mut().zip(acquired) {
        let vol = Volume::from_grid(coil.to_owned())?;
        let fixed = data_consistency(&vol, acq)?;
        coil.assign(&fixed.data.index_axis(Axis(0), 0));
    }
    coil_combine(&percoil, sens)
}
