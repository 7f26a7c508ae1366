//! 2D ResNet generator and PatchGAN discriminator.
//!
//! Networks are described by a [`NetSpec`] (a flat list of convolution and
//! residual layers) and evaluated with explicit forward and backward passes.
//! All learnable scalars of a network live in one flat vector, laid out
//! layer by layer as `[weights, bias]`. Convolution weights use the
//! `[out, in, k, k]` layout; transposed convolutions use `[in, out, k, k]`.
//!
//! The element type is generic so the same code path runs in `f32` for
//! training and `f64` for gradient checks.

use std::fmt::Debug;
use std::fs;
use std::io::Write;
use std::ops::AddAssign;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{seed, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Scalar type of network weights and activations.
pub trait Float: num_traits::Float + Default + Debug + AddAssign + Send + Sync + 'static {
    fn of(x: f64) -> Self;

    /// `C = alpha·A·B + beta·C` for strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    fn of(x: f64) -> Self {
        x
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `C (m×n) {=,+=} op(A) · op(B)` on row-major buffers. `a_t` means `A` is
/// stored as `k×m`; `b_t` means `B` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
fn matmul<F: Float>(m: usize, k: usize, n: usize, a: &[F], a_t: bool, b: &[F], b_t: bool, c: &mut [F], accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the slices have exactly the lengths the strides address.
    unsafe {
        F::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// A `[channels, h, w]` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![F::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Dimension(format!(
                "tensor data of length {} for shape [{c}, {h}, {w}]",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn from_array(a: &Array3<f32>) -> Self {
        let (c, h, w) = a.dim();
        Tensor {
            c,
            h,
            w,
            data: a.iter().map(|&v| F::of(v as f64)).collect(),
        }
    }

    pub fn to_array(&self) -> Array3<f32> {
        let data = self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) as f32).collect();
        Array3::from_shape_vec((self.c, self.h, self.w), data).expect("tensor length matches shape")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[F] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            if (p.h, p.w) != (first.h, first.w) {
                return Err(Error::Dimension(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            c += p.c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            c,
            h: first.h,
            w: first.w,
            data,
        })
    }

    /// Channels `from..to` as a new tensor.
    pub fn channels(&self, from: usize, to: usize) -> Tensor<F> {
        Tensor {
            c: to - from,
            h: self.h,
            w: self.w,
            data: self.data[from * self.plane()..to * self.plane()].to_vec(),
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| G::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    LeakyReLU,
    Tanh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub activation: Activation,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(kernel: usize, filters: usize, stride: usize, activation: Activation) -> Self {
        ConvSpec {
            kernel,
            filters,
            stride,
            activation,
            transposed: false,
        }
    }

    pub fn deconv(kernel: usize, filters: usize, stride: usize, activation: Activation) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::conv(kernel, filters, stride, activation)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        conv: ConvSpec,
        padding: usize,
        pad_mode: PadMode,
        /// Extra rows/columns appended by transposed convolutions.
        output_padding: usize,
        norm: bool,
    },
    /// `x + IN(conv(ReLU(IN(conv(x)))))`, channel count preserved.
    Residual {
        kernel: usize,
        filters: usize,
        pad_mode: PadMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Inputs are reflect-padded so both spatial dims are multiples of this.
    pub pad_multiple: usize,
    /// Inputs smaller than this are reflect-padded up to it.
    pub min_size: usize,
    /// Crop the output back to the unpadded input size.
    pub crop_output: bool,
    pub init_std: f64,
}

impl NetSpec {
    /// Channels produced by the last layer (the input channels if there are none).
    pub fn out_channels(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Conv { conv, .. }) => conv.filters,
            Some(LayerSpec::Residual { filters, .. }) => *filters,
            None => self.in_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    out_pad: usize,
    transposed: bool,
    norm: bool,
    act: Activation,
    w_off: usize,
    b_off: usize,
}

impl ConvGeom {
    fn weight_len(&self) -> usize {
        self.in_c * self.out_c * self.k * self.k
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        if self.transposed {
            if h == 0 || w == 0 || (h - 1) * s + k + self.out_pad < 2 * p {
                return Err(Error::Dimension(format!("transposed conv input {h}x{w} too small")));
            }
            Ok(((h - 1) * s + k + self.out_pad - 2 * p, (w - 1) * s + k + self.out_pad - 2 * p))
        } else {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::Dimension(format!(
                    "conv input {h}x{w} (padding {p}) smaller than kernel {k}"
                )));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Conv(ConvGeom),
    Residual(ConvGeom, ConvGeom),
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source index along one axis for output position `o` and kernel tap `t`;
/// `None` for zero padding.
fn tap_map(n_out: usize, k: usize, stride: usize, pad: usize, n_in: usize, mode: PadMode) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(n_out * k);
    for o in 0..n_out {
        for t in 0..k {
            let i = (o * stride + t) as isize - pad as isize;
            map.push(if i >= 0 && (i as usize) < n_in {
                Some(i as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => Some(reflect_index(i, n_in)),
                }
            });
        }
    }
    map
}

/// Unfolds `x` into a `(c·k·k) × (ho·wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, mode: PadMode, ho: usize, wo: usize) -> Vec<F> {
    let ymap = tap_map(ho, k, stride, pad, h, mode);
    let xmap = tap_map(wo, k, stride, pad, w, mode);
    let n = ho * wo;
    let mut cols = vec![F::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..ho {
                    let Some(sy) = ymap[oy * k + ky] else { continue };
                    let src = &plane[sy * w..(sy + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, v) in out.iter_mut().enumerate() {
                        if let Some(sx) = xmap[ox * k + kx] {
                            *v = src[sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `c×h×w` grid.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Float>(cols: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, mode: PadMode, ho: usize, wo: usize) -> Vec<F> {
    let ymap = tap_map(ho, k, stride, pad, h, mode);
    let xmap = tap_map(wo, k, stride, pad, w, mode);
    let n = ho * wo;
    let mut x = vec![F::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..ho {
                    let Some(sy) = ymap[oy * k + ky] else { continue };
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(sx) = xmap[ox * k + kx] {
                            dst[sx] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn reflect_pad<F: Float>(x: &Tensor<F>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<F> {
    let (h, w) = (x.h + top + bottom, x.w + left + right);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let sy = reflect_index(y as isize - top as isize, x.h);
            for xx in 0..w {
                let sx = reflect_index(xx as isize - left as isize, x.w);
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + sy) * x.w + sx];
            }
        }
    }
    out
}

fn reflect_pad_backward<F: Float>(g: &Tensor<F>, h: usize, w: usize, top: usize, left: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..g.w {
                let sx = reflect_index(x as isize - left as isize, w);
                out.data[(c * h + sy) * w + sx] += g.data[(c * g.h + y) * g.w + x];
            }
        }
    }
    out
}

fn crop<F: Float>(x: &Tensor<F>, top: usize, left: usize, h: usize, w: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let src = &x.data[(c * x.h + y + top) * x.w + left..][..w];
            out.data[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(src);
        }
    }
    out
}

fn uncrop<F: Float>(g: &Tensor<F>, top: usize, left: usize, h: usize, w: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            let dst = &mut out.data[(c * h + y + top) * w + left..][..g.w];
            dst.copy_from_slice(&g.data[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w]);
        }
    }
    out
}

struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

fn instance_norm<F: Float>(x: &mut Tensor<F>, keep: bool) -> Option<NormCache<F>> {
    let n = x.plane();
    let nf = F::of(n as f64);
    let eps = F::of(NORM_EPS);
    let mut inv_std = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let ch = &mut x.data[c * n..(c + 1) * n];
        let mean = ch.iter().fold(F::zero(), |a, &v| a + v) / nf;
        let var = ch.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let inv = F::one() / (var + eps).sqrt();
        for v in ch.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    keep.then(|| NormCache {
        xhat: x.data.clone(),
        inv_std,
    })
}

fn instance_norm_backward<F: Float>(g: &mut [F], cache: &NormCache<F>, plane: usize) {
    let nf = F::of(plane as f64);
    for (c, &inv) in cache.inv_std.iter().enumerate() {
        let dy = &mut g[c * plane..(c + 1) * plane];
        let xh = &cache.xhat[c * plane..(c + 1) * plane];
        let sum_dy = dy.iter().fold(F::zero(), |a, &v| a + v);
        let sum_dy_xh = dy.iter().zip(xh).fold(F::zero(), |a, (&d, &x)| a + d * x);
        for (d, &x) in dy.iter_mut().zip(xh) {
            *d = inv / nf * (nf * *d - sum_dy - x * sum_dy_xh);
        }
    }
}

fn activate<F: Float>(x: &mut [F], act: Activation) {
    match act {
        Activation::ReLU => x.iter_mut().for_each(|v| *v = v.max(F::zero())),
        Activation::LeakyReLU => {
            let slope = F::of(LEAKY_SLOPE);
            x.iter_mut().for_each(|v| {
                if *v < F::zero() {
                    *v = *v * slope
                }
            })
        }
        Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::None => {}
    }
}

fn activate_backward<F: Float>(g: &mut [F], out: &[F], act: Activation) {
    match act {
        Activation::ReLU => g.iter_mut().zip(out).for_each(|(d, &y)| {
            if y <= F::zero() {
                *d = F::zero()
            }
        }),
        Activation::LeakyReLU => {
            let slope = F::of(LEAKY_SLOPE);
            g.iter_mut().zip(out).for_each(|(d, &y)| {
                if y < F::zero() {
                    *d = *d * slope
                }
            })
        }
        Activation::Tanh => g.iter_mut().zip(out).for_each(|(d, &y)| *d = *d * (F::one() - y * y)),
        Activation::None => {}
    }
}

struct ConvTrace<F> {
    in_h: usize,
    in_w: usize,
    /// Patch matrix for convolutions; the raw input for transposed ones.
    saved: Vec<F>,
    norm: Option<NormCache<F>>,
    out: Tensor<F>,
}

enum NodeTrace<F> {
    Conv(ConvTrace<F>),
    Residual(ConvTrace<F>, ConvTrace<F>),
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace<F> {
    in_h: usize,
    in_w: usize,
    pad: [usize; 4],
    padded: (usize, usize),
    out_shape: [usize; 3],
    nodes: Vec<NodeTrace<F>>,
}

impl<F> Trace<F> {
    pub fn output_shape(&self) -> [usize; 3] {
        self.out_shape
    }
}

/// Learnable parameters of one network plus the spec they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F: Float = f32> {
    spec: NetSpec,
    nodes: Vec<Node>,
    weights: Vec<F>,
    frozen: bool,
}

fn layout(spec: &NetSpec) -> Result<(Vec<Node>, usize)> {
    let mut nodes = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    let mut channels = spec.in_channels;
    let next = |in_c: usize, conv: &ConvSpec, pad: usize, pad_mode: PadMode, out_pad: usize, norm: bool, offset: &mut usize| -> Result<ConvGeom> {
        if conv.kernel == 0 || conv.stride == 0 || conv.filters == 0 {
            return Err(Error::Config(format!("conv layer needs kernel, filters and stride >= 1: {conv:?}")));
        }
        let g = ConvGeom {
            in_c,
            out_c: conv.filters,
            k: conv.kernel,
            stride: conv.stride,
            pad,
            pad_mode,
            out_pad,
            transposed: conv.transposed,
            norm,
            act: conv.activation,
            w_off: *offset,
            b_off: *offset + in_c * conv.filters * conv.kernel * conv.kernel,
        };
        *offset += g.param_len();
        Ok(g)
    };
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv {
                conv,
                padding,
                pad_mode,
                output_padding,
                norm,
            } => {
                if conv.transposed && *pad_mode != PadMode::Zero {
                    return Err(Error::Config("transposed convolutions support zero padding only".into()));
                }
                let g = next(channels, conv, *padding, *pad_mode, *output_padding, *norm, &mut offset)?;
                channels = g.out_c;
                nodes.push(Node::Conv(g));
            }
            LayerSpec::Residual {
                kernel,
                filters,
                pad_mode,
            } => {
                if *filters != channels {
                    return Err(Error::Config(format!(
                        "residual block of {filters} filters after a {channels}-channel layer"
                    )));
                }
                let pad = kernel / 2;
                let c1 = ConvSpec::conv(*kernel, *filters, 1, Activation::ReLU);
                let c2 = ConvSpec::conv(*kernel, *filters, 1, Activation::None);
                let a = next(channels, &c1, pad, *pad_mode, 0, true, &mut offset)?;
                let b = next(channels, &c2, pad, *pad_mode, 0, true, &mut offset)?;
                nodes.push(Node::Residual(a, b));
            }
        }
    }
    Ok((nodes, offset))
}

impl<F: Float> Network<F> {
    /// Builds a network with `N(0, init_std)` weights and zero biases.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        if spec.pad_multiple == 0 {
            return Err(Error::Config("pad_multiple must be >= 1".into()));
        }
        let (nodes, count) = layout(&spec)?;
        let mut weights = vec![F::zero(); count];
        let normal = Normal::new(0.0, spec.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = seed::rng(seed);
        for node in &nodes {
            let geoms: Vec<&ConvGeom> = match node {
                Node::Conv(g) => vec![g],
                Node::Residual(a, b) => vec![a, b],
            };
            for g in geoms {
                for w in &mut weights[g.w_off..g.w_off + g.weight_len()] {
                    *w = F::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Network {
            spec,
            nodes,
            weights,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    /// Mutable weights; rejected once the network is frozen.
    pub fn weights_mut(&mut self) -> Result<&mut [F]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.weights)
    }

    pub fn set_weights(&mut self, weights: Vec<F>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "{} weights for a network of {}",
                weights.len(),
                self.weights.len()
            )));
        }
        self.weights_mut()?.copy_from_slice(&weights);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 of the serialized spec.
    pub fn fingerprint(&self) -> String {
        spec_fingerprint(&self.spec)
    }

    pub fn cast<G: Float>(&self) -> Network<G> {
        Network {
            spec: self.spec.clone(),
            nodes: self.nodes.clone(),
            weights: self.weights.iter().map(|w| G::of(w.to_f64().unwrap_or(f64::NAN))).collect(),
            frozen: self.frozen,
        }
    }

    fn padding_for(&self, h: usize, w: usize) -> [usize; 4] {
        let target = |n: usize| {
            let m = self.spec.pad_multiple;
            n.div_ceil(m).max(1) * m
        };
        let th = target(h).max(self.spec.min_size);
        let tw = target(w).max(self.spec.min_size);
        let (ph, pw) = (th - h, tw - w);
        [ph / 2, ph - ph / 2, pw / 2, pw - pw / 2]
    }

    fn conv_forward(&self, g: &ConvGeom, x: &Tensor<F>, keep: bool) -> Result<(Tensor<F>, Option<ConvTrace<F>>)> {
        if x.c != g.in_c {
            return Err(Error::Dimension(format!("layer expects {} channels, got {}", g.in_c, x.c)));
        }
        let (ho, wo) = g.out_size(x.h, x.w)?;
        let w = &self.weights[g.w_off..g.w_off + g.weight_len()];
        let bias = &self.weights[g.b_off..g.b_off + g.out_c];
        let mut y = Tensor::zeros(g.out_c, ho, wo);
        let saved = if g.transposed {
            let n = x.h * x.w;
            let kk = g.k * g.k;
            let mut cols = vec![F::zero(); g.out_c * kk * n];
            matmul(g.out_c * kk, g.in_c, n, w, true, &x.data, false, &mut cols, false);
            y.data = col2im(&cols, g.out_c, ho, wo, g.k, g.stride, g.pad, PadMode::Zero, x.h, x.w);
            if keep {
                x.data.clone()
            } else {
                Vec::new()
            }
        } else {
            let cols = im2col(&x.data, x.c, x.h, x.w, g.k, g.stride, g.pad, g.pad_mode, ho, wo);
            matmul(g.out_c, g.in_c * g.k * g.k, ho * wo, w, false, &cols, false, &mut y.data, false);
            if keep {
                cols
            } else {
                Vec::new()
            }
        };
        let plane = ho * wo;
        for (c, &b) in bias.iter().enumerate() {
            y.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        let norm = if g.norm { instance_norm(&mut y, keep) } else { None };
        activate(&mut y.data, g.act);
        let trace = keep.then(|| ConvTrace {
            in_h: x.h,
            in_w: x.w,
            saved,
            norm,
            out: y.clone(),
        });
        Ok((y, trace))
    }

    /// Backpropagates `grad` (w.r.t. the layer output) and returns the input
    /// gradient when requested.
    fn conv_backward(&self, g: &ConvGeom, t: &ConvTrace<F>, mut grad: Vec<F>, grads: &mut [F], want_input: bool) -> Option<Vec<F>> {
        let (ho, wo) = (t.out.h, t.out.w);
        let plane = ho * wo;
        activate_backward(&mut grad, &t.out.data, g.act);
        if let Some(cache) = &t.norm {
            instance_norm_backward(&mut grad, cache, plane);
        }
        for c in 0..g.out_c {
            let s = grad[c * plane..(c + 1) * plane].iter().fold(F::zero(), |a, &v| a + v);
            grads[g.b_off + c] += s;
        }
        let w = &self.weights[g.w_off..g.w_off + g.weight_len()];
        let kk = g.k * g.k;
        let (in_h, in_w) = (t.in_h, t.in_w);
        if g.transposed {
            let n = in_h * in_w;
            let dcols = im2col(&grad, g.out_c, ho, wo, g.k, g.stride, g.pad, PadMode::Zero, in_h, in_w);
            let dw = &mut grads[g.w_off..g.w_off + g.weight_len()];
            matmul(g.in_c, n, g.out_c * kk, &t.saved, false, &dcols, true, dw, true);
            want_input.then(|| {
                let mut dx = vec![F::zero(); g.in_c * n];
                matmul(g.in_c, g.out_c * kk, n, w, false, &dcols, false, &mut dx, false);
                dx
            })
        } else {
            let rows = g.in_c * kk;
            let dw = &mut grads[g.w_off..g.w_off + g.weight_len()];
            matmul(g.out_c, plane, rows, &grad, false, &t.saved, true, dw, true);
            want_input.then(|| {
                let mut dcols = vec![F::zero(); rows * plane];
                matmul(rows, g.out_c, plane, w, true, &grad, false, &mut dcols, false);
                col2im(&dcols, g.in_c, in_h, in_w, g.k, g.stride, g.pad, g.pad_mode, ho, wo)
            })
        }
    }

    fn run(&self, x: &Tensor<F>, keep: bool) -> Result<(Tensor<F>, Option<Trace<F>>)> {
        if x.c != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, x.c
            )));
        }
        let pad = self.padding_for(x.h, x.w);
        let mut cur = if pad.iter().any(|&p| p > 0) {
            reflect_pad(x, pad[0], pad[1], pad[2], pad[3])
        } else {
            x.clone()
        };
        let padded = (cur.h, cur.w);
        let mut traces = Vec::with_capacity(if keep { self.nodes.len() } else { 0 });
        for node in &self.nodes {
            match node {
                Node::Conv(g) => {
                    let (y, t) = self.conv_forward(g, &cur, keep)?;
                    cur = y;
                    if let Some(t) = t {
                        traces.push(NodeTrace::Conv(t));
                    }
                }
                Node::Residual(a, b) => {
                    let (mid, ta) = self.conv_forward(a, &cur, keep)?;
                    let (mut y, tb) = self.conv_forward(b, &mid, keep)?;
                    y.data.iter_mut().zip(&cur.data).for_each(|(v, &s)| *v += s);
                    cur = y;
                    if let (Some(ta), Some(tb)) = (ta, tb) {
                        traces.push(NodeTrace::Residual(ta, tb));
                    }
                }
            }
        }
        if self.spec.crop_output && (cur.h, cur.w) != (x.h, x.w) {
            if cur.h < pad[0] + x.h || cur.w < pad[2] + x.w {
                return Err(Error::Dimension(format!(
                    "cannot crop a {}x{} output to the {}x{} input",
                    cur.h, cur.w, x.h, x.w
                )));
            }
            cur = crop(&cur, pad[0], pad[2], x.h, x.w);
        }
        let trace = keep.then(|| Trace {
            in_h: x.h,
            in_w: x.w,
            pad,
            padded,
            out_shape: cur.shape(),
            nodes: traces,
        });
        Ok((cur, trace))
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_trace(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Trace<F>)> {
        let (y, t) = self.run(x, true)?;
        Ok((y, t.expect("trace kept")))
    }

    /// Accumulates parameter gradients into `grads` (same layout as the
    /// weights) and optionally returns the gradient w.r.t. the input.
    pub fn backward(&self, trace: &Trace<F>, grad_out: &Tensor<F>, grads: &mut [F], want_input: bool) -> Result<Option<Tensor<F>>> {
        if grads.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "gradient buffer of {} for {} weights",
                grads.len(),
                self.weights.len()
            )));
        }
        if grad_out.shape() != trace.out_shape {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                trace.out_shape
            )));
        }
        let mut g = if self.spec.crop_output && (trace.padded != (trace.in_h, trace.in_w)) {
            let last_h = trace.padded.0;
            let last_w = trace.padded.1;
            uncrop(grad_out, trace.pad[0], trace.pad[2], last_h, last_w).data
        } else {
            grad_out.data.clone()
        };
        for (i, (node, t)) in self.nodes.iter().zip(&trace.nodes).enumerate().rev() {
            let need = want_input || i > 0;
            match (node, t) {
                (Node::Conv(geom), NodeTrace::Conv(ct)) => {
                    match self.conv_backward(geom, ct, g, grads, need) {
                        Some(dx) => g = dx,
                        None => return Ok(None),
                    }
                }
                (Node::Residual(a, b), NodeTrace::Residual(ta, tb)) => {
                    let skip = g.clone();
                    let dmid = self
                        .conv_backward(b, tb, g, grads, true)
                        .expect("input gradient requested");
                    let mut dx = self
                        .conv_backward(a, ta, dmid, grads, true)
                        .expect("input gradient requested");
                    dx.iter_mut().zip(&skip).for_each(|(d, &s)| *d += s);
                    g = dx;
                }
                _ => unreachable!("trace does not match network layout"),
            }
        }
        if !want_input {
            return Ok(None);
        }
        let padded = Tensor {
            c: self.spec.in_channels,
            h: trace.padded.0,
            w: trace.padded.1,
            data: g,
        };
        if trace.padded == (trace.in_h, trace.in_w) {
            Ok(Some(padded))
        } else {
            Ok(Some(reflect_pad_backward(&padded, trace.in_h, trace.in_w, trace.pad[0], trace.pad[2])))
        }
    }
}

pub fn spec_fingerprint(spec: &NetSpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Complexity scale factors for per-layer weight counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NfScale {
    #[serde(rename = "1/16")]
    Sixteenth,
    #[serde(rename = "1/9")]
    Ninth,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "9")]
    Nine,
    #[serde(rename = "16")]
    Sixteen,
}

impl NfScale {
    pub const ALL: [NfScale; 7] = [
        NfScale::Sixteenth,
        NfScale::Ninth,
        NfScale::Quarter,
        NfScale::One,
        NfScale::Four,
        NfScale::Nine,
        NfScale::Sixteen,
    ];

    pub fn value(self) -> f64 {
        match self {
            NfScale::Sixteenth => 1.0 / 16.0,
            NfScale::Ninth => 1.0 / 9.0,
            NfScale::Quarter => 0.25,
            NfScale::One => 1.0,
            NfScale::Four => 4.0,
            NfScale::Nine => 9.0,
            NfScale::Sixteen => 16.0,
        }
    }

    /// Filter multiplier, `sqrt(n_f)`, as an exact ratio.
    fn ratio(self) -> (usize, usize) {
        match self {
            NfScale::Sixteenth => (1, 4),
            NfScale::Ninth => (1, 3),
            NfScale::Quarter => (1, 2),
            NfScale::One => (1, 1),
            NfScale::Four => (2, 1),
            NfScale::Nine => (3, 1),
            NfScale::Sixteen => (4, 1),
        }
    }

    pub fn scale_filters(self, base: usize) -> usize {
        let (num, den) = self.ratio();
        ((base * num) as f64 / den as f64).round().max(1.0) as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            NfScale::Sixteenth => "1/16",
            NfScale::Ninth => "1/9",
            NfScale::Quarter => "1/4",
            NfScale::One => "1",
            NfScale::Four => "4",
            NfScale::Nine => "9",
            NfScale::Sixteen => "16",
        }
    }
}

impl FromStr for NfScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(n) = NfScale::ALL.iter().find(|n| n.label() == s) {
            return Ok(*n);
        }
        let value = if let Some((a, b)) = s.split_once('/') {
            let a: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad n_f `{s}`")))?;
            let b: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad n_f `{s}`")))?;
            a / b
        } else {
            s.parse().map_err(|_| Error::Config(format!("bad n_f `{s}`")))?
        };
        NfScale::ALL
            .iter()
            .find(|n| (n.value() - value).abs() < 1e-9)
            .copied()
            .ok_or_else(|| Error::Config(format!("n_f {s} not in {{1/16,1/9,1/4,1,4,9,16}}")))
    }
}

impl std::fmt::Display for NfScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    /// Encoder filter counts; the residual trunk runs at `filters[2]`.
    pub filters: [usize; 3],
    pub n_res_blocks: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub const BASE_FILTERS: [usize; 3] = [24, 48, 96];

    pub fn new(in_channels: usize) -> Self {
        GeneratorConfig {
            in_channels,
            filters: Self::BASE_FILTERS,
            n_res_blocks: 9,
            out_channels: 1,
        }
    }

    pub fn scaled(mut self, n_f: NfScale) -> Self {
        self.filters = Self::BASE_FILTERS.map(|f| n_f.scale_filters(f));
        self
    }

    pub fn net_spec(&self) -> NetSpec {
        use Activation::*;
        let [f1, f2, f3] = self.filters;
        let conv = |spec: ConvSpec, padding: usize, pad_mode: PadMode, norm: bool| LayerSpec::Conv {
            conv: spec,
            padding,
            pad_mode,
            output_padding: if spec.transposed { 1 } else { 0 },
            norm,
        };
        let mut layers = vec![
            conv(ConvSpec::conv(7, f1, 1, ReLU), 3, PadMode::Reflect, true),
            conv(ConvSpec::conv(3, f2, 2, ReLU), 1, PadMode::Zero, true),
            conv(ConvSpec::conv(3, f3, 2, ReLU), 1, PadMode::Zero, true),
        ];
        layers.extend((0..self.n_res_blocks).map(|_| LayerSpec::Residual {
            kernel: 3,
            filters: f3,
            pad_mode: PadMode::Reflect,
        }));
        layers.extend([
            conv(ConvSpec::deconv(3, f2, 2, ReLU), 1, PadMode::Zero, true),
            conv(ConvSpec::deconv(3, f1, 2, ReLU), 1, PadMode::Zero, true),
            conv(ConvSpec::conv(7, self.out_channels, 1, Tanh), 3, PadMode::Reflect, false),
        ]);
        NetSpec {
            in_channels: self.in_channels,
            layers,
            pad_multiple: 4,
            min_size: 4,
            crop_output: true,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub filters: [usize; 4],
}

impl DiscriminatorConfig {
    pub const BASE_FILTERS: [usize; 4] = [24, 48, 96, 192];
    /// Smallest input that still yields a patch map of at least 2×2.
    pub const MIN_INPUT: usize = 32;

    pub fn new(in_channels: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            filters: Self::BASE_FILTERS,
        }
    }

    pub fn scaled(mut self, n_f: NfScale) -> Self {
        self.filters = Self::BASE_FILTERS.map(|f| n_f.scale_filters(f));
        self
    }

    pub fn net_spec(&self) -> NetSpec {
        use Activation::*;
        let [f1, f2, f3, f4] = self.filters;
        let conv = |filters: usize, stride: usize, act: Activation, norm: bool| LayerSpec::Conv {
            conv: ConvSpec::conv(4, filters, stride, act),
            padding: 1,
            pad_mode: PadMode::Zero,
            output_padding: 0,
            norm,
        };
        NetSpec {
            in_channels: self.in_channels,
            layers: vec![
                conv(f1, 2, LeakyReLU, false),
                conv(f2, 2, LeakyReLU, true),
                conv(f3, 2, LeakyReLU, true),
                conv(f4, 1, LeakyReLU, true),
                conv(1, 1, None, false),
            ],
            pad_multiple: 1,
            min_size: Self::MIN_INPUT,
            crop_output: false,
            init_std: 0.02,
        }
    }
}

pub fn build_generator<F: Float>(cfg: &GeneratorConfig, seed: u64) -> Result<Network<F>> {
    Network::new(cfg.net_spec(), seed)
}

pub fn build_discriminator<F: Float>(cfg: &DiscriminatorConfig, seed: u64) -> Result<Network<F>> {
    Network::new(cfg.net_spec(), seed)
}

/// Exact number of learnable scalars.
pub fn count_params<F: Float>(m: &Network<F>) -> usize {
    m.param_count()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PVGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetSpec,
    fingerprint: String,
    frozen: bool,
    dtype: String,
    count: usize,
}

/// Serializes a network: magic, `u32` version, `u32` header length, JSON
/// header, then `count` little-endian `f32` weights.
pub fn checkpoint_bytes(net: &Network<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: net.spec.clone(),
        fingerprint: net.fingerprint(),
        frozen: net.frozen,
        dtype: "f32".into(),
        count: net.weights.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * net.weights.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in &net.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Network<f32>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "magic", "not a network checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version as u64,
            expected: CHECKPOINT_VERSION as u64,
        });
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 16 + len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 16 + len,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| Error::format(path, "header", e.to_string()))?;
    if header.fingerprint != spec_fingerprint(&header.spec) {
        return Err(Error::format(path, "fingerprint", "does not match the stored spec"));
    }
    let payload = &bytes[16 + len..];
    if payload.len() != 4 * header.count {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 16 + len + 4 * header.count,
            found: bytes.len(),
        });
    }
    let mut net = Network::<f32>::new(header.spec, 0)?;
    if net.weights.len() != header.count {
        return Err(Error::format(path, "count", "weight count disagrees with the spec"));
    }
    for (w, chunk) in net.weights.iter_mut().zip(payload.chunks_exact(4)) {
        *w = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    net.frozen = header.frozen;
    Ok(net)
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent closed-form count: Σ k²·in·out + out over every conv.
    fn oracle_count(in_c: usize, filters: &[usize], kernels: &[usize]) -> usize {
        let mut c = in_c;
        let mut total = 0;
        for (&f, &k) in filters.iter().zip(kernels) {
            total += k * k * c * f + f;
            c = f;
        }
        total
    }

    fn gen_oracle(in_c: usize, f: [usize; 3], blocks: usize) -> usize {
        let mut filters = vec![f[0], f[1], f[2]];
        let mut kernels = vec![7, 3, 3];
        for _ in 0..2 * blocks {
            filters.push(f[2]);
            kernels.push(3);
        }
        filters.extend([f[1], f[0], 1]);
        kernels.extend([3, 3, 7]);
        oracle_count(in_c, &filters, &kernels)
    }

    #[test]
    fn base_generator_count() {
        let g: Network<f32> = build_generator(&GeneratorConfig::new(2), 0).unwrap();
        assert_eq!(count_params(&g), gen_oracle(2, [24, 48, 96], 9));
        let m = count_params(&g) as f64 / 1e6;
        assert!((m - 1.60).abs() <= 0.02 * 1.60, "{m}");
    }

    #[test]
    fn base_discriminator_count() {
        let d: Network<f32> = build_discriminator(&DiscriminatorConfig::new(2), 0).unwrap();
        assert_eq!(count_params(&d), oracle_count(2, &[24, 48, 96, 192, 1], &[4; 5]));
        let m = count_params(&d) as f64 / 1e6;
        assert!((m - 0.39).abs() <= 0.02 * 0.39, "{m}");
    }

    #[test]
    fn first_layer_weight_count() {
        let g: Network<f32> = build_generator(&GeneratorConfig::new(1), 0).unwrap();
        let Node::Conv(first) = g.nodes[0] else { panic!() };
        assert_eq!(first.param_len(), 7 * 7 * 24 + 24);
    }

    #[test]
    fn empty_model_has_no_params() {
        let spec = NetSpec {
            in_channels: 1,
            layers: vec![],
            pad_multiple: 1,
            min_size: 1,
            crop_output: false,
            init_std: 0.02,
        };
        assert_eq!(count_params(&Network::<f32>::new(spec, 0).unwrap()), 0);
    }

    #[test]
    fn scaling_filters() {
        assert_eq!(GeneratorConfig::new(1).scaled(NfScale::One), GeneratorConfig::new(1));
        let q = GeneratorConfig::new(2).scaled(NfScale::Quarter);
        assert_eq!(q.filters, [12, 24, 48]);
        assert_eq!(GeneratorConfig::new(2).scaled(NfScale::Sixteenth).filters, [6, 12, 24]);
        assert_eq!(GeneratorConfig::new(2).scaled(NfScale::Ninth).filters, [8, 16, 32]);
        assert_eq!(DiscriminatorConfig::new(2).scaled(NfScale::Nine).filters, [72, 144, 288, 576]);
        // trunk weights (residual blocks) scale by exactly n_f
        let trunk = |f: usize| 18 * (9 * f * f);
        assert_eq!(trunk(48) * 4, trunk(96));
        let base = gen_oracle(2, [24, 48, 96], 9) as f64;
        let quarter = gen_oracle(2, [12, 24, 48], 9) as f64;
        assert!((quarter / base - 0.25).abs() < 0.01, "{}", quarter / base);
    }

    #[test]
    fn nf_parsing() {
        assert_eq!("1/4".parse::<NfScale>().unwrap(), NfScale::Quarter);
        assert_eq!("0.25".parse::<NfScale>().unwrap(), NfScale::Quarter);
        assert_eq!("16".parse::<NfScale>().unwrap(), NfScale::Sixteen);
        assert!("1/2".parse::<NfScale>().is_err());
        assert!("x".parse::<NfScale>().is_err());
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let cfg = GeneratorConfig::new(2).scaled(NfScale::Sixteenth);
        let g: Network<f32> = build_generator(&cfg, 1).unwrap();
        for (h, w) in [(16, 16), (12, 20), (10, 15), (3, 5)] {
            let x = Tensor::zeros(2, h, w);
            let y = g.forward(&x).unwrap();
            assert_eq!(y.shape(), [1, h, w]);
            assert!(y.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn discriminator_patch_map() {
        let d: Network<f32> = build_discriminator(&DiscriminatorConfig::new(2).scaled(NfScale::Sixteenth), 1).unwrap();
        let y = d.forward(&Tensor::zeros(2, 192, 160)).unwrap();
        assert_eq!(y.c, 1);
        assert!(y.h > 1 && y.w > 1);
        assert_eq!((y.h, y.w), (22, 18));
        assert!(y.data.iter().all(|v| v.is_finite()));
        let small = d.forward(&Tensor::zeros(2, 8, 8)).unwrap();
        assert!(small.h >= 2 && small.w >= 2);
    }

    #[test]
    fn deterministic_init() {
        let cfg = GeneratorConfig::new(1).scaled(NfScale::Sixteenth);
        let a: Network<f32> = build_generator(&cfg, 5).unwrap();
        let b: Network<f32> = build_generator(&cfg, 5).unwrap();
        let c: Network<f32> = build_generator(&cfg, 6).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn frozen_rejects_updates() {
        let mut g: Network<f32> = build_generator(&GeneratorConfig::new(1).scaled(NfScale::Sixteenth), 0).unwrap();
        g.freeze();
        assert!(matches!(g.weights_mut(), Err(Error::Frozen)));
        let n = g.param_count();
        assert!(matches!(g.set_weights(vec![0.0; n]), Err(Error::Frozen)));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut g: Network<f32> = build_generator(&GeneratorConfig::new(3).scaled(NfScale::Sixteenth), 9).unwrap();
        g.freeze();
        let bytes = checkpoint_bytes(&g);
        let p = Path::new("mem");
        let back = checkpoint_from_bytes(&bytes, p).unwrap();
        assert_eq!(back, g);
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(checkpoint_from_bytes(&bad, p), Err(Error::Version { found: 9, .. })));
        assert!(checkpoint_from_bytes(b"nonsense-nonsense", p).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for every padding mode
        let mut rng = seed::rng(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let (c, h, w, k, s, p) = (2, 5, 6, 3, 2, 1);
            let ho = (h + 2 * p - k) / s + 1;
            let wo = (w + 2 * p - k) / s + 1;
            let x: Vec<f64> = (0..c * h * w).map(|_| normal.sample(&mut rng)).collect();
            let cols: Vec<f64> = (0..c * k * k * ho * wo).map(|_| normal.sample(&mut rng)).collect();
            let a = im2col(&x, c, h, w, k, s, p, mode, ho, wo);
            let b = col2im(&cols, c, h, w, k, s, p, mode, ho, wo);
            let lhs: f64 = a.iter().zip(&cols).map(|(u, v)| u * v).sum();
            let rhs: f64 = x.iter().zip(&b).map(|(u, v)| u * v).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // a single zero-padded strided conv against a naive loop
        let spec = NetSpec {
            in_channels: 2,
            layers: vec![LayerSpec::Conv {
                conv: ConvSpec::conv(3, 3, 2, Activation::None),
                padding: 1,
                pad_mode: PadMode::Zero,
                output_padding: 0,
                norm: false,
            }],
            pad_multiple: 1,
            min_size: 1,
            crop_output: false,
            init_std: 1.0,
        };
        let net: Network<f64> = Network::new(spec, 4).unwrap();
        let mut rng = seed::rng(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::from_vec(2, 5, 4, (0..40).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), [3, 3, 2]);
        let w = net.weights();
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = w[54 + o];
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (oy * 2 + ky) as isize - 1;
                                let sx = (ox * 2 + kx) as isize - 1;
                                if sy >= 0 && sy < 5 && sx >= 0 && sx < 4 {
                                    acc += w[((o * 2 + i) * 3 + ky) * 3 + kx] * x.data[(i * 5 + sy as usize) * 4 + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o * 3 + oy) * 2 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deconv_doubles_size() {
        let spec = NetSpec {
            in_channels: 2,
            layers: vec![LayerSpec::Conv {
                conv: ConvSpec::deconv(3, 1, 2, Activation::None),
                padding: 1,
                pad_mode: PadMode::Zero,
                output_padding: 1,
                norm: false,
            }],
            pad_multiple: 1,
            min_size: 1,
            crop_output: false,
            init_std: 1.0,
        };
        let net: Network<f64> = Network::new(spec, 4).unwrap();
        let x = Tensor::from_vec(2, 3, 5, vec![1.0; 30]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 6, 10]);
        // naive scatter oracle: y[iy*2+ky-1][ix*2+kx-1] += w[i,0,ky,kx]·x
        let w = net.weights();
        let mut expect = vec![w[18]; 60];
        for i in 0..2 {
            for iy in 0..3 {
                for ix in 0..5 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (iy * 2 + ky) as isize - 1;
                            let ox = (ix * 2 + kx) as isize - 1;
                            if oy >= 0 && oy < 6 && ox >= 0 && ox < 10 {
                                expect[oy as usize * 10 + ox as usize] += w[(i * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
