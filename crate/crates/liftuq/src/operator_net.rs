//! The lifting-propagation-recovering operator: pointwise affine lift,
//! spectral-convolution layers with pointwise bias paths, pointwise affine
//! recovery, parameter census, and checkpoint I/O.

use crate::error::{Error, Result};
use crate::tensor_field::{DatasetContainer, Field, Grid2D, RngStream, TensorBlob};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation `{}`", s))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Gelu => write!(f, "gelu"),
            Activation::Identity => write!(f, "identity"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OperatorConfig {
    pub d_a: usize,
    pub d_v: usize,
    pub d_u: usize,
    pub layers: usize,
    pub k_max: usize,
    pub activation: Activation,
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_v == 0 || self.d_u == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one propagation layer".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(())
    }

    /// k_max must stay below the Nyquist bound of the grid.
    pub fn validate_for_grid(&self, grid: &Grid2D) -> Result<()> {
        self.validate()?;
        let bound = grid.nx.min(grid.ny) / 2;
        if self.k_max > bound {
            return Err(Error::Config(format!(
                "k_max {} exceeds Nyquist bound {} for grid {}x{}",
                self.k_max, bound, grid.nx, grid.ny
            )));
        }
        Ok(())
    }
}

/// Retained Fourier modes: the real-FFT half-plane with |k_x| < k_max and
/// 0 <= k_y < k_max. The first entry is always (0, 0), the only
/// self-conjugate mode; its multiplier is real (stored imaginary part inert).
pub fn mode_list(k_max: usize) -> Vec<(i32, i32)> {
    let k = k_max as i32;
    let mut modes = Vec::new();
    for kx in 0..k {
        modes.push((kx, 0));
    }
    for ky in 1..k {
        for kx in -(k - 1)..k {
            modes.push((kx, ky));
        }
    }
    modes
}

pub fn n_modes(k_max: usize) -> usize {
    k_max + (k_max - 1) * (2 * k_max - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Complex spectral weights, `[n_modes][d_v in][d_v out][re, im]`.
    pub spectral: Vec<f64>,
    /// Pointwise bias-path weights, `[d_v in][d_v out]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub w_p: Vec<f64>, // [d_a][d_v]
    pub b_p: Vec<f64>, // [d_v]
    pub layers: Vec<LayerParams>,
    pub w_q: Vec<f64>, // [d_v][d_u]
    pub b_q: Vec<f64>, // [d_u]
}

impl OperatorParams {
    pub fn zeros(cfg: &OperatorConfig) -> Result<Self> {
        cfg.validate()?;
        let nm = n_modes(cfg.k_max);
        Ok(OperatorParams {
            w_p: vec![0.0; cfg.d_a * cfg.d_v],
            b_p: vec![0.0; cfg.d_v],
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    spectral: vec![0.0; nm * cfg.d_v * cfg.d_v * 2],
                    w: vec![0.0; cfg.d_v * cfg.d_v],
                    b: vec![0.0; cfg.d_v],
                })
                .collect(),
            w_q: vec![0.0; cfg.d_v * cfg.d_u],
            b_q: vec![0.0; cfg.d_u],
        })
    }

    /// Random initialization: spectral weights complex Gaussian with std
    /// 1/(d_v*k_max), pointwise maps uniform within +-1/sqrt(fan_in).
    pub fn init(cfg: &OperatorConfig, rng: &RngStream) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut s = *rng;
        let lift_bound = 1.0 / (cfg.d_a as f64).sqrt();
        for v in params.w_p.iter_mut().chain(params.b_p.iter_mut()) {
            *v = (2.0 * s.next_f64() - 1.0) * lift_bound;
        }
        let spec_std = 1.0 / (cfg.d_v as f64 * cfg.k_max as f64);
        let point_bound = 1.0 / (cfg.d_v as f64).sqrt();
        let nm = n_modes(cfg.k_max);
        for layer in params.layers.iter_mut() {
            for v in layer.spectral.iter_mut() {
                *v = s.next_gaussian() * spec_std;
            }
            // inert imaginary parts at the self-conjugate mode stay zero
            for i in 0..cfg.d_v {
                for j in 0..cfg.d_v {
                    layer.spectral[spectral_index(0, i, j, cfg.d_v) + 1] = 0.0;
                }
            }
            let _ = nm;
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = (2.0 * s.next_f64() - 1.0) * point_bound;
            }
        }
        for v in params.w_q.iter_mut().chain(params.b_q.iter_mut()) {
            *v = (2.0 * s.next_f64() - 1.0) * point_bound;
        }
        Ok(params)
    }

    pub fn shapes_match(&self, cfg: &OperatorConfig) -> bool {
        let nm = n_modes(cfg.k_max);
        self.w_p.len() == cfg.d_a * cfg.d_v
            && self.b_p.len() == cfg.d_v
            && self.layers.len() == cfg.layers
            && self.layers.iter().all(|l| {
                l.spectral.len() == nm * cfg.d_v * cfg.d_v * 2
                    && l.w.len() == cfg.d_v * cfg.d_v
                    && l.b.len() == cfg.d_v
            })
            && self.w_q.len() == cfg.d_v * cfg.d_u
            && self.b_q.len() == cfg.d_u
    }

    /// Copy with the columns of the lifting weights and bias scaled by `xi`;
    /// realizes the column-perturbation view of channel-wise feature noise.
    pub fn with_scaled_lift_columns(&self, xi: &[f64]) -> Result<OperatorParams> {
        let d_v = self.b_p.len();
        if xi.len() != d_v {
            return Err(Error::Shape(format!(
                "column scale has {} entries, lifting has {} columns",
                xi.len(),
                d_v
            )));
        }
        let mut out = self.clone();
        for (i, w) in out.w_p.iter_mut().enumerate() {
            *w *= xi[i % d_v];
        }
        for (j, b) in out.b_p.iter_mut().enumerate() {
            *b *= xi[j];
        }
        Ok(out)
    }
}

#[inline]
pub fn spectral_index(mode: usize, i: usize, j: usize, d_v: usize) -> usize {
    ((mode * d_v + i) * d_v + j) * 2
}

// ---------------------------------------------------------------------------
// Parameter census
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCensus {
    pub lifting: usize,
    pub propagation: usize,
    pub recovery: usize,
}

impl ParamCensus {
    pub fn total(&self) -> usize {
        self.lifting + self.propagation + self.recovery
    }

    pub fn lifting_fraction(&self) -> f64 {
        self.lifting as f64 / self.total() as f64
    }
}

pub fn param_census(params: &OperatorParams) -> ParamCensus {
    ParamCensus {
        lifting: params.w_p.len() + params.b_p.len(),
        propagation: params
            .layers
            .iter()
            .map(|l| l.spectral.len() + l.w.len() + l.b.len())
            .sum(),
        recovery: params.w_q.len() + params.b_q.len(),
    }
}

// ---------------------------------------------------------------------------
// Noise masks
// ---------------------------------------------------------------------------

/// Multiplicative noise applied to a feature field entering a module.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// One multiplier per channel, broadcast over space.
    PerChannel(Vec<f64>),
    /// One multiplier per entry (`N * channels`).
    Elementwise(Vec<f64>),
}

impl Mask {
    fn check(&self, n: usize, channels: usize) -> Result<()> {
        let ok = match self {
            Mask::PerChannel(m) => m.len() == channels,
            Mask::Elementwise(m) => m.len() == n * channels,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("mask length does not match field shape".into()))
        }
    }

    pub fn apply(&self, data: &[f64], channels: usize) -> Vec<f64> {
        match self {
            Mask::PerChannel(m) => data
                .iter()
                .enumerate()
                .map(|(i, v)| v * m[i % channels])
                .collect(),
            Mask::Elementwise(m) => data.iter().zip(m).map(|(v, w)| v * w).collect(),
        }
    }
}

/// Where stochastic multipliers enter a forward pass. Empty set = the
/// deterministic network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSet {
    pub input: Option<Mask>,
    pub lift_out: Option<Mask>,
    pub layer_in: Vec<Option<Mask>>,
    pub recover_in: Option<Mask>,
}

impl MaskSet {
    pub fn none() -> Self {
        MaskSet::default()
    }
}

// ---------------------------------------------------------------------------
// FFT plumbing
// ---------------------------------------------------------------------------

thread_local! {
    static FFT_PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    FFT_PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place 2D DFT over a row-major `[ny][nx]` complex buffer. The inverse
/// includes the 1/(nx*ny) normalization.
pub fn fft2(buf: &mut [Complex<f64>], nx: usize, ny: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), nx * ny);
    let row_plan = plan(nx, inverse);
    let mut scratch = vec![Complex::default(); row_plan.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(nx) {
        row_plan.process_with_scratch(row, &mut scratch);
    }
    let col_plan = plan(ny, inverse);
    scratch.resize(col_plan.get_inplace_scratch_len(), Complex::default());
    let mut col = vec![Complex::default(); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = buf[y * nx + x];
        }
        col_plan.process_with_scratch(&mut col, &mut scratch);
        for y in 0..ny {
            buf[y * nx + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (nx * ny) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

#[inline]
fn bin(k: i32, n: usize) -> usize {
    k.rem_euclid(n as i32) as usize
}

/// Truncated forward transform: 2D DFT coefficients of each channel of a
/// real `[N][channels]` field at the active modes. Output `[n_modes][channels]`.
pub fn spectral_forward(
    data: &[f64],
    grid: Grid2D,
    channels: usize,
    modes: &[(i32, i32)],
) -> Vec<Complex<f64>> {
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let mut out = vec![Complex::default(); modes.len() * channels];
    let mut buf = vec![Complex::default(); n];
    for c in 0..channels {
        for p in 0..n {
            buf[p] = Complex::new(data[p * channels + c], 0.0);
        }
        fft2(&mut buf, nx, ny, false);
        for (mi, &(kx, ky)) in modes.iter().enumerate() {
            out[mi * channels + c] = buf[bin(ky, ny) * nx + bin(kx, nx)];
        }
    }
    out
}

/// Inverse of the truncated transform under Hermitian extension: places each
/// active-mode coefficient and its conjugate mirror, then inverse FFTs and
/// keeps the real part. Coefficients `[n_modes][channels]`.
pub fn spectral_inverse(
    coeffs: &[Complex<f64>],
    grid: Grid2D,
    channels: usize,
    modes: &[(i32, i32)],
) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let mut out = vec![0.0; n * channels];
    let mut buf = vec![Complex::default(); n];
    for c in 0..channels {
        buf.iter_mut().for_each(|v| *v = Complex::default());
        for (mi, &(kx, ky)) in modes.iter().enumerate() {
            let z = coeffs[mi * channels + c];
            if kx == 0 && ky == 0 {
                buf[0] = Complex::new(z.re, 0.0);
            } else {
                buf[bin(ky, ny) * nx + bin(kx, nx)] = z;
                buf[bin(-ky, ny) * nx + bin(-kx, nx)] = z.conj();
            }
        }
        fft2(&mut buf, nx, ny, true);
        for p in 0..n {
            out[p * channels + c] = buf[p].re;
        }
    }
    out
}

/// Mode-space mixing: `out[m][j] = sum_i R[m][i][j] in[m][i]`, with the
/// self-conjugate mode (index 0) using only the real part of R.
pub fn spectral_mix(
    spectral: &[f64],
    coeffs_in: &[Complex<f64>],
    d_v: usize,
    n_modes: usize,
) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::default(); n_modes * d_v];
    for m in 0..n_modes {
        for i in 0..d_v {
            let z = coeffs_in[m * d_v + i];
            for j in 0..d_v {
                let base = spectral_index(m, i, j, d_v);
                let r = if m == 0 {
                    Complex::new(spectral[base], 0.0)
                } else {
                    Complex::new(spectral[base], spectral[base + 1])
                };
                out[m * d_v + j] += r * z;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Activation for layer `l` of `total`: the configured nonlinearity on all
/// but the last propagation layer, identity on the last.
pub fn layer_activation(cfg: &OperatorConfig, l: usize) -> Activation {
    if l + 1 == cfg.layers {
        Activation::Identity
    } else {
        cfg.activation
    }
}

fn affine(data: &[f64], n: usize, d_in: usize, d_out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    for p in 0..n {
        let row = &data[p * d_in..(p + 1) * d_in];
        let o = &mut out[p * d_out..(p + 1) * d_out];
        o.copy_from_slice(b);
        for (i, &x) in row.iter().enumerate() {
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for j in 0..d_out {
                o[j] += x * wrow[j];
            }
        }
    }
    out
}

/// Everything backward needs from one stochastic forward pass.
pub struct ForwardCache {
    pub input_masked: Vec<f64>,
    pub v0: Vec<f64>,
    /// Masked input of each propagation layer.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Active-mode DFT coefficients of each layer's masked input.
    pub layer_spec_in: Vec<Vec<Complex<f64>>>,
    /// Pre-activation of each layer.
    pub layer_pre: Vec<Vec<f64>>,
    pub recover_in_masked: Vec<f64>,
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("non-finite values in {}", what)));
    }
    Ok(())
}

/// Full forward pass with optional multiplicative masks, caching
/// intermediates for reverse mode.
pub fn forward_cached(
    input: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    masks: &MaskSet,
) -> Result<(Field, ForwardCache)> {
    cfg.validate_for_grid(&input.grid)?;
    if input.channels != cfg.d_a {
        return Err(Error::Shape(format!(
            "input has {} channels, operator expects d_a = {}",
            input.channels, cfg.d_a
        )));
    }
    if !params.shapes_match(cfg) {
        return Err(Error::Shape("parameter shapes do not match operator config".into()));
    }
    if !masks.layer_in.is_empty() && masks.layer_in.len() != cfg.layers {
        return Err(Error::Shape("layer_in mask list length does not match layer count".into()));
    }
    let grid = input.grid;
    let n = grid.n_points();
    let modes = mode_list(cfg.k_max);

    let input_masked = match &masks.input {
        Some(m) => {
            m.check(n, cfg.d_a)?;
            m.apply(&input.values, cfg.d_a)
        }
        None => input.values.clone(),
    };
    let v0 = affine(&input_masked, n, cfg.d_a, cfg.d_v, &params.w_p, &params.b_p);
    check_finite(&v0, "lifting output")?;
    let mut x = match &masks.lift_out {
        Some(m) => {
            m.check(n, cfg.d_v)?;
            m.apply(&v0, cfg.d_v)
        }
        None => v0.clone(),
    };

    let mut layer_inputs = Vec::with_capacity(cfg.layers);
    let mut layer_spec_in = Vec::with_capacity(cfg.layers);
    let mut layer_pre = Vec::with_capacity(cfg.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let vm = match masks.layer_in.get(l).and_then(|m| m.as_ref()) {
            Some(m) => {
                m.check(n, cfg.d_v)?;
                m.apply(&x, cfg.d_v)
            }
            None => x,
        };
        let spec_in = spectral_forward(&vm, grid, cfg.d_v, &modes);
        let mixed = spectral_mix(&layer.spectral, &spec_in, cfg.d_v, modes.len());
        let spectral_out = spectral_inverse(&mixed, grid, cfg.d_v, &modes);
        let mut pre = affine(&vm, n, cfg.d_v, cfg.d_v, &layer.w, &layer.b);
        for (s, k) in pre.iter_mut().zip(&spectral_out) {
            *s += k;
        }
        check_finite(&pre, &format!("propagation layer {}", l))?;
        let next = match layer_activation(cfg, l) {
            Activation::Gelu => pre.iter().map(|&s| gelu(s)).collect(),
            Activation::Identity => pre.clone(),
        };
        layer_inputs.push(vm);
        layer_spec_in.push(spec_in);
        layer_pre.push(pre);
        x = next;
    }

    let recover_in_masked = match &masks.recover_in {
        Some(m) => {
            m.check(n, cfg.d_v)?;
            m.apply(&x, cfg.d_v)
        }
        None => x,
    };
    let out_values = affine(
        &recover_in_masked,
        n,
        cfg.d_v,
        cfg.d_u,
        &params.w_q,
        &params.b_q,
    );
    let out = Field::from_values(grid, cfg.d_u, out_values)?;
    out.validate_finite("operator output")?;
    Ok((
        out,
        ForwardCache {
            input_masked,
            v0,
            layer_inputs,
            layer_spec_in,
            layer_pre,
            recover_in_masked,
        },
    ))
}

/// Deterministic forward pass.
pub fn forward(input: &Field, params: &OperatorParams, cfg: &OperatorConfig) -> Result<Field> {
    forward_cached(input, params, cfg, &MaskSet::none()).map(|(f, _)| f)
}

/// Builds the 3-channel network input (coefficient, x, y) from a scalar
/// coefficient field.
pub fn input_with_coordinates(a: &Field) -> Result<Field> {
    if a.channels != 1 {
        return Err(Error::Shape(format!(
            "coefficient field must have 1 channel, got {}",
            a.channels
        )));
    }
    let g = a.grid;
    let mut out = Field::zeros(g, 3)?;
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            out.set(ix, iy, 0, a.get(ix, iy, 0));
            out.set(ix, iy, 1, g.x(ix));
            out.set(ix, iy, 2, g.y(iy));
        }
    }
    Ok(out)
}

/// Pointwise affine lifting on its own.
pub fn lift(input: &Field, params: &OperatorParams, cfg: &OperatorConfig) -> Result<Field> {
    if input.channels != cfg.d_a {
        return Err(Error::Shape(format!(
            "input has {} channels, lifting expects {}",
            input.channels, cfg.d_a
        )));
    }
    let n = input.grid.n_points();
    let values = affine(&input.values, n, cfg.d_a, cfg.d_v, &params.w_p, &params.b_p);
    let f = Field::from_values(input.grid, cfg.d_v, values)?;
    f.validate_finite("lift")?;
    Ok(f)
}

/// The propagation stack on its own.
pub fn propagate(v0: &Field, params: &OperatorParams, cfg: &OperatorConfig) -> Result<Field> {
    cfg.validate_for_grid(&v0.grid)?;
    if v0.channels != cfg.d_v {
        return Err(Error::Shape(format!(
            "latent field has {} channels, expected d_v = {}",
            v0.channels, cfg.d_v
        )));
    }
    let grid = v0.grid;
    let n = grid.n_points();
    let modes = mode_list(cfg.k_max);
    let mut x = v0.values.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let spec_in = spectral_forward(&x, grid, cfg.d_v, &modes);
        let mixed = spectral_mix(&layer.spectral, &spec_in, cfg.d_v, modes.len());
        let spectral_out = spectral_inverse(&mixed, grid, cfg.d_v, &modes);
        let mut pre = affine(&x, n, cfg.d_v, cfg.d_v, &layer.w, &layer.b);
        for (s, k) in pre.iter_mut().zip(&spectral_out) {
            *s += k;
        }
        x = match layer_activation(cfg, l) {
            Activation::Gelu => pre.iter().map(|&s| gelu(s)).collect(),
            Activation::Identity => pre,
        };
    }
    let f = Field::from_values(grid, cfg.d_v, x)?;
    f.validate_finite("propagate")?;
    Ok(f)
}

/// Pointwise affine recovery on its own.
pub fn recover(vl: &Field, params: &OperatorParams, cfg: &OperatorConfig) -> Result<Field> {
    if vl.channels != cfg.d_v {
        return Err(Error::Shape(format!(
            "latent field has {} channels, recovery expects {}",
            vl.channels, cfg.d_v
        )));
    }
    let n = vl.grid.n_points();
    let values = affine(&vl.values, n, cfg.d_v, cfg.d_u, &params.w_q, &params.b_q);
    let f = Field::from_values(vl.grid, cfg.d_u, values)?;
    f.validate_finite("recover")?;
    Ok(f)
}

/// Direct DFT-sum evaluation of one spectral convolution; the reference the
/// FFT path is checked against. O(N * modes * d_v^2), for small grids only.
pub fn spectral_conv_dft_reference(
    vm: &[f64],
    grid: Grid2D,
    d_v: usize,
    spectral: &[f64],
    k_max: usize,
) -> Vec<f64> {
    let modes = mode_list(k_max);
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let tau = std::f64::consts::TAU;
    // coefficients by direct summation
    let mut coeffs = vec![Complex::default(); modes.len() * d_v];
    for (mi, &(kx, ky)) in modes.iter().enumerate() {
        for c in 0..d_v {
            let mut acc = Complex::default();
            for iy in 0..ny {
                for ix in 0..nx {
                    let phase = -tau * (kx as f64 * ix as f64 / nx as f64 + ky as f64 * iy as f64 / ny as f64);
                    acc += Complex::new(phase.cos(), phase.sin()) * vm[(iy * nx + ix) * d_v + c];
                }
            }
            coeffs[mi * d_v + c] = acc;
        }
    }
    let mixed = spectral_mix(spectral, &coeffs, d_v, modes.len());
    // inverse by direct summation with Hermitian mirror
    let mut out = vec![0.0; n * d_v];
    for iy in 0..ny {
        for ix in 0..nx {
            for j in 0..d_v {
                let mut acc = 0.0;
                for (mi, &(kx, ky)) in modes.iter().enumerate() {
                    let z = mixed[mi * d_v + j];
                    let phase = tau * (kx as f64 * ix as f64 / nx as f64 + ky as f64 * iy as f64 / ny as f64);
                    let e = Complex::new(phase.cos(), phase.sin());
                    if kx == 0 && ky == 0 {
                        acc += z.re;
                    } else {
                        acc += 2.0 * (z * e).re;
                    }
                }
                out[(iy * nx + ix) * d_v + j] = acc / n as f64;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_KIND: &str = "checkpoint";

pub fn checkpoint_container(params: &OperatorParams, cfg: &OperatorConfig) -> Result<DatasetContainer> {
    if !params.shapes_match(cfg) {
        return Err(Error::Shape("parameters do not match config".into()));
    }
    let nm = n_modes(cfg.k_max);
    let mut c = DatasetContainer::new();
    c.set_meta("kind", CHECKPOINT_KIND);
    c.set_meta("d_a", cfg.d_a);
    c.set_meta("d_v", cfg.d_v);
    c.set_meta("d_u", cfg.d_u);
    c.set_meta("layers", cfg.layers);
    c.set_meta("k_max", cfg.k_max);
    c.set_meta("activation", cfg.activation);
    c.add_tensor("W_P", TensorBlob::new(vec![cfg.d_a, cfg.d_v], params.w_p.clone())?)?;
    c.add_tensor("b_P", TensorBlob::new(vec![cfg.d_v], params.b_p.clone())?)?;
    for (l, layer) in params.layers.iter().enumerate() {
        c.add_tensor(
            &format!("R_{}", l),
            TensorBlob::new(vec![nm, cfg.d_v, cfg.d_v, 2], layer.spectral.clone())?,
        )?;
        c.add_tensor(
            &format!("W_{}", l),
            TensorBlob::new(vec![cfg.d_v, cfg.d_v], layer.w.clone())?,
        )?;
        c.add_tensor(&format!("b_{}", l), TensorBlob::new(vec![cfg.d_v], layer.b.clone())?)?;
    }
    c.add_tensor("W_Q", TensorBlob::new(vec![cfg.d_v, cfg.d_u], params.w_q.clone())?)?;
    c.add_tensor("b_Q", TensorBlob::new(vec![cfg.d_u], params.b_q.clone())?)?;
    Ok(c)
}

pub fn save_checkpoint(params: &OperatorParams, cfg: &OperatorConfig, path: &Path) -> Result<()> {
    checkpoint_container(params, cfg)?.write(path)
}

pub fn params_from_container(c: &DatasetContainer) -> Result<(OperatorParams, OperatorConfig)> {
    if c.meta("kind") != Some(CHECKPOINT_KIND) {
        return Err(Error::Format("container is not a checkpoint".into()));
    }
    let cfg = OperatorConfig {
        d_a: c.meta_parsed("d_a")?,
        d_v: c.meta_parsed("d_v")?,
        d_u: c.meta_parsed("d_u")?,
        layers: c.meta_parsed("layers")?,
        k_max: c.meta_parsed("k_max")?,
        activation: c.meta_parsed("activation")?,
    };
    cfg.validate()?;
    let nm = n_modes(cfg.k_max);
    let expect = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
        let t = c.tensor(name)?;
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                name, t.shape, shape
            )));
        }
        Ok(t.data.clone())
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        layers.push(LayerParams {
            spectral: expect(&format!("R_{}", l), vec![nm, cfg.d_v, cfg.d_v, 2])?,
            w: expect(&format!("W_{}", l), vec![cfg.d_v, cfg.d_v])?,
            b: expect(&format!("b_{}", l), vec![cfg.d_v])?,
        });
    }
    let params = OperatorParams {
        w_p: expect("W_P", vec![cfg.d_a, cfg.d_v])?,
        b_p: expect("b_P", vec![cfg.d_v])?,
        layers,
        w_q: expect("W_Q", vec![cfg.d_v, cfg.d_u])?,
        b_q: expect("b_Q", vec![cfg.d_u])?,
    };
    for v in params
        .w_p
        .iter()
        .chain(&params.b_p)
        .chain(&params.w_q)
        .chain(&params.b_q)
    {
        if !v.is_finite() {
            return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
        }
    }
    Ok((params, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(OperatorParams, OperatorConfig)> {
    params_from_container(&DatasetContainer::read(path)?)
}
