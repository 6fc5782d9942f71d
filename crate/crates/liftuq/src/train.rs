//! Relative-L2 training: hand-written reverse-mode gradients for the whole
//! operator, Adam with cosine decay, and the epoch loop with held-out
//! monitoring.

use crate::error::{Error, Result};
use crate::operator_net::{
    forward_cached, layer_activation, mode_list, spectral_index, Activation, Mask, MaskSet,
    OperatorConfig, OperatorParams,
};
use crate::tensor_field::{Field, RngStream};
use rayon::prelude::*;
use rustfft::num_complex::Complex;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Inverted-dropout rate applied before every linear map while training;
    /// used only for the naive MC-Dropout baseline model. 0 disables it.
    pub dropout_p: f64,
    /// Stop once held-out relative L2 reaches this value.
    pub early_stop_rel_l2: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 20,
            learning_rate: 1e-3,
            lr_min: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            eval_every: 5,
            dropout_p: 0.0,
            early_stop_rel_l2: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0)
            || !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0)
        {
            return Err(Error::Config("Adam betas must lie in (0,1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One real array per parameter tensor, shape-matched to `OperatorParams`.
pub type GradientSet = OperatorParams;

pub fn tensors(p: &OperatorParams) -> Vec<&Vec<f64>> {
    let mut out = vec![&p.w_p, &p.b_p];
    for l in &p.layers {
        out.push(&l.spectral);
        out.push(&l.w);
        out.push(&l.b);
    }
    out.push(&p.w_q);
    out.push(&p.b_q);
    out
}

pub fn tensors_mut(p: &mut OperatorParams) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = vec![&mut p.w_p, &mut p.b_p];
    for l in &mut p.layers {
        out.push(&mut l.spectral);
        out.push(&mut l.w);
        out.push(&mut l.b);
    }
    out.push(&mut p.w_q);
    out.push(&mut p.b_q);
    out
}

fn add_assign(acc: &mut OperatorParams, other: &OperatorParams) {
    let dst = tensors_mut(acc);
    let src = tensors(other);
    for (d, s) in dst.into_iter().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

fn scale(acc: &mut OperatorParams, factor: f64) {
    for t in tensors_mut(acc) {
        for v in t.iter_mut() {
            *v *= factor;
        }
    }
}

/// Fixed-tree pairwise sum in input order; the reduction is identical for
/// any worker count.
pub fn pairwise_sum_grads(mut items: Vec<OperatorParams>) -> Option<OperatorParams> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_assign(&mut a, &b);
            }
            next.push(a);
        }
        items = next;
    }
    items.pop()
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Relative L2: ||pred - truth||_F / ||truth||_F.
pub fn relative_l2_loss(pred: &Field, truth: &Field) -> Result<f64> {
    if pred.values.len() != truth.values.len() {
        return Err(Error::Shape("loss operands have different shapes".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.values.iter().zip(&truth.values) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::Numerical("relative L2 undefined for zero-norm truth".into()));
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

fn affine_backward(
    input: &[f64],
    g_out: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    g_in: &mut [f64],
) {
    for p in 0..n {
        let row = &input[p * d_in..(p + 1) * d_in];
        let go = &g_out[p * d_out..(p + 1) * d_out];
        for j in 0..d_out {
            gb[j] += go[j];
        }
        for i in 0..d_in {
            let wrow = &w[i * d_out..(i + 1) * d_out];
            let gwrow = &mut gw[i * d_out..(i + 1) * d_out];
            let x = row[i];
            let mut acc = 0.0;
            for j in 0..d_out {
                gwrow[j] += x * go[j];
                acc += wrow[j] * go[j];
            }
            g_in[p * d_in + i] += acc;
        }
    }
}

fn mask_backward(mask: &Option<Mask>, g: Vec<f64>, channels: usize) -> Vec<f64> {
    match mask {
        Some(m) => m.apply(&g, channels),
        None => g,
    }
}

/// Adjoint of the truncated spectral convolution. Returns the gradient with
/// respect to the layer input and accumulates the spectral-weight gradient.
fn spectral_backward(
    g_out: &[f64],
    spec_in: &[Complex<f64>],
    spectral: &[f64],
    g_spectral: &mut [f64],
    grid: crate::tensor_field::Grid2D,
    d_v: usize,
    modes: &[(i32, i32)],
) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let nf = n as f64;
    // cotangent of the mixed coefficients: scaled forward DFT of g_out
    let g_mixed_raw = crate::operator_net::spectral_forward(g_out, grid, d_v, modes);
    let mut g_mixed = vec![Complex::default(); modes.len() * d_v];
    for (mi, _) in modes.iter().enumerate() {
        for j in 0..d_v {
            let raw = g_mixed_raw[mi * d_v + j];
            g_mixed[mi * d_v + j] = if mi == 0 {
                Complex::new(raw.re / nf, 0.0)
            } else {
                raw * (2.0 / nf)
            };
        }
    }
    // spectral-weight gradient and input-coefficient cotangent
    let mut g_coeff = vec![Complex::default(); modes.len() * d_v];
    for (mi, _) in modes.iter().enumerate() {
        for i in 0..d_v {
            let z = spec_in[mi * d_v + i];
            for j in 0..d_v {
                let gs = g_mixed[mi * d_v + j];
                let base = spectral_index(mi, i, j, d_v);
                let gr = gs * z.conj();
                if mi == 0 {
                    g_spectral[base] += gr.re;
                    // imaginary part of the self-conjugate multiplier is inert
                    let r = Complex::new(spectral[base], 0.0);
                    g_coeff[mi * d_v + i] += r.conj() * gs;
                } else {
                    g_spectral[base] += gr.re;
                    g_spectral[base + 1] += gr.im;
                    let r = Complex::new(spectral[base], spectral[base + 1]);
                    g_coeff[mi * d_v + i] += r.conj() * gs;
                }
            }
        }
    }
    // back through the truncated forward DFT: N * Re(IFFT of the cotangents)
    let (mut out, mut buf) = (vec![0.0; n * d_v], vec![Complex::default(); n]);
    for i in 0..d_v {
        buf.iter_mut().for_each(|v| *v = Complex::default());
        for (mi, &(kx, ky)) in modes.iter().enumerate() {
            buf[(ky.rem_euclid(ny as i32) as usize) * nx + kx.rem_euclid(nx as i32) as usize] =
                g_coeff[mi * d_v + i];
        }
        crate::operator_net::fft2(&mut buf, nx, ny, true);
        for p in 0..n {
            out[p * d_v + i] = nf * buf[p].re;
        }
    }
    out
}

/// Gradient of one sample's relative-L2 loss; the caller averages.
fn backward_sample(
    input: &Field,
    truth: &Field,
    params: &OperatorParams,
    cfg: &OperatorConfig,
    masks: &MaskSet,
) -> Result<(f64, GradientSet)> {
    let (pred, cache) = forward_cached(input, params, cfg, masks)?;
    let loss = relative_l2_loss(&pred, truth)?;
    let mut grads = OperatorParams::zeros(cfg)?;
    let n = input.grid.n_points();
    let modes = mode_list(cfg.k_max);

    let norm_truth = truth.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_diff = pred
        .values
        .iter()
        .zip(&truth.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    if norm_diff == 0.0 {
        return Ok((loss, grads));
    }
    let inv = 1.0 / (norm_diff * norm_truth);
    let g_out: Vec<f64> = pred
        .values
        .iter()
        .zip(&truth.values)
        .map(|(p, t)| (p - t) * inv)
        .collect();

    // recovery
    let mut g_recover_in = vec![0.0; n * cfg.d_v];
    affine_backward(
        &cache.recover_in_masked,
        &g_out,
        n,
        cfg.d_v,
        cfg.d_u,
        &params.w_q,
        &mut grads.w_q,
        &mut grads.b_q,
        &mut g_recover_in,
    );
    let mut g_x = mask_backward(&masks.recover_in, g_recover_in, cfg.d_v);

    // propagation layers, reversed
    for l in (0..cfg.layers).rev() {
        let layer = &params.layers[l];
        let pre = &cache.layer_pre[l];
        let g_pre: Vec<f64> = match layer_activation(cfg, l) {
            Activation::Gelu => g_x
                .iter()
                .zip(pre)
                .map(|(g, &s)| g * crate::operator_net::gelu_deriv(s))
                .collect(),
            Activation::Identity => g_x,
        };
        if g_pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite gradient in propagation layer {}",
                l
            )));
        }
        let mut g_vm = spectral_backward(
            &g_pre,
            &cache.layer_spec_in[l],
            &layer.spectral,
            &mut grads.layers[l].spectral,
            input.grid,
            cfg.d_v,
            &modes,
        );
        let glayer = &mut grads.layers[l];
        affine_backward(
            &cache.layer_inputs[l],
            &g_pre,
            n,
            cfg.d_v,
            cfg.d_v,
            &layer.w,
            &mut glayer.w,
            &mut glayer.b,
            &mut g_vm,
        );
        g_x = mask_backward(
            &masks.layer_in.get(l).cloned().unwrap_or(None),
            g_vm,
            cfg.d_v,
        );
    }

    // lifting
    let g_v0 = mask_backward(&masks.lift_out, g_x, cfg.d_v);
    let mut g_input = vec![0.0; n * cfg.d_a];
    affine_backward(
        &cache.input_masked,
        &g_v0,
        n,
        cfg.d_a,
        cfg.d_v,
        &params.w_p,
        &mut grads.w_p,
        &mut grads.b_p,
        &mut g_input,
    );
    Ok((loss, grads))
}

/// Mean loss and gradient over a batch. `masks` is either empty (no noise)
/// or one `MaskSet` per sample.
pub fn backward_batch(
    batch: &[(Field, Field)],
    params: &OperatorParams,
    cfg: &OperatorConfig,
    masks: &[MaskSet],
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if !masks.is_empty() && masks.len() != batch.len() {
        return Err(Error::Shape("mask count does not match batch size".into()));
    }
    let none = MaskSet::none();
    let results: Vec<Result<(f64, GradientSet)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (a, u))| {
            let mask = if masks.is_empty() { &none } else { &masks[i] };
            backward_sample(a, u, params, cfg, mask)
        })
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    let loss = losses.iter().sum::<f64>() / batch.len() as f64;
    let mut grad = pairwise_sum_grads(grads).expect("nonempty batch");
    scale(&mut grad, 1.0 / batch.len() as f64);
    Ok((loss, grad))
}

/// Analytic batch gradient with no stochastic masks.
pub fn backward(
    batch: &[(Field, Field)],
    params: &OperatorParams,
    cfg: &OperatorConfig,
) -> Result<(f64, GradientSet)> {
    backward_batch(batch, params, cfg, &[])
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: OperatorParams,
    pub v: OperatorParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: &OperatorConfig) -> Result<Self> {
        Ok(AdamState {
            m: OperatorParams::zeros(cfg)?,
            v: OperatorParams::zeros(cfg)?,
            step: 0,
        })
    }
}

/// Standard bias-corrected Adam update, elementwise.
pub fn adam_step(
    params: &mut OperatorParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let p_t = tensors_mut(params);
    let g_t = tensors(grads);
    let m_t = tensors_mut(&mut state.m);
    let v_t = tensors_mut(&mut state.v);
    for (((p, g), m), v) in p_t.into_iter().zip(g_t).zip(m_t).zip(v_t) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_rel_l2: f64,
    pub eval_rel_l2: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_params: OperatorParams,
    pub best_eval: f64,
    pub history: Vec<HistoryRow>,
    /// Set when the run aborted on divergence; the history is still valid.
    pub diverged: Option<String>,
}

pub fn eval_rel_l2(
    data: &[(Field, Field)],
    params: &OperatorParams,
    cfg: &OperatorConfig,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|(a, u)| {
            let pred = crate::operator_net::forward(a, params, cfg)?;
            relative_l2_loss(&pred, u)
        })
        .collect();
    let mut sum = 0.0;
    for l in &losses {
        sum += *l.as_ref().map_err(|e| Error::Numerical(e.to_string()))?;
    }
    Ok(sum / data.len() as f64)
}

pub(crate) fn dropout_masks(
    rng: &RngStream,
    n: usize,
    cfg: &OperatorConfig,
    p: f64,
) -> MaskSet {
    let mut s = *rng;
    let mut draw = |len: usize| -> Mask {
        let inv = 1.0 / (1.0 - p);
        Mask::Elementwise(
            (0..len)
                .map(|_| if s.next_bernoulli(1.0 - p) { inv } else { 0.0 })
                .collect(),
        )
    };
    MaskSet {
        input: Some(draw(n * cfg.d_a)),
        lift_out: None,
        layer_in: (0..cfg.layers).map(|_| Some(draw(n * cfg.d_v))).collect(),
        recover_in: Some(draw(n * cfg.d_v)),
    }
}

fn cosine_lr(tcfg: &TrainConfig, epoch: usize) -> f64 {
    let frac = (epoch - 1) as f64 / tcfg.epochs.max(1) as f64;
    tcfg.lr_min
        + 0.5 * (tcfg.learning_rate - tcfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trains the operator, tracking the best held-out checkpoint. Deterministic
/// in its arguments; per-sample work may run in parallel.
pub fn train_model(
    train_data: &[(Field, Field)],
    eval_data: &[(Field, Field)],
    op_cfg: &OperatorConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let root = RngStream::new(tcfg.seed, 0);
    let params = OperatorParams::init(op_cfg, &root.fork(u64::MAX))?;
    train_model_from(train_data, eval_data, op_cfg, tcfg, params)
}

/// Same loop but starting from the given parameters (checkpoint resume).
pub fn train_model_from(
    train_data: &[(Field, Field)],
    eval_data: &[(Field, Field)],
    op_cfg: &OperatorConfig,
    tcfg: &TrainConfig,
    initial: OperatorParams,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Config("train and eval splits must be nonempty".into()));
    }
    let n_points = train_data[0].0.grid.n_points();
    let root = RngStream::new(tcfg.seed, 0);
    let mut params = initial;
    let mut state = AdamState::new(op_cfg)?;
    let mut best_params = params.clone();
    let mut best_eval = f64::INFINITY;
    let mut history = Vec::new();
    let mut last_eval = f64::NAN;
    let mut indices: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=tcfg.epochs {
        let mut shuffle_rng = root.fork(epoch as u64);
        for i in (1..indices.len()).rev() {
            let j = (shuffle_rng.next_u64() % (i as u64 + 1)) as usize;
            indices.swap(i, j);
        }
        let lr = cosine_lr(tcfg, epoch);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in indices.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<(Field, Field)> = chunk
                .iter()
                .map(|&i| train_data[i].clone())
                .collect();
            let masks: Vec<MaskSet> = if tcfg.dropout_p > 0.0 {
                let batch_rng = root.fork(epoch as u64).fork(batch_idx as u64 + 1);
                (0..batch.len())
                    .map(|i| dropout_masks(&batch_rng.fork(i as u64), n_points, op_cfg, tcfg.dropout_p))
                    .collect()
            } else {
                Vec::new()
            };
            let (loss, grads) = backward_batch(&batch, &params, op_cfg, &masks)?;
            if !loss.is_finite() || loss > 1e3 {
                return Ok(TrainOutcome {
                    best_params,
                    best_eval,
                    history,
                    diverged: Some(format!("loss {} at epoch {}", loss, epoch)),
                });
            }
            epoch_loss += loss;
            n_batches += 1;
            adam_step(&mut params, &grads, &mut state, lr, tcfg);
        }
        let train_loss = epoch_loss / n_batches as f64;
        if epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs {
            last_eval = eval_rel_l2(eval_data, &params, op_cfg)?;
            if last_eval < best_eval {
                best_eval = last_eval;
                best_params = params.clone();
            }
        }
        history.push(HistoryRow {
            epoch,
            train_rel_l2: train_loss,
            eval_rel_l2: last_eval,
        });
        if let Some(th) = tcfg.early_stop_rel_l2 {
            if best_eval <= th {
                break;
            }
        }
    }
    if !best_eval.is_finite() {
        // eval never ran better than the init; keep final params
        best_params = params;
    }
    Ok(TrainOutcome {
        best_params,
        best_eval,
        history,
        diverged: None,
    })
}

/// Loss-history CSV with header `epoch,train_rel_l2,eval_rel_l2`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_rel_l2,eval_rel_l2\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{}\n",
            row.epoch, row.train_rel_l2, row.eval_rel_l2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_field::{Field, Grid2D};

    fn tiny_cfg() -> OperatorConfig {
        OperatorConfig {
            d_a: 3,
            d_v: 4,
            d_u: 1,
            layers: 1,
            k_max: 2,
            activation: Activation::Gelu,
        }
    }

    fn sample(grid: Grid2D, seed: u64) -> (Field, Field) {
        let mut rng = RngStream::new(seed, 0);
        let mut a = Field::zeros(grid, 3).unwrap();
        let mut u = Field::zeros(grid, 1).unwrap();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                a.set(ix, iy, 0, rng.next_gaussian());
                a.set(ix, iy, 1, grid.x(ix));
                a.set(ix, iy, 2, grid.y(iy));
                u.set(ix, iy, 0, rng.next_gaussian() + 0.5);
            }
        }
        (a, u)
    }

    #[test]
    fn relative_l2_basic_values() {
        let g = Grid2D::new(4, 4).unwrap();
        let (_, u) = sample(g, 1);
        assert_eq!(relative_l2_loss(&u, &u).unwrap(), 0.0);
        let mut double = u.clone();
        double.values.iter_mut().for_each(|v| *v *= 2.0);
        assert!((relative_l2_loss(&double, &u).unwrap() - 1.0).abs() < 1e-14);
        let zero = Field::zeros(g, 1).unwrap();
        assert!((relative_l2_loss(&zero, &u).unwrap() - 1.0).abs() < 1e-14);
        assert!(relative_l2_loss(&u, &zero).is_err());
    }

    #[test]
    fn recovery_bias_gradient_matches_closed_form() {
        let cfg = tiny_cfg();
        let g = Grid2D::new(8, 8).unwrap();
        let params = OperatorParams::zeros(&cfg).unwrap();
        let mut params = params;
        params.b_q = vec![0.3];
        let (a, u) = sample(g, 3);
        let (_, grads) = backward(&[(a, u.clone())], &params, &cfg).unwrap();
        // d/db ||b*1 - U||/||U|| = sum(b - U_n) / (||b*1-U|| * ||U||)
        let b = 0.3;
        let norm_u = u.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_d = u.values.iter().map(|v| (b - v) * (b - v)).sum::<f64>().sqrt();
        let expected: f64 = u.values.iter().map(|v| b - v).sum::<f64>() / (norm_d * norm_u);
        assert!(
            (grads.b_q[0] - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "{} vs {}",
            grads.b_q[0],
            expected
        );
    }

    /// Central finite differences over every stored parameter.
    fn finite_difference_check(cfg: &OperatorConfig, dropout_like_masks: bool) {
        let g = Grid2D::new(8, 8).unwrap();
        let batch = vec![sample(g, 5), sample(g, 6)];
        let params = OperatorParams::init(cfg, &RngStream::new(9, 0)).unwrap();
        let masks: Vec<MaskSet> = if dropout_like_masks {
            let rng = RngStream::new(77, 0);
            (0..batch.len())
                .map(|i| dropout_masks(&rng.fork(i as u64), g.n_points(), cfg, 0.2))
                .collect()
        } else {
            Vec::new()
        };
        let (_, grads) = backward_batch(&batch, &params, cfg, &masks).unwrap();
        let loss_at = |p: &OperatorParams| -> f64 {
            backward_batch(&batch, p, cfg, &masks).unwrap().0
        };
        let step = 1e-6;
        let g_tensors = tensors(&grads);
        let n_tensors = g_tensors.len();
        let mut worst = 0.0f64;
        for ti in 0..n_tensors {
            let len = g_tensors[ti].len();
            for i in 0..len {
                let mut plus = params.clone();
                tensors_mut(&mut plus)[ti][i] += step;
                let mut minus = params.clone();
                tensors_mut(&mut minus)[ti][i] -= step;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                let an = tensors(&grads)[ti][i];
                let denom = an.abs().max(fd.abs());
                // absolute floor covers central-difference roundoff (~1e-10)
                let err = (fd - an).abs();
                worst = worst.max(err / denom.max(1e-9));
                assert!(
                    err <= 1e-5 * denom + 1e-9,
                    "tensor {} index {}: analytic {} fd {} err {}",
                    ti,
                    i,
                    an,
                    fd,
                    err
                );
            }
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(&tiny_cfg(), false);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout_masks() {
        finite_difference_check(&tiny_cfg(), true);
    }

    #[test]
    fn duplicated_sample_leaves_mean_gradient_unchanged() {
        let cfg = tiny_cfg();
        let g = Grid2D::new(8, 8).unwrap();
        let s = sample(g, 10);
        let params = OperatorParams::init(&cfg, &RngStream::new(11, 0)).unwrap();
        let (l1, g1) = backward(&[s.clone()], &params, &cfg).unwrap();
        let (l2, g2) = backward(&[s.clone(), s], &params, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in tensors(&g1).into_iter().zip(tensors(&g2)) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig::default();
        let mut params = OperatorParams::init(&cfg, &RngStream::new(1, 0)).unwrap();
        let before = params.clone();
        let zero = OperatorParams::zeros(&cfg).unwrap();
        let mut state = AdamState::new(&cfg).unwrap();
        adam_step(&mut params, &zero, &mut state, 1e-3, &tcfg);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig::default();
        let mut params = OperatorParams::zeros(&cfg).unwrap();
        let mut grads = OperatorParams::zeros(&cfg).unwrap();
        grads.w_p[0] = 0.5;
        grads.w_p[1] = -2.0;
        let mut state = AdamState::new(&cfg).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-3, &tcfg);
        assert!((params.w_p[0] + 1e-3).abs() < 1e-7);
        assert!((params.w_p[1] - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn adam_is_a_pure_function_of_state() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig::default();
        let grads = OperatorParams::init(&cfg, &RngStream::new(2, 0)).unwrap();
        let run = || {
            let mut p = OperatorParams::init(&cfg, &RngStream::new(3, 0)).unwrap();
            let mut s = AdamState::new(&cfg).unwrap();
            adam_step(&mut p, &grads, &mut s, 1e-3, &tcfg);
            adam_step(&mut p, &grads, &mut s, 1e-3, &tcfg);
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_smoke_and_determinism() {
        let cfg = tiny_cfg();
        let g = Grid2D::new(8, 8).unwrap();
        let train_data = vec![sample(g, 20), sample(g, 21)];
        let eval_data = vec![sample(g, 22)];
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let out = train_model(&train_data, &eval_data, &cfg, &tcfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.diverged.is_none());
        let out2 = train_model(&train_data, &eval_data, &cfg, &tcfg).unwrap();
        assert_eq!(out.best_params, out2.best_params);
        assert_eq!(out.history, out2.history);
    }

    #[test]
    fn short_training_reduces_eval_loss() {
        let cfg = tiny_cfg();
        let g = Grid2D::new(8, 8).unwrap();
        // learnable target: a fixed linear functional of the input
        let mk = |seed: u64| {
            let (a, _) = sample(g, seed);
            let mut u = Field::zeros(g, 1).unwrap();
            for p in 0..g.n_points() {
                u.values[p] = 0.8 * a.values[p * 3] + 0.2;
            }
            (a, u)
        };
        let train_data: Vec<_> = (30..46).map(mk).collect();
        let eval_data: Vec<_> = (50..54).map(mk).collect();
        let init = OperatorParams::init(&cfg, &RngStream::new(7, 0).fork(u64::MAX)).unwrap();
        let initial = eval_rel_l2(&eval_data, &init, &cfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let out = train_model(&train_data, &eval_data, &cfg, &tcfg).unwrap();
        assert!(
            out.best_eval < initial,
            "best {} not below initial {}",
            out.best_eval,
            initial
        );
    }
}
