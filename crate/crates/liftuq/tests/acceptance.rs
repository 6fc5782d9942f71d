//! Acceptance suite: one pass/fail line per criterion, all criteria
//! evaluated even when an earlier one fails. Shares one generated dataset
//! and one trained model across criteria; CLI-facing criteria run the real
//! binary.

use liftuq::calibmetrics::{
    aggregate_coverage, band_from_sigma, case_coverage, evaluate_bands, fit_calibration_scale,
    mean_abs_normalization,
};
use liftuq::darcy::{extract_sample, solve_darcy, stencil_residual_inf};
use liftuq::operator_net::{
    input_with_coordinates, lift, load_checkpoint, mode_list, param_census,
    spectral_conv_dft_reference, spectral_forward, spectral_inverse, spectral_mix, Activation,
    OperatorConfig, OperatorParams,
};
use liftuq::tensor_field::{read_dataset, Field, Grid2D, RngStream};
use liftuq::train::{backward_batch, eval_rel_l2, relative_l2_loss, tensors, tensors_mut};
use liftuq::uq::{
    dropout_multipliers, gaussian_multipliers, mc_predict, naive_mcdropout_predict, PerturbSite,
    UqConfig, UqMethod,
};
use once_cell::sync::Lazy;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_liftuq");

const FULL_CONFIG: &str = "schema_version = 1\n\n[train]\nepochs = 300\nearly_stop_rel_l2 = 0.14\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    train_secs: f64,
}

fn run_bin(args: &[&str], envs: &[(&str, &str)]) -> (bool, String, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn assert_run(args: &[&str]) -> (String, String) {
    let (ok, stdout, stderr) = run_bin(args, &[]);
    assert!(ok, "command {:?} failed:\n{}\n{}", args, stdout, stderr);
    (stdout, stderr)
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    std::fs::write(root.join("full.toml"), FULL_CONFIG).unwrap();
    let data = root.join("data");
    assert_run(&[
        "gen-data",
        "--config",
        root.join("full.toml").to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    let t0 = Instant::now();
    assert_run(&[
        "train",
        "--config",
        root.join("full.toml").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        root.join("model").to_str().unwrap(),
    ]);
    let train_secs = t0.elapsed().as_secs_f64();
    Fixture {
        checkpoint: root.join("model").join("checkpoint"),
        root,
        data,
        _dir: dir,
        train_secs,
    }
});

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

fn random_pair(grid: Grid2D, seed: u64) -> (Field, Field) {
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

fn load_split(data: &Path, name: &str) -> Vec<(Field, Field)> {
    let c = read_dataset(&data.join(name)).unwrap();
    let n: usize = c.meta_parsed("samples").unwrap();
    (0..n)
        .map(|m| {
            let s = extract_sample(&c, m).unwrap();
            (input_with_coordinates(&s.a).unwrap(), s.u)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

/// 1. Analytic gradients vs central finite differences, every tensor.
fn criterion_1() -> Result<String, String> {
    let t0 = Instant::now();
    let cfg = tiny_cfg();
    let g = Grid2D::new(8, 8).unwrap();
    let batch = vec![random_pair(g, 101), random_pair(g, 102)];
    let params = OperatorParams::init(&cfg, &RngStream::new(103, 0)).unwrap();
    let (_, grads) = backward_batch(&batch, &params, &cfg, &[]).map_err(|e| e.to_string())?;
    let loss_at = |p: &OperatorParams| backward_batch(&batch, p, &cfg, &[]).unwrap().0;
    let step = 1e-6;
    let mut worst = 0.0f64;
    let n_tensors = tensors(&grads).len();
    for ti in 0..n_tensors {
        for i in 0..tensors(&grads)[ti].len() {
            let mut plus = params.clone();
            tensors_mut(&mut plus)[ti][i] += step;
            let mut minus = params.clone();
            tensors_mut(&mut minus)[ti][i] -= step;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let an = tensors(&grads)[ti][i];
            let denom = an.abs().max(fd.abs());
            if denom < 1e-7 {
                // below finite-difference resolution (roundoff ~1e-10)
                if (fd - an).abs() > 1e-9 {
                    return Err(format!("tensor {} index {}: {} vs {}", ti, i, an, fd));
                }
                continue;
            }
            let rel = (fd - an).abs() / denom;
            worst = worst.max(rel);
            if rel > 1e-5 {
                return Err(format!(
                    "tensor {} index {}: analytic {} fd {} rel {}",
                    ti, i, an, fd, rel
                ));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Err(format!("took {:.1}s (budget 30s)", secs));
    }
    Ok(format!("worst rel err {:.2e}, {:.1}s", worst, secs))
}

/// 2. Truncated spectral convolution vs dense DFT-matrix reference.
fn criterion_2() -> Result<String, String> {
    let t0 = Instant::now();
    let g = Grid2D::new(8, 8).unwrap();
    let d_v = 4;
    let k_max = 2;
    let modes = mode_list(k_max);
    let mut rng = RngStream::new(7, 0);
    let field: Vec<f64> = (0..g.n_points() * d_v).map(|_| rng.next_gaussian()).collect();
    let spectral: Vec<f64> = (0..modes.len() * d_v * d_v * 2)
        .map(|_| rng.next_gaussian() * 0.3)
        .collect();
    let coeffs = spectral_forward(&field, g, d_v, &modes);
    let mixed = spectral_mix(&spectral, &coeffs, d_v, modes.len());
    let fast = spectral_inverse(&mixed, g, d_v, &modes);
    let reference = spectral_conv_dft_reference(&field, g, d_v, &spectral, k_max);
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = fast
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / norm;
    let secs = t0.elapsed().as_secs_f64();
    if err > 1e-12 {
        return Err(format!("relative error {:.2e} > 1e-12", err));
    }
    if secs >= 5.0 {
        return Err(format!("took {:.1}s (budget 5s)", secs));
    }
    Ok(format!("relative error {:.2e}, {:.2}s", err, secs))
}

/// 3. Darcy solver vs double-sine series; stencil residuals of every
/// generated sample.
fn criterion_3() -> Result<String, String> {
    let t0 = Instant::now();
    // independent oracle: u(1/2,1/2) for -lap u = 1, computed to <= 1e-6
    let pi = std::f64::consts::PI;
    let mut oracle = 0.0;
    for m in (1..4000).step_by(2) {
        for n in (1..4000).step_by(2) {
            let (mf, nf) = (m as f64, n as f64);
            oracle += 16.0 / (pi.powi(4) * mf * nf * (mf * mf + nf * nf))
                * (mf * pi * 0.5).sin()
                * (nf * pi * 0.5).sin();
        }
    }
    let g = Grid2D::new(65, 65).unwrap();
    let a = Field::from_values(g, 1, vec![1.0; g.n_points()]).unwrap();
    let u = solve_darcy(&a, g, 1e-10).map_err(|e| e.to_string())?;
    let center = u.get(32, 32, 0);
    if (center - oracle).abs() > 2e-3 {
        return Err(format!("center {} vs oracle {}", center, oracle));
    }
    let oracle_secs = t0.elapsed().as_secs_f64();
    if oracle_secs >= 60.0 {
        return Err(format!("oracle check took {:.1}s (budget 60s)", oracle_secs));
    }
    // every stored sample satisfies the interior stencil residual bound
    let fx = &*FIXTURE;
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for split in ["train", "cal", "test"] {
        let c = read_dataset(&fx.data.join(split)).unwrap();
        let n: usize = c.meta_parsed("samples").unwrap();
        for m in 0..n {
            let s = extract_sample(&c, m).unwrap();
            worst = worst.max(stencil_residual_inf(&s.a, &s.u, s.u.grid));
            total += 1;
        }
    }
    if worst > 1e-9 {
        return Err(format!("worst stencil residual {:.2e} > 1e-9", worst));
    }
    Ok(format!(
        "center err {:.2e}, worst residual {:.2e} over {} samples",
        (center - oracle).abs(),
        worst,
        total
    ))
}

/// 4. Default desk training reaches held-out rel L2 <= 0.15 in <= 10 min.
fn criterion_4() -> Result<String, String> {
    let fx = &*FIXTURE;
    let (params, op) = load_checkpoint(&fx.checkpoint).map_err(|e| e.to_string())?;
    let cal = load_split(&fx.data, "cal");
    let rel = eval_rel_l2(&cal, &params, &op).map_err(|e| e.to_string())?;
    if rel > 0.15 {
        return Err(format!("held-out rel L2 {:.4} > 0.15", rel));
    }
    if fx.train_secs >= 600.0 {
        return Err(format!("training took {:.0}s (budget 600s)", fx.train_secs));
    }
    Ok(format!("held-out rel L2 {:.4}, {:.0}s", rel, fx.train_secs))
}

/// 5. Perturbation moments of Methods A and B at p = 0.3, T = 1e5.
fn criterion_5() -> Result<String, String> {
    let t0 = Instant::now();
    let p = 0.3;
    let t_samples = 100_000usize;
    let cfg = tiny_cfg();
    let g = Grid2D::new(8, 8).unwrap();
    let params = OperatorParams::init(&cfg, &RngStream::new(55, 0)).unwrap();
    let (a, _) = random_pair(g, 56);
    let v0 = lift(&a, &params, &cfg).unwrap();
    let var_theory = p / (1.0 - p);
    let mut worst_z = 0.0f64;
    let mut worst_var = 0.0f64;
    for method in [UqMethod::LiftDropout, UqMethod::LiftGaussian] {
        // channel-wise multipliers: per-channel sample moments across draws
        let base = RngStream::new(57, 0);
        let mut sum = vec![0.0; cfg.d_v];
        let mut sumsq = vec![0.0; cfg.d_v];
        for t in 0..t_samples {
            let mut rng = base.fork(t as u64);
            let xi = match method {
                UqMethod::LiftDropout => dropout_multipliers(&mut rng, cfg.d_v, p),
                _ => gaussian_multipliers(&mut rng, cfg.d_v, p),
            };
            for k in 0..cfg.d_v {
                sum[k] += xi[k];
                sumsq[k] += xi[k] * xi[k];
            }
        }
        let tf = t_samples as f64;
        for k in 0..cfg.d_v {
            let mean_xi = sum[k] / tf;
            let var_xi = sumsq[k] / tf - mean_xi * mean_xi;
            // feature entries are V0 * xi, so entrywise moments follow by
            // scaling; verify against the strictest entry (any V0 != 0)
            let se = (var_theory / tf).sqrt();
            let z = (mean_xi - 1.0).abs() / se;
            worst_z = worst_z.max(z);
            if z > 3.0 {
                return Err(format!(
                    "{:?} channel {}: mean off by {:.2} standard errors",
                    method, k, z
                ));
            }
            let rel = (var_xi - var_theory).abs() / var_theory;
            worst_var = worst_var.max(rel);
            if rel > 0.05 {
                return Err(format!(
                    "{:?} channel {}: variance rel err {:.3} > 5%",
                    method, k, rel
                ));
            }
        }
        // entrywise check on the actual feature field for one draw set:
        // mean field must equal V0 scaled by the channel means
        for (i, v) in v0.values.iter().enumerate() {
            let k = i % cfg.d_v;
            let mean_feat = v * (sum[k] / tf);
            let expect = v;
            let se_feat = v.abs() * (var_theory / tf).sqrt();
            if (mean_feat - expect).abs() > 3.0 * se_feat + 1e-300 {
                return Err(format!("feature entry {} mean outside 3 SE", i));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {:.1}s (budget 60s)", secs));
    }
    Ok(format!(
        "worst |z| {:.2}, worst var rel err {:.3}, {:.1}s",
        worst_z, worst_var, secs
    ))
}

fn dir_bytes(path: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(path)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

fn tree_bytes(path: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let e = e.unwrap();
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(path).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// 6. Remark identity end-to-end through cmd_uq at p = 0.5.
fn criterion_6() -> Result<String, String> {
    let fx = &*FIXTURE;
    let masked = fx.root.join("uq_masked_half");
    let scaled = fx.root.join("uq_scaled_half");
    let config = fx.root.join("full.toml");
    for (out, extra) in [(&masked, None), (&scaled, Some("--scaled-lift"))] {
        let mut args = vec![
            "uq",
            "--config",
            config.to_str().unwrap(),
            "--data",
            fx.data.to_str().unwrap(),
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--p",
            "0.5",
        ];
        if let Some(f) = extra {
            args.push(f);
        }
        let (ok, _, stderr) = run_bin(&args, &[]);
        if !ok {
            return Err(format!("cmd_uq failed: {}", stderr));
        }
    }
    let a = tree_bytes(&masked);
    let b = tree_bytes(&scaled);
    if a != b {
        let diff: Vec<&String> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| &x.0)
            .collect();
        return Err(format!("outputs differ in {:?}", diff));
    }
    Ok(format!("{} files byte-identical", a.len()))
}

/// 7. Metric formulas vs hand-enumeration oracles; recomposition identity.
fn criterion_7() -> Result<String, String> {
    let g = Grid2D::new(3, 3).unwrap();
    // quantile {1,2,3,4}: only four pooled points (sigma elsewhere 0, r 0)
    let mut rv = vec![0.0; 9];
    rv[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let mut sv = vec![0.0; 9];
    sv[..4].iter_mut().for_each(|v| *v = 1.0);
    let r = Field::from_values(g, 1, rv).unwrap();
    let s = Field::from_values(g, 1, sv).unwrap();
    let k75 = fit_calibration_scale(&[r.clone()], &[s.clone()], 0.75)
        .map_err(|e| e.to_string())?
        .k;
    let k100 = fit_calibration_scale(&[r], &[s], 1.0).map_err(|e| e.to_string())?.k;
    if k75 != 3.0 || k100 != 4.0 {
        return Err(format!("quantiles k75={} k100={} (want 3, 4)", k75, k100));
    }
    // Eq. 4 hand enumeration: |r| = (.1,.2,.3,.4), band = (.15,.15,.35,.35)
    let live = [(0.1, 0.15), (0.2, 0.15), (0.3, 0.35), (0.4, 0.35)];
    let mut rv = vec![0.0; 9];
    let mut bv = vec![1.0; 9];
    for (i, (ri, bi)) in live.iter().enumerate() {
        rv[i] = *ri;
        bv[i] = *bi;
    }
    let cr = case_coverage(
        &Field::from_values(g, 1, rv).unwrap(),
        &Field::from_values(g, 1, bv).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    // 2 of 4 live points + 5 padded covered points = 7/9
    if (cr - 7.0 / 9.0).abs() > 1e-15 {
        return Err(format!("Eq.4 enumeration coverage {} != 7/9", cr));
    }
    // Eqs. 5-6
    let (avg, total) = aggregate_coverage(&[1.0, 0.0], &[1, 3]).map_err(|e| e.to_string())?;
    if avg != 0.5 || total != 0.25 {
        return Err(format!("aggregate ({}, {}) != (0.5, 0.25)", avg, total));
    }
    // Eq. 7 recomposition on random data
    let mut rng = RngStream::new(77, 0);
    let g5 = Grid2D::new(5, 5).unwrap();
    let residuals: Vec<Field> = (0..4)
        .map(|_| {
            Field::from_values(g5, 1, (0..25).map(|_| rng.next_gaussian()).collect()).unwrap()
        })
        .collect();
    let bands: Vec<Field> = (0..4)
        .map(|_| {
            Field::from_values(g5, 1, (0..25).map(|_| rng.next_f64() * 2.0).collect()).unwrap()
        })
        .collect();
    let rep = evaluate_bands(&residuals, &bands, 1.3).map_err(|e| e.to_string())?;
    let bw = rep.bandwidth;
    let (c, m) = (bw.bw_covered.unwrap(), bw.bw_missed.unwrap());
    let recomposed =
        (bw.n_covered as f64 * c + bw.n_missed as f64 * m) / (bw.n_covered + bw.n_missed) as f64;
    let rel = (recomposed - bw.bw_all).abs() / bw.bw_all.abs();
    if rel > 1e-12 {
        return Err(format!("recomposition rel err {:.2e}", rel));
    }
    Ok(format!("oracles exact; recomposition rel err {:.2e}", rel))
}

fn parse_metrics_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.to_string()).collect())
        .collect()
}

/// 8. End-to-end calibration: Method A default reaches test Total C.R. in
/// [0.93, 1.0] within 2 minutes of UQ runtime.
fn criterion_8() -> Result<String, String> {
    let fx = &*FIXTURE;
    let out = fx.root.join("uq_default");
    let t0 = Instant::now();
    let (ok, _, stderr) = run_bin(
        &[
            "uq",
            "--config",
            fx.root.join("full.toml").to_str().unwrap(),
            "--data",
            fx.data.to_str().unwrap(),
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    let secs = t0.elapsed().as_secs_f64();
    if !ok {
        return Err(format!("cmd_uq failed: {}", stderr));
    }
    let rows = parse_metrics_csv(&out.join("metrics.csv"));
    let total_cr: f64 = rows[0][7].parse().unwrap();
    if !(0.93..=1.0).contains(&total_cr) {
        return Err(format!("total_cr {} outside [0.93, 1.0]", total_cr));
    }
    if secs >= 120.0 {
        return Err(format!("took {:.0}s (budget 120s)", secs));
    }
    Ok(format!("total_cr {:.4}, {:.0}s", total_cr, secs))
}

struct OrderingOutcome {
    a_holds: bool,
    b_holds: bool,
    detail: String,
}

/// Evaluates orderings (a) and (b) of criterion 9 for one trained model;
/// all estimators (Method A and the naive baseline included) run against
/// the same default checkpoint.
fn orderings_for(checkpoint: &Path, data: &Path) -> Result<OrderingOutcome, String> {
    let (params, op) = load_checkpoint(checkpoint).map_err(|e| e.to_string())?;
    let cal = load_split(data, "cal");
    let test = load_split(data, "test");
    let norm =
        mean_abs_normalization(&cal.iter().map(|(_, u)| u.clone()).collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
    let target = 0.95;

    let eval_method = |params: &OperatorParams,
                       op: &OperatorConfig,
                       method: UqMethod,
                       site: PerturbSite|
     -> Result<(f64, f64, f64), String> {
        let base_uq = UqConfig {
            method,
            site,
            p: 0.3,
            t_samples: 20,
            seed: 99,
            case_stream: 0,
        };
        // per-case stream ranges mirror cmd_uq (cal from 0, test from 2^32)
        let run = |data: &[(Field, Field)],
                   stream_base: u64|
         -> Result<(Vec<Field>, Vec<Field>, f64), String> {
            let mut sigmas = Vec::new();
            let mut residuals = Vec::new();
            let mut mean_rel = 0.0;
            for (case, (input, truth)) in data.iter().enumerate() {
                let uq = UqConfig {
                    case_stream: stream_base + case as u64,
                    ..base_uq
                };
                let pred = match method {
                    UqMethod::NaiveDropout => naive_mcdropout_predict(input, params, op, &uq),
                    _ => mc_predict(input, params, op, &uq),
                }
                .map_err(|e| e.to_string())?;
                mean_rel += relative_l2_loss(&pred.mean, truth).map_err(|e| e.to_string())?;
                let mut r = pred.mean.clone();
                for (rv, tv) in r.values.iter_mut().zip(&truth.values) {
                    *rv -= tv;
                }
                sigmas.push(pred.sigma);
                residuals.push(r);
            }
            Ok((sigmas, residuals, mean_rel / data.len() as f64))
        };
        let (cal_sigmas, cal_residuals, _) = run(&cal, 0)?;
        let fit = fit_calibration_scale(&cal_residuals, &cal_sigmas, target)
            .map_err(|e| e.to_string())?;
        let (test_sigmas, test_residuals, test_mean_rel) = run(&test, 1 << 32)?;
        let bands: Vec<Field> = test_sigmas
            .iter()
            .map(|s| band_from_sigma(s, fit.k).unwrap())
            .collect();
        let rep = evaluate_bands(&test_residuals, &bands, norm).map_err(|e| e.to_string())?;
        Ok((rep.total_cr, rep.bandwidth.bw_all, test_mean_rel))
    };

    let (cov_a, bw_a, rel_lift) = eval_method(&params, &op, UqMethod::LiftDropout, PerturbSite::Lift)?;
    let (cov_n, bw_n, _) =
        eval_method(&params, &op, UqMethod::NaiveDropout, PerturbSite::Lift)?;
    let (_, _, rel_prop) =
        eval_method(&params, &op, UqMethod::LiftDropout, PerturbSite::Propagate)?;
    let rel_det = eval_rel_l2(&test, &params, &op).map_err(|e| e.to_string())?;
    let a_holds = cov_a >= cov_n && bw_a <= 1.1 * bw_n;
    // degradation = MC-mean rel L2 increase over the deterministic forward
    let b_holds = (rel_prop - rel_det) >= (rel_lift - rel_det);
    Ok(OrderingOutcome {
        a_holds,
        b_holds,
        detail: format!(
            "A cov {:.4} bw {:.3} vs naive cov {:.4} bw {:.3}; mean rel L2 det {:.4} lift {:.4} propagate {:.4}",
            cov_a, bw_a, cov_n, bw_n, rel_det, rel_lift, rel_prop
        ),
    })
}

/// 9. Qualitative paper orderings, with the 2-of-3-seeds fallback.
fn criterion_9() -> Result<String, String> {
    let fx = &*FIXTURE;
    let first = orderings_for(&fx.checkpoint, &fx.data)?;

    // (c) degenerate regimes must be flagged and deteriorate, via cmd_sweep
    let sweep_cfg = fx.root.join("sweep.toml");
    std::fs::write(
        &sweep_cfg,
        "schema_version = 1\n[sweep]\nmethods = [\"lift-dropout\"]\nsites = [\"lift\"]\np_values = [0.3, 0.95]\nt_values = [5, 20]\n",
    )
    .unwrap();
    let sweep_out = fx.root.join("sweep_degenerate");
    let (ok, _, stderr) = run_bin(
        &[
            "sweep",
            "--config",
            sweep_cfg.to_str().unwrap(),
            "--data",
            fx.data.to_str().unwrap(),
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--out",
            sweep_out.to_str().unwrap(),
        ],
        &[],
    );
    if !ok {
        return Err(format!("cmd_sweep failed: {}", stderr));
    }
    if !stderr.contains("degenerate") {
        return Err("degenerate regimes were not flagged".into());
    }
    let rows = parse_metrics_csv(&sweep_out.join("sweep.csv"));
    let cell = |p: &str, t: &str| -> Option<(f64, f64)> {
        rows.iter()
            .find(|r| r[2] == p && r[3] == t)
            .map(|r| (r[7].parse().unwrap(), r[8].parse().unwrap()))
    };
    let (ref_cov, ref_bw) = cell("0.3", "20").ok_or("missing reference cell")?;
    let mut c_holds = true;
    for (p, t) in [("0.95", "20"), ("0.3", "5")] {
        let (cov, bw) = cell(p, t).ok_or("missing degenerate cell")?;
        if !(cov < ref_cov || bw > ref_bw) {
            c_holds = false;
        }
    }
    if !c_holds {
        return Err(format!(
            "degenerate cells show no deterioration vs reference (cov {:.4}, bw {:.3})",
            ref_cov, ref_bw
        ));
    }

    if first.a_holds && first.b_holds {
        return Ok(format!("(a),(b),(c) hold on primary seed; {}", first.detail));
    }

    // fallback: train two more seeds, require 2-of-3 for the failed ordering
    let mut a_votes = first.a_holds as u32;
    let mut b_votes = first.b_holds as u32;
    let mut details = vec![format!("seed 0: {}", first.detail)];
    for extra in 1..=2u64 {
        let model = fx.root.join(format!("model_seed{}", extra));
        let (ok, _, stderr) = run_bin(
            &[
                "train",
                "--config",
                fx.root.join("full.toml").to_str().unwrap(),
                "--data",
                fx.data.to_str().unwrap(),
                "--seed",
                &(7 + extra).to_string(),
                "--out",
                model.to_str().unwrap(),
            ],
            &[],
        );
        if !ok {
            return Err(format!("fallback training failed: {}", stderr));
        }
        let o = orderings_for(&model.join("checkpoint"), &fx.data)?;
        a_votes += o.a_holds as u32;
        b_votes += o.b_holds as u32;
        details.push(format!("seed {}: {}", extra, o.detail));
    }
    if a_votes >= 2 && b_votes >= 2 {
        Ok(format!(
            "(a) {}/3 seeds, (b) {}/3 seeds, (c) holds; {}",
            a_votes,
            b_votes,
            details.join(" | ")
        ))
    } else {
        Err(format!(
            "(a) {}/3, (b) {}/3 seeds; {}",
            a_votes,
            b_votes,
            details.join(" | ")
        ))
    }
}

/// 10. Byte-identical reruns; worker-count-independent metrics.
fn criterion_10() -> Result<String, String> {
    let fx = &*FIXTURE;
    // dataset regeneration
    let data2 = fx.root.join("data_rerun");
    assert_run(&[
        "gen-data",
        "--config",
        fx.root.join("full.toml").to_str().unwrap(),
        "--out",
        data2.to_str().unwrap(),
    ]);
    for split in ["train", "cal", "test"] {
        if dir_bytes(&fx.data.join(split)) != dir_bytes(&data2.join(split)) {
            return Err(format!("regenerated split '{}' differs", split));
        }
    }
    // uq rerun in serial mode, byte-identical
    let mk = |out: &Path, workers: &str| {
        run_bin(
            &[
                "uq",
                "--config",
                fx.root.join("full.toml").to_str().unwrap(),
                "--data",
                fx.data.to_str().unwrap(),
                "--checkpoint",
                fx.checkpoint.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            &[("LIFTUQ_WORKERS", workers)],
        )
    };
    let s1 = fx.root.join("uq_serial_1");
    let s2 = fx.root.join("uq_serial_2");
    let par = fx.root.join("uq_parallel");
    for (out, w) in [(&s1, "1"), (&s2, "1"), (&par, "4")] {
        let (ok, _, stderr) = mk(out, w);
        if !ok {
            return Err(format!("cmd_uq failed: {}", stderr));
        }
    }
    if tree_bytes(&s1) != tree_bytes(&s2) {
        return Err("serial reruns differ".into());
    }
    let m1 = std::fs::read(s1.join("metrics.csv")).unwrap();
    let mp = std::fs::read(par.join("metrics.csv")).unwrap();
    if m1 != mp {
        return Err("parallel metrics differ from serial".into());
    }
    // the full prediction tensors also match across worker counts
    if tree_bytes(&s1) != tree_bytes(&par) {
        return Err("parallel outputs differ from serial".into());
    }
    Ok("reruns byte-identical; metrics worker-independent".into())
}

/// 11. Lifting parameter census: exactly 128 parameters, < 1% of total.
fn criterion_11() -> Result<String, String> {
    let cfg = OperatorConfig {
        d_a: 3,
        d_v: 32,
        d_u: 1,
        layers: 4,
        k_max: 8,
        activation: Activation::Gelu,
    };
    let params = OperatorParams::init(&cfg, &RngStream::new(1, 0)).unwrap();
    let census = param_census(&params);
    if census.lifting != 128 {
        return Err(format!("lifting census {} != 128", census.lifting));
    }
    let fraction = census.lifting as f64 / census.total() as f64;
    if fraction >= 0.01 {
        return Err(format!("lifting fraction {:.4} not < 1%", fraction));
    }
    // census partitions the parameter count
    let sum = census.lifting + census.propagation + census.recovery;
    if sum != census.total() {
        return Err("census does not partition the total".into());
    }
    Ok(format!(
        "lifting 128 of {} ({:.4}%)",
        census.total(),
        fraction * 100.0
    ))
}

#[test]
fn acceptance() {
    // checkpoint container must exist before dependent criteria read it
    Lazy::force(&FIXTURE);
    let criteria: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("1 gradient correctness", criterion_1),
        ("2 spectral-layer oracle", criterion_2),
        ("3 darcy solver", criterion_3),
        ("4 training", criterion_4),
        ("5 perturbation moments", criterion_5),
        ("6 remark identity", criterion_6),
        ("7 metric formulas", criterion_7),
        ("8 calibration", criterion_8),
        ("9 qualitative orderings", criterion_9),
        ("10 determinism", criterion_10),
        ("11 parameter census", criterion_11),
    ];
    // the harness captures println! from passing tests, so echo each
    // verdict straight to the terminal as well
    let mut tty = std::fs::OpenOptions::new().append(true).open("/dev/stderr").ok();
    let mut report = |line: String| {
        println!("{}", line);
        if let Some(f) = tty.as_mut() {
            use std::io::Write;
            let _ = writeln!(f, "{}", line);
        }
    };
    let mut failures = 0;
    for (name, f) in criteria {
        match f() {
            Ok(info) => report(format!("criterion {}: PASS — {}", name, info)),
            Err(why) => {
                report(format!("criterion {}: FAIL — {}", name, why));
                failures += 1;
            }
        }
    }
    assert_eq!(failures, 0, "{} acceptance criteria failed", failures);
}
