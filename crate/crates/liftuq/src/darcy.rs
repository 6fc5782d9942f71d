//! Synthetic 2D Darcy flow data: thresholded smoothed-Gaussian coefficient
//! fields and a 5-point finite-volume solver for -div(a grad u) = 1 with
//! zero Dirichlet boundary.

use crate::error::{Error, Result};
use crate::tensor_field::{DatasetContainer, Field, Grid2D, RngStream, TensorBlob};
use rayon::prelude::*;

/// Two-level coefficient law: a_high where the smoothed latent Gaussian
/// field exceeds `threshold`, else a_low.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub correlation_length: f64,
    pub a_low: f64,
    pub a_high: f64,
    pub threshold: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        CoefficientConfig {
            correlation_length: 0.08,
            a_low: 3.0,
            a_high: 12.0,
            threshold: 0.0,
        }
    }
}

impl CoefficientConfig {
    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        if !(self.a_low > 0.0 && self.a_high > self.a_low) {
            return Err(Error::Config(format!(
                "coefficient levels must satisfy 0 < a_low < a_high, got {} and {}",
                self.a_low, self.a_high
            )));
        }
        if !(self.correlation_length > 0.0 && self.correlation_length < 1.0) {
            return Err(Error::Config(format!(
                "correlation_length must lie in (0,1), got {}",
                self.correlation_length
            )));
        }
        let h = grid.hx().max(grid.hy());
        if self.correlation_length <= 2.0 * h {
            return Err(Error::Config(format!(
                "correlation_length {} not resolvable on grid spacing {} (need > {})",
                self.correlation_length,
                h,
                2.0 * h
            )));
        }
        Ok(())
    }
}

/// One coefficient/solution pair.
#[derive(Debug, Clone)]
pub struct DarcySample {
    pub a: Field,
    pub u: Field,
}

impl DarcySample {
    pub fn validate(&self) -> Result<()> {
        let g = self.u.grid;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let boundary = ix == 0 || iy == 0 || ix == g.nx - 1 || iy == g.ny - 1;
                let u = self.u.get(ix, iy, 0);
                if boundary && u != 0.0 {
                    return Err(Error::Numerical(format!(
                        "solution not zero on boundary at ({}, {}): {}",
                        ix, iy, u
                    )));
                }
                if u < -1e-10 {
                    return Err(Error::Numerical(format!(
                        "discrete maximum principle violated at ({}, {}): {}",
                        ix, iy, u
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Separable Gaussian smoothing of a lattice field, truncated kernel with
/// boundary renormalization. Keeps the zero-mean sign symmetry of the latent.
fn smooth(latent: &[f64], grid: Grid2D, sigma_x: f64, sigma_y: f64) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, sigma: f64, dst: &mut [f64]| {
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for o in -radius..=radius {
            kernel.push((-0.5 * (o as f64 / sigma).powi(2)).exp());
        }
        for line in 0..count {
            for i in 0..len {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (ki, o) in (-radius..=radius).enumerate() {
                    let j = i as i64 + o;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    let w = kernel[ki];
                    acc += w * src[line_index(line, j as usize, len, stride, count)];
                    wsum += w;
                }
                dst[line_index(line, i, len, stride, count)] = acc / wsum;
            }
        }
    };
    // line_index maps (line, position) to the flat [iy*nx+ix] layout for
    // row passes (stride 1) and column passes (stride nx).
    fn line_index(line: usize, i: usize, _len: usize, stride: usize, _count: usize) -> usize {
        if stride == 1 {
            line * _len + i
        } else {
            i * stride + line
        }
    }
    let mut tmp = vec![0.0; nx * ny];
    let mut out = vec![0.0; nx * ny];
    pass(latent, nx, 1, ny, sigma_x, &mut tmp); // along x
    pass(&tmp, ny, nx, nx, sigma_y, &mut out); // along y
    out
}

/// Draws one two-valued coefficient field; deterministic in (rng, cfg).
pub fn sample_coefficient(rng: &RngStream, grid: Grid2D, cfg: &CoefficientConfig) -> Result<Field> {
    cfg.validate(&grid)?;
    let mut stream = *rng;
    let n = grid.n_points();
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        latent.push(stream.next_gaussian());
    }
    let smoothed = smooth(
        &latent,
        grid,
        cfg.correlation_length / grid.hx(),
        cfg.correlation_length / grid.hy(),
    );
    let values: Vec<f64> = smoothed
        .iter()
        .map(|&z| if z > cfg.threshold { cfg.a_high } else { cfg.a_low })
        .collect();
    Field::from_values(grid, 1, values)
}

#[inline]
fn harmonic(p: f64, q: f64) -> f64 {
    2.0 * p * q / (p + q)
}

/// Applies the 5-point harmonic-mean flux stencil to interior unknowns.
/// `u_int` is indexed over interior points only, row-major.
fn apply_operator(a: &Field, grid: Grid2D, u_int: &[f64], out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let (ihx2, ihy2) = (1.0 / (grid.hx() * grid.hx()), 1.0 / (grid.hy() * grid.hy()));
    let (mx, _my) = (nx - 2, ny - 2);
    let at = |ix: usize, iy: usize| a.values[iy * nx + ix];
    let ui = |ix: usize, iy: usize, u: &[f64]| -> f64 {
        if ix == 0 || iy == 0 || ix == nx - 1 || iy == ny - 1 {
            0.0
        } else {
            u[(iy - 1) * mx + (ix - 1)]
        }
    };
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let ac = at(ix, iy);
            let ae = harmonic(ac, at(ix + 1, iy));
            let aw = harmonic(ac, at(ix - 1, iy));
            let an = harmonic(ac, at(ix, iy + 1));
            let as_ = harmonic(ac, at(ix, iy - 1));
            let uc = u_int[(iy - 1) * mx + (ix - 1)];
            let v = ihx2 * (ae * (uc - ui(ix + 1, iy, u_int)) + aw * (uc - ui(ix - 1, iy, u_int)))
                + ihy2 * (an * (uc - ui(ix, iy + 1, u_int)) + as_ * (uc - ui(ix, iy - 1, u_int)));
            out[(iy - 1) * mx + (ix - 1)] = v;
        }
    }
}

/// Max-norm of the interior stencil residual -div_h(a grad_h u) - 1,
/// relative to the unit forcing.
pub fn stencil_residual_inf(a: &Field, u: &Field, grid: Grid2D) -> f64 {
    let (nx, ny) = (grid.nx, grid.ny);
    let (mx, my) = (nx - 2, ny - 2);
    let mut u_int = vec![0.0; mx * my];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            u_int[(iy - 1) * mx + (ix - 1)] = u.get(ix, iy, 0);
        }
    }
    let mut au = vec![0.0; mx * my];
    apply_operator(a, grid, &u_int, &mut au);
    au.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max)
}

/// Solves -div(a grad u) = 1, zero Dirichlet boundary, to a max-norm
/// relative algebraic residual of `tol` via Jacobi-preconditioned CG.
pub fn solve_darcy(a: &Field, grid: Grid2D, tol: f64) -> Result<Field> {
    if a.channels != 1 {
        return Err(Error::Shape(format!(
            "coefficient field must have 1 channel, got {}",
            a.channels
        )));
    }
    if a.grid != grid {
        return Err(Error::Shape("coefficient grid does not match solve grid".into()));
    }
    if let Some(v) = a.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numerical(format!("non-positive coefficient value {}", v)));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let (mx, my) = (nx - 2, ny - 2);
    let m = mx * my;
    let (ihx2, ihy2) = (1.0 / (grid.hx() * grid.hx()), 1.0 / (grid.hy() * grid.hy()));

    // Jacobi preconditioner: stencil diagonal per interior unknown.
    let mut diag = vec![0.0; m];
    let at = |ix: usize, iy: usize| a.values[iy * nx + ix];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let ac = at(ix, iy);
            diag[(iy - 1) * mx + (ix - 1)] = ihx2
                * (harmonic(ac, at(ix + 1, iy)) + harmonic(ac, at(ix - 1, iy)))
                + ihy2 * (harmonic(ac, at(ix, iy + 1)) + harmonic(ac, at(ix, iy - 1)));
        }
    }

    let b = vec![1.0; m];
    let mut u = vec![0.0; m];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; m];
    let cap = 20 * grid.n_points();
    let mut last_inf = f64::INFINITY;
    for it in 0..cap {
        apply_operator(a, grid, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::SolverDiverged {
                residual: last_inf,
                iterations: it,
            });
        }
        let alpha = rz / pap;
        for i in 0..m {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        last_inf = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if last_inf <= tol {
            // guard against drift of the recursive residual
            let mut au = vec![0.0; m];
            apply_operator(a, grid, &u, &mut au);
            let true_inf = au
                .iter()
                .zip(&b)
                .fold(0.0f64, |acc, (l, r)| acc.max((l - r).abs()));
            if true_inf <= tol {
                let mut field = Field::zeros(grid, 1)?;
                for iy in 1..ny - 1 {
                    for ix in 1..nx - 1 {
                        field.set(ix, iy, 0, u[(iy - 1) * mx + (ix - 1)]);
                    }
                }
                field.validate_finite("solve_darcy")?;
                return Ok(field);
            }
        }
        for i in 0..m {
            z[i] = r[i] / diag[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        residual: last_inf,
        iterations: cap,
    })
}

/// Strided subsampling that keeps boundary nodes.
pub fn downsample(f: &Field, factor: usize) -> Result<Field> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let g = f.grid;
    if (g.nx - 1) % factor != 0 || (g.ny - 1) % factor != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} not divisible by downsample factor {}",
            g.nx, g.ny, factor
        )));
    }
    let out_grid = Grid2D::new((g.nx - 1) / factor + 1, (g.ny - 1) / factor + 1)?;
    let mut out = Field::zeros(out_grid, f.channels)?;
    for iy in 0..out_grid.ny {
        for ix in 0..out_grid.nx {
            for c in 0..f.channels {
                out.set(ix, iy, c, f.get(ix * factor, iy * factor, c));
            }
        }
    }
    Ok(out)
}

const SPLIT_NAMES: [&str; 3] = ["train", "cal", "test"];

fn generate_split(
    root: &RngStream,
    split_idx: u64,
    n_samples: usize,
    grid: Grid2D,
    cfg: &CoefficientConfig,
    tol: f64,
    seed: u64,
) -> Result<DatasetContainer> {
    let split_rng = root.fork(split_idx);
    let samples: Vec<Result<DarcySample>> = (0..n_samples)
        .into_par_iter()
        .map(|m| {
            let rng = split_rng.fork(m as u64);
            let a = sample_coefficient(&rng, grid, cfg)?;
            let u = solve_darcy(&a, grid, tol).map_err(|e| {
                Error::Numerical(format!("sample {} of split {}: {}", m, SPLIT_NAMES[split_idx as usize], e))
            })?;
            let resid = stencil_residual_inf(&a, &u, grid);
            if resid > 10.0 * tol {
                return Err(Error::Numerical(format!(
                    "sample {}: stencil residual {:.3e} exceeds {:.3e}",
                    m,
                    resid,
                    10.0 * tol
                )));
            }
            let sample = DarcySample { a, u };
            sample.validate()?;
            Ok(sample)
        })
        .collect();

    let mut a_data = Vec::with_capacity(n_samples * grid.n_points());
    let mut u_data = Vec::with_capacity(n_samples * grid.n_points());
    for s in samples {
        let s = s?;
        a_data.extend_from_slice(&s.a.values);
        u_data.extend_from_slice(&s.u.values);
    }
    let mut c = DatasetContainer::new();
    c.set_meta("kind", "dataset");
    c.set_meta("split", SPLIT_NAMES[split_idx as usize]);
    c.set_meta("samples", n_samples);
    c.set_meta("nx", grid.nx);
    c.set_meta("ny", grid.ny);
    c.set_meta("channels", 1);
    c.set_meta("seed", seed);
    c.set_meta("solver_tol", tol);
    c.set_meta("coef_correlation_length", cfg.correlation_length);
    c.set_meta("coef_a_low", cfg.a_low);
    c.set_meta("coef_a_high", cfg.a_high);
    c.set_meta("coef_threshold", cfg.threshold);
    c.set_meta("coef_law", "thresholded-smoothed-gaussian");
    let shape = vec![n_samples, grid.ny, grid.nx, 1];
    c.add_tensor("a", TensorBlob::new(shape.clone(), a_data)?)?;
    c.add_tensor("u", TensorBlob::new(shape, u_data)?)?;
    Ok(c)
}

/// Generates disjoint train/calibration/test splits; pure in its arguments.
pub fn generate_dataset(
    seed: u64,
    grid: Grid2D,
    cfg: &CoefficientConfig,
    n_train: usize,
    n_cal: usize,
    n_test: usize,
    tol: f64,
) -> Result<[DatasetContainer; 3]> {
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(Error::Config("all split sizes must be at least 1".into()));
    }
    cfg.validate(&grid)?;
    let root = RngStream::new(seed, 0);
    Ok([
        generate_split(&root, 0, n_train, grid, cfg, tol, seed)?,
        generate_split(&root, 1, n_cal, grid, cfg, tol, seed)?,
        generate_split(&root, 2, n_test, grid, cfg, tol, seed)?,
    ])
}

/// Pulls sample `m` out of a dataset container.
pub fn extract_sample(container: &DatasetContainer, m: usize) -> Result<DarcySample> {
    let nx: usize = container.meta_parsed("nx")?;
    let ny: usize = container.meta_parsed("ny")?;
    let grid = Grid2D::new(nx, ny)?;
    let n = grid.n_points();
    let a = container.tensor("a")?;
    let u = container.tensor("u")?;
    if (m + 1) * n > a.data.len() || (m + 1) * n > u.data.len() {
        return Err(Error::Shape(format!("sample index {} out of range", m)));
    }
    Ok(DarcySample {
        a: Field::from_values(grid, 1, a.data[m * n..(m + 1) * n].to_vec())?,
        u: Field::from_values(grid, 1, u.data[m * n..(m + 1) * n].to_vec())?,
    })
}
