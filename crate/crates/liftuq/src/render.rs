//! Deterministic heatmap rendering: binary PPM (P6), one pixel per grid
//! node, piecewise-linear blue -> white -> red colormap.

use crate::error::{Error, Result};
use crate::tensor_field::Field;
use std::io::Write;
use std::path::Path;

/// Explicit or data-driven color range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorRange {
    Auto,
    Explicit { min: f64, max: f64 },
}

impl ColorRange {
    pub fn validate(&self) -> Result<()> {
        if let ColorRange::Explicit { min, max } = self {
            if !(min < max) {
                return Err(Error::Config(format!(
                    "color range min {} must be below max {}",
                    min, max
                )));
            }
        }
        Ok(())
    }
}

/// Resolves the range for one channel; a constant field widens to ±1
/// around its value so the render stays defined.
pub fn resolve_range(values: &[f64], range: ColorRange) -> Result<(f64, f64)> {
    range.validate()?;
    match range {
        ColorRange::Explicit { min, max } => Ok((min, max)),
        ColorRange::Auto => {
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min == max {
                Ok((min - 1.0, max + 1.0))
            } else {
                Ok((min, max))
            }
        }
    }
}

/// Piecewise-linear ramp blue(0,0,255) -> white(255,255,255) -> red(255,0,0)
/// over t in [0,1]; t is clamped.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t <= 0.5 {
        let s = t * 2.0;
        [lerp(0.0, 255.0, s), lerp(0.0, 255.0, s), 255]
    } else {
        let s = (t - 0.5) * 2.0;
        [255, lerp(255.0, 0.0, s), lerp(255.0, 0.0, s)]
    }
}

/// Renders one channel of a field to PPM bytes. Row 0 of the image is the
/// top of the domain (largest y), matching the usual image convention.
pub fn render_ppm(field: &Field, channel: usize, range: ColorRange) -> Result<Vec<u8>> {
    if channel >= field.channels {
        return Err(Error::Config(format!(
            "channel {} out of range ({} available)",
            channel, field.channels
        )));
    }
    let g = field.grid;
    let mut channel_vals = Vec::with_capacity(g.n_points());
    let mut nan_indices = Vec::new();
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let v = field.get(ix, iy, channel);
            if !v.is_finite() {
                nan_indices.push((ix, iy));
            }
            channel_vals.push(v);
        }
    }
    if !nan_indices.is_empty() {
        let listed: Vec<String> = nan_indices
            .iter()
            .take(16)
            .map(|(x, y)| format!("({},{})", x, y))
            .collect();
        return Err(Error::NonFinite(format!(
            "field has {} non-finite values at indices {}{}",
            nan_indices.len(),
            listed.join(" "),
            if nan_indices.len() > 16 { " ..." } else { "" }
        )));
    }
    let (min, max) = resolve_range(&channel_vals, range)?;
    let span = max - min;
    let mut out = Vec::with_capacity(15 + 3 * g.n_points());
    out.extend_from_slice(format!("P6\n{} {}\n255\n", g.nx, g.ny).as_bytes());
    for iy in (0..g.ny).rev() {
        for ix in 0..g.nx {
            let t = (field.get(ix, iy, channel) - min) / span;
            out.extend_from_slice(&colormap(t));
        }
    }
    Ok(out)
}

pub fn write_ppm(field: &Field, channel: usize, range: ColorRange, path: &Path) -> Result<()> {
    let bytes = render_ppm(field, channel, range)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_field::Grid2D;

    #[test]
    fn colormap_endpoints_and_midpoint() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [255, 255, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        // clamped outside [0,1]
        assert_eq!(colormap(-3.0), [0, 0, 255]);
        assert_eq!(colormap(7.0), [255, 0, 0]);
    }

    #[test]
    fn constant_field_auto_range_renders_uniform_white() {
        let g = Grid2D::new(4, 4).unwrap();
        let f = Field::from_values(g, 1, vec![2.5; 16]).unwrap();
        let bytes = render_ppm(&f, 0, ColorRange::Auto).unwrap();
        let header = b"P6\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // (2.5 - 1.5)/2 = 0.5 -> white everywhere
        assert!(bytes[header.len()..].iter().all(|&b| b == 255));
    }

    #[test]
    fn binary_field_renders_pure_blue_and_red() {
        let g = Grid2D::new(3, 3).unwrap();
        let mut f = Field::zeros(g, 1).unwrap();
        f.set(1, 1, 0, 1.0);
        let bytes = render_ppm(&f, 0, ColorRange::Explicit { min: 0.0, max: 1.0 }).unwrap();
        let pix = &bytes[b"P6\n3 3\n255\n".len()..];
        // image row 1 (grid iy=1), column 1 is the red pixel
        let center = &pix[(1 * 3 + 1) * 3..(1 * 3 + 1) * 3 + 3];
        assert_eq!(center, [255, 0, 0]);
        assert_eq!(&pix[..3], [0, 0, 255]);
    }

    #[test]
    fn render_is_byte_deterministic() {
        let g = Grid2D::new(5, 5).unwrap();
        let mut rng = crate::tensor_field::RngStream::new(4, 0);
        let f = Field::from_values(g, 1, (0..25).map(|_| rng.next_gaussian()).collect()).unwrap();
        let a = render_ppm(&f, 0, ColorRange::Auto).unwrap();
        let b = render_ppm(&f, 0, ColorRange::Auto).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_is_an_error_listing_indices() {
        let g = Grid2D::new(3, 3).unwrap();
        let mut f = Field::zeros(g, 1).unwrap();
        f.set(2, 1, 0, f64::NAN);
        let err = render_ppm(&f, 0, ColorRange::Auto).unwrap_err();
        assert!(err.to_string().contains("(2,1)"), "{}", err);
    }

    #[test]
    fn invalid_range_rejected() {
        let g = Grid2D::new(3, 3).unwrap();
        let f = Field::zeros(g, 1).unwrap();
        assert!(render_ppm(&f, 0, ColorRange::Explicit { min: 1.0, max: 1.0 }).is_err());
        assert!(render_ppm(&f, 1, ColorRange::Auto).is_err());
    }
}
