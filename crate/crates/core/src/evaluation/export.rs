//! Figure-ready exports: log-density lattices as CSV and SVG heatmaps.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array2, ArrayView2};

use super::ode::{ode_nll, OdeOptions};
use crate::error::{Error, Result};
use crate::model::Model;

/// Regular `nx x ny` lattice over a rectangle; points are cell centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    pub fn square(half_width: f64, n: usize) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || !(self.x_max > self.x_min) || !(self.y_max > self.y_min)
        {
            return Err(Error::config(
                "lattice needs positive counts and non-empty ranges",
            ));
        }
        Ok(())
    }

    /// Points in row-major order: `y` outer, `x` inner.
    pub fn points(&self) -> Array2<f64> {
        let dx = (self.x_max - self.x_min) / self.nx as f64;
        let dy = (self.y_max - self.y_min) / self.ny as f64;
        Array2::from_shape_fn((self.nx * self.ny, 2), |(r, c)| {
            let (j, i) = (r / self.nx, r % self.nx);
            if c == 0 {
                self.x_min + (i as f64 + 0.5) * dx
            } else {
                self.y_min + (j as f64 + 0.5) * dy
            }
        })
    }
}

/// `(x, y, log_density)` at each lattice point.
pub fn density_grid(model: &Model, lattice: &Lattice, opts: &OdeOptions) -> Result<Vec<[f64; 3]>> {
    lattice.validate()?;
    if model.dim() != 2 {
        return Err(Error::config("density lattices need a 2-D model"));
    }
    let pts = lattice.points();
    let rep = ode_nll(pts.view(), model, opts)?;
    Ok(pts
        .rows()
        .into_iter()
        .zip(rep.nats)
        .map(|(p, nll)| [p[0], p[1], -nll])
        .collect())
}

pub fn write_density_csv(rows: &[[f64; 3]], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "x,y,log_density")?;
    for r in rows {
        writeln!(w, "{},{},{}", r[0], r[1], r[2])?;
    }
    Ok(())
}

fn ramp(v: f64) -> (u8, u8, u8) {
    // dark blue -> teal -> yellow
    let stops = [
        (0.0, (13.0, 8.0, 135.0)),
        (0.5, (33.0, 145.0, 140.0)),
        (1.0, (253.0, 231.0, 37.0)),
    ];
    let v = v.clamp(0.0, 1.0);
    let k = if v <= 0.5 { 0 } else { 1 };
    let (a, ca) = stops[k];
    let (b, cb) = stops[k + 1];
    let w = (v - a) / (b - a);
    let mix = |x: f64, y: f64| (x + (y - x) * w).round() as u8;
    (mix(ca.0, cb.0), mix(ca.1, cb.1), mix(ca.2, cb.2))
}

/// Heatmap of `exp(log_density)` over the lattice with optional scatter overlay.
pub fn heatmap_svg(
    rows: &[[f64; 3]],
    lattice: &Lattice,
    samples: Option<ArrayView2<'_, f64>>,
) -> String {
    let px = 4.0;
    let width = lattice.nx as f64 * px;
    let height = lattice.ny as f64 * px;
    let max_log = rows.iter().map(|r| r[2]).fold(f64::NEG_INFINITY, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (r, row) in rows.iter().enumerate() {
        let (i, j) = (r % lattice.nx, r / lattice.nx);
        let v = if max_log.is_finite() {
            (row[2] - max_log).exp()
        } else {
            0.0
        };
        let (cr, cg, cb) = ramp(v);
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{px}" height="{px}" fill="rgb({cr},{cg},{cb})"/>"#,
            i as f64 * px,
            (lattice.ny - 1 - j) as f64 * px
        );
    }
    if let Some(s) = samples {
        let sx = width / (lattice.x_max - lattice.x_min);
        let sy = height / (lattice.y_max - lattice.y_min);
        for p in s.rows() {
            let cx = (p[0] - lattice.x_min) * sx;
            let cy = height - (p[1] - lattice.y_min) * sy;
            if (0.0..=width).contains(&cx) && (0.0..=height).contains(&cy) {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="0.8" fill="white" fill-opacity="0.6"/>"#
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
