//! Single Euler-Maruyama updates of the forward and backward processes.

use crate::error::{ensure_finite, Error, Result};

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "step size must be positive, got {dt}"
        )))
    }
}

/// `x_{i+1} = x_i + f_i dt + g_i noise sqrt(dt)`.
pub fn forward_step(x: &[f64], f: &[f64], g: f64, dt: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_dt(dt)?;
    ensure_finite(x, || "forward_step state".into())?;
    ensure_finite(f, || "forward_step drift".into())?;
    ensure_finite(noise, || "forward_step noise".into())?;
    let scale = g * dt.sqrt();
    let out: Vec<f64> = x
        .iter()
        .zip(f)
        .zip(noise)
        .map(|((x, f), n)| x + f * dt + scale * n)
        .collect();
    ensure_finite(&out, || "forward_step result".into())?;
    Ok(out)
}

/// `x_i = x_{i+1} - [f_{i+1} - g_{i+1}^2 s_{i+1}] dt + g_{i+1} noise sqrt(dt)`.
pub fn backward_step(
    x_next: &[f64],
    f_next: &[f64],
    s_next: &[f64],
    g_next: f64,
    dt: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_dt(dt)?;
    ensure_finite(x_next, || "backward_step state".into())?;
    ensure_finite(f_next, || "backward_step drift".into())?;
    ensure_finite(s_next, || "backward_step score".into())?;
    ensure_finite(noise, || "backward_step noise".into())?;
    let g2 = g_next * g_next;
    let scale = g_next * dt.sqrt();
    let out: Vec<f64> = (0..x_next.len())
        .map(|k| x_next[k] - (f_next[k] - g2 * s_next[k]) * dt + scale * noise[k])
        .collect();
    ensure_finite(&out, || "backward_step result".into())?;
    Ok(out)
}

/// The unique backward innovation mapping `x_next` back to `x`:
/// `[x - x_next + (f_next - g_next^2 s_next) dt] / (g_next sqrt(dt))`.
pub fn backward_noise(
    x: &[f64],
    x_next: &[f64],
    f_next: &[f64],
    s_next: &[f64],
    g_next: f64,
    dt: f64,
) -> Vec<f64> {
    let g2 = g_next * g_next;
    let inv = 1.0 / (g_next * dt.sqrt());
    (0..x.len())
        .map(|k| (x[k] - x_next[k] + (f_next[k] - g2 * s_next[k]) * dt) * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        assert_eq!(
            forward_step(&[0.0, 0.0], &[0.0, 0.0], 0.0, 0.3, &[1.0, 2.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let x = forward_step(&[1.0, 1.0], &[-0.5, -0.5], 0.0, 0.1, &[0.0, 0.0]).unwrap();
        assert!((x[0] - 0.95).abs() < 1e-15 && (x[1] - 0.95).abs() < 1e-15);
        let x = forward_step(&[0.0, 0.0], &[0.0, 0.0], 1.0, 0.04, &[1.0, -2.0]).unwrap();
        assert!((x[0] - 0.2).abs() < 1e-15 && (x[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let x = backward_step(&[0.3, -1.0], &[0.0; 2], &[0.0; 2], 0.0, 0.5, &[1.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
        let x = backward_step(
            &[1.0, 0.0],
            &[0.0, 0.0],
            &[2.0, 0.0],
            1.0,
            0.25,
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(x, vec![1.5, 0.0]);
    }

    #[test]
    fn non_finite_inputs_are_reported() {
        assert!(forward_step(&[f64::NAN], &[0.0], 1.0, 0.1, &[0.0]).is_err());
        assert!(forward_step(&[0.0], &[f64::INFINITY], 1.0, 0.1, &[0.0]).is_err());
        assert!(backward_step(&[0.0], &[0.0], &[f64::NAN], 1.0, 0.1, &[0.0]).is_err());
        assert!(forward_step(&[0.0], &[0.0], 1.0, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn forward_then_backward_round_trip() {
        let x = [0.7, -1.3];
        let f = [0.2, 0.9];
        let xn = forward_step(&x, &f, 1.3, 0.05, &[0.4, -1.1]).unwrap();
        let f_next = [0.25, -0.4];
        let s_next = [1.5, 0.1];
        let db = backward_noise(&x, &xn, &f_next, &s_next, 0.8, 0.05);
        let back = backward_step(&xn, &f_next, &s_next, 0.8, 0.05, &db).unwrap();
        for k in 0..2 {
            assert!((back[k] - x[k]).abs() <= 1e-12);
        }
    }
}
