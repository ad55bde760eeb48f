/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamHyper) {
    assert_eq!(params.len(), grad.len(), "gradient length");
    assert_eq!(params.len(), state.m.len(), "moment length");
    state.t += 1;
    let b1t = 1.0 - hyper.beta1.powf(state.t as f64);
    let b2t = 1.0 - hyper.beta2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / b1t;
        let vhat = state.v[i] / b2t;
        params[i] -= hyper.learning_rate * mhat / (vhat.sqrt() + hyper.eps);
    }
}

/// `ema <- decay ema + (1 - decay) params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

pub fn global_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grad` so its norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState {
            m: vec![0.5, 0.5],
            v: vec![0.25, 0.25],
            t: 3,
        };
        let h = AdamHyper::new(0.1);
        let before_m = st.m.clone();
        let mut q = p.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut st, &h);
        assert_eq!(st.m, vec![0.9 * before_m[0], 0.9 * before_m[1]]);
        assert!((st.v[0] - 0.999 * 0.25).abs() < 1e-15);
        // parameters still move along the decayed momentum, never along the gradient
        p = vec![0.0; 2];
        let mut fresh = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut fresh, &h);
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(fresh.m, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let h = AdamHyper::new(0.01);
        adam_step(&mut p, &g, &mut st, &h);
        for i in 0..3 {
            let expect = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15, "{} vs {}", p[i], expect);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let g = [2.0, -0.5];
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        let h = AdamHyper::new(1e-3);
        let mut prev = p.clone();
        for _ in 0..5000 {
            prev.copy_from_slice(&p);
            adam_step(&mut p, &g, &mut st, &h);
        }
        for i in 0..2 {
            let step = p[i] - prev[i];
            assert!((step + 1e-3 * g[i].signum()).abs() < 1e-9, "step {step}");
        }
    }

    #[test]
    fn ema_with_zero_decay_copies() {
        let mut e = vec![5.0, 6.0];
        ema_update(&mut e, &[1.0, 2.0], 0.0);
        assert_eq!(e, vec![1.0, 2.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![300.0, 400.0];
        assert_eq!(clip_global_norm(&mut g, 100.0), 500.0);
        assert!((global_norm(&g) - 100.0).abs() < 1e-12);
        let mut small = vec![1.0, 1.0];
        clip_global_norm(&mut small, 100.0);
        assert_eq!(small, vec![1.0, 1.0]);
    }
}
