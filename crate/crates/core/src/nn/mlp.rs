//! Time-conditioned multilayer perceptron `R^d x [0, T] -> R^d`.
//!
//! Architecture: a learned Fourier embedding of `t` (half sine, half cosine of
//! `freq * t + phase`) is added to a linear projection of `x`; the sum feeds a
//! stack of dense layers with SiLU activations and a final linear read-out.
//! Batches are row-major `(batch, dim)` arrays sharing one time value.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "silu" => Ok(Activation::Silu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn value(self, z: f64) -> f64 {
        z * sigmoid(z)
    }

    #[inline]
    fn d1(self, z: f64) -> f64 {
        let s = sigmoid(z);
        s + z * s * (1.0 - s)
    }

    #[inline]
    fn d2(self, z: f64) -> f64 {
        let s = sigmoid(z);
        s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            activation: Activation::Silu,
            time_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::config("hidden_widths must not be empty"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(
                "time_embed_dim must be a positive even number",
            ));
        }
        Ok(())
    }

    /// Segment table in storage order.
    pub fn segments(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.input_dim;
        let e = self.time_embed_dim;
        let mut segs = vec![
            ("time.freq".to_string(), vec![e / 2]),
            ("time.phase".to_string(), vec![e / 2]),
            ("embed.weight".to_string(), vec![e, d]),
            ("embed.bias".to_string(), vec![e]),
        ];
        let mut fan_in = e;
        for (l, &w) in self.hidden_widths.iter().enumerate() {
            segs.push((format!("hidden{l}.weight"), vec![w, fan_in]));
            segs.push((format!("hidden{l}.bias"), vec![w]));
            fan_in = w;
        }
        segs.push(("out.weight".to_string(), vec![d, fan_in]));
        segs.push(("out.bias".to_string(), vec![d]));
        segs
    }

    pub fn num_params(&self) -> usize {
        self.segments()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Deterministic initialization.
///
/// Dense weights and biases are uniform in `±1/sqrt(fan_in)`, frequencies are
/// log-uniform in `[1, 1e3]`, phases start at zero, and the read-out layer is
/// zero so the untrained network is identically zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = crate::rng::stream(seed, 0, 0, 0);
    let mut p = ParamVector::zeros(spec.segments());
    for f in p.get_mut("time.freq") {
        *f = 10f64.powf(rng.random_range(0.0..3.0));
    }
    let fill = |vals: &mut [f64], fan_in: usize, rng: &mut crate::rng::StreamRng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in vals {
            *v = rng.random_range(-bound..bound);
        }
    };
    fill(p.get_mut("embed.weight"), spec.input_dim, &mut rng);
    fill(p.get_mut("embed.bias"), spec.input_dim, &mut rng);
    let mut fan_in = spec.time_embed_dim;
    for (l, &w) in spec.hidden_widths.iter().enumerate() {
        fill(p.get_mut(&format!("hidden{l}.weight")), fan_in, &mut rng);
        fill(p.get_mut(&format!("hidden{l}.bias")), fan_in, &mut rng);
        fan_in = w;
    }
    Ok(p)
}

/// Cached intermediate values of one batched forward pass.
pub struct Activations {
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    h0: Array2<f64>,
    pub output: Array2<f64>,
}

/// Forward tangents along each input coordinate, used for exact Jacobians.
pub struct Tangents {
    acts: Activations,
    /// `dh0[k]` is the (row-independent) tangent of the embedding along `e_k`.
    dh0: Vec<Array1<f64>>,
    dpre: Vec<Vec<Array2<f64>>>,
    dpost: Vec<Vec<Array2<f64>>>,
    /// `jac[k][(r, i)] = d y_i / d x_k` at batch row `r`.
    pub jac: Vec<Array2<f64>>,
}

impl Tangents {
    pub fn output(&self) -> &Array2<f64> {
        &self.acts.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        let expected = ParamVector::zeros(spec.segments());
        if expected.layout() != params.layout() {
            return Err(Error::contract(
                "parameter layout does not match network spec",
            ));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }

    fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        let seg = self.params.segment(name).expect("segment");
        ArrayView2::from_shape(
            (seg.shape[0], seg.shape[1]),
            &self.params.values()[seg.range()],
        )
        .expect("segment shape")
    }

    fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.params.get(name))
    }

    fn layer_names(&self) -> Vec<(String, String)> {
        (0..self.spec.hidden_widths.len())
            .map(|l| (format!("hidden{l}.weight"), format!("hidden{l}.bias")))
            .collect()
    }

    /// Fourier time features, length `time_embed_dim`.
    /// Largest `|frequency|` of the time embedding, in radians per unit time.
    pub fn max_time_frequency(&self) -> f64 {
        self.params
            .get("time.freq")
            .iter()
            .fold(0.0, |m, f| m.max(f.abs()))
    }

    pub fn time_embedding(&self, t: f64) -> Array1<f64> {
        let freq = self.params.get("time.freq");
        let phase = self.params.get("time.phase");
        let half = freq.len();
        let mut e = Array1::zeros(2 * half);
        for k in 0..half {
            let (s, c) = (freq[k] * t + phase[k]).sin_cos();
            e[k] = s;
            e[half + k] = c;
        }
        e
    }

    /// Input to the hidden stack: `W_x x + b_x + embed(t)` for each row.
    pub fn embed(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        let mut h0 = x.dot(&self.mat("embed.weight").t());
        h0 += &self.vec("embed.bias");
        h0 += &self.time_embedding(t);
        h0
    }

    fn check_batch(&self, x: ArrayView2<'_, f64>) {
        assert_eq!(
            x.ncols(),
            self.spec.input_dim,
            "input has {} columns, network expects {}",
            x.ncols(),
            self.spec.input_dim
        );
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>, t: f64) -> Activations {
        self.check_batch(x);
        let act = self.spec.activation;
        let h0 = self.embed(x, t);
        let mut pre = Vec::with_capacity(self.spec.hidden_widths.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.spec.hidden_widths.len());
        for (w, b) in self.layer_names() {
            let input = post.last().unwrap_or(&h0);
            let mut z = input.dot(&self.mat(&w).t());
            z += &self.vec(&b);
            let a = z.mapv(|v| act.value(v));
            pre.push(z);
            post.push(a);
        }
        let mut output = post
            .last()
            .expect("non-empty stack")
            .dot(&self.mat("out.weight").t());
        output += &self.vec("out.bias");
        Activations {
            pre,
            post,
            h0,
            output,
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        self.forward_cached(x, t).output
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Vec<f64> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        self.forward_batch(xv, t).into_raw_vec_and_offset().0
    }

    /// Reverse pass. Returns `cot^T d(out)/dx` per row and, when `grad_params`
    /// is given, accumulates the batch-summed parameter gradient into it.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        acts: &Activations,
        cot: ArrayView2<'_, f64>,
        mut grad_params: Option<&mut [f64]>,
    ) -> Array2<f64> {
        let act = self.spec.activation;
        let names = self.layer_names();
        let last = acts.post.last().expect("non-empty stack");
        if let Some(g) = grad_params.as_deref_mut() {
            self.acc_mat(g, "out.weight", cot, last.view());
            self.acc_bias(g, "out.bias", cot);
        }
        let mut abar = cot.dot(&self.mat("out.weight"));
        for l in (0..names.len()).rev() {
            let mut zbar = abar;
            zbar.zip_mut_with(&acts.pre[l], |g, &z| *g *= act.d1(z));
            let input = if l == 0 { &acts.h0 } else { &acts.post[l - 1] };
            if let Some(g) = grad_params.as_deref_mut() {
                self.acc_mat(g, &names[l].0, zbar.view(), input.view());
                self.acc_bias(g, &names[l].1, zbar.view());
            }
            abar = zbar.dot(&self.mat(&names[l].0));
        }
        let h0bar = abar;
        if let Some(g) = grad_params.as_deref_mut() {
            self.acc_mat(g, "embed.weight", h0bar.view(), x);
            self.acc_bias(g, "embed.bias", h0bar.view());
            let colsum = h0bar.sum_axis(Axis(0));
            self.acc_time(g, t, colsum.view());
        }
        h0bar.dot(&self.mat("embed.weight"))
    }

    /// Batched vector-Jacobian product: `(grad_x, grad_params)` with the
    /// parameter gradient summed over rows.
    pub fn vjp_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cot: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, ParamVector) {
        let acts = self.forward_cached(x, t);
        let mut grad = self.params.zeros_like();
        let gx = self.backward(x, t, &acts, cot, Some(grad.values_mut()));
        (gx, grad)
    }

    pub fn vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> (Vec<f64>, ParamVector) {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let cv = ArrayView2::from_shape((1, cot.len()), cot).expect("row");
        let (gx, gp) = self.vjp_batch(xv, t, cv);
        (gx.into_raw_vec_and_offset().0, gp)
    }

    fn seg_mut<'a>(&self, g: &'a mut [f64], name: &str) -> &'a mut [f64] {
        let seg = self.params.segment(name).expect("segment");
        &mut g[seg.range()]
    }

    fn acc_mat(
        &self,
        g: &mut [f64],
        name: &str,
        outer: ArrayView2<'_, f64>,
        inner: ArrayView2<'_, f64>,
    ) {
        let seg = self.params.segment(name).expect("segment");
        let shape = (seg.shape[0], seg.shape[1]);
        let mut view = ArrayViewMut2::from_shape(shape, &mut g[seg.range()]).expect("shape");
        general_mat_mul(1.0, &outer.t(), &inner, 1.0, &mut view);
    }

    fn acc_bias(&self, g: &mut [f64], name: &str, rows: ArrayView2<'_, f64>) {
        let dst = self.seg_mut(g, name);
        for row in rows.rows() {
            for (d, v) in dst.iter_mut().zip(row.iter()) {
                *d += v;
            }
        }
    }

    fn acc_time(&self, g: &mut [f64], t: f64, h0bar_sum: ArrayView1<'_, f64>) {
        let freq = self.params.get("time.freq");
        let phase = self.params.get("time.phase");
        let half = freq.len();
        let mut dfreq = vec![0.0; half];
        let mut dphase = vec![0.0; half];
        for k in 0..half {
            let (s, c) = (freq[k] * t + phase[k]).sin_cos();
            let d_arg = c * h0bar_sum[k] - s * h0bar_sum[half + k];
            dfreq[k] = d_arg * t;
            dphase[k] = d_arg;
        }
        for (d, v) in self.seg_mut(g, "time.freq").iter_mut().zip(dfreq) {
            *d += v;
        }
        for (d, v) in self.seg_mut(g, "time.phase").iter_mut().zip(dphase) {
            *d += v;
        }
    }

    /// Forward pass carrying tangents along every input axis, giving the
    /// exact per-row Jacobian.
    pub fn jacobian_batch(&self, x: ArrayView2<'_, f64>, t: f64) -> Tangents {
        let act = self.spec.activation;
        let acts = self.forward_cached(x, t);
        let d = self.spec.input_dim;
        let wx = self.mat("embed.weight");
        let dh0: Vec<Array1<f64>> = (0..d).map(|k| wx.column(k).to_owned()).collect();
        let names = self.layer_names();
        let mut dpre: Vec<Vec<Array2<f64>>> = Vec::with_capacity(names.len());
        let mut dpost: Vec<Vec<Array2<f64>>> = Vec::with_capacity(names.len());
        let rows = x.nrows();
        for (l, (w, _)) in names.iter().enumerate() {
            let wm = self.mat(w);
            let mut dz_k = Vec::with_capacity(d);
            let mut da_k = Vec::with_capacity(d);
            for k in 0..d {
                let dz = if l == 0 {
                    let v = wm.dot(&dh0[k]);
                    let mut m = Array2::zeros((rows, v.len()));
                    m += &v;
                    m
                } else {
                    dpost[l - 1][k].dot(&wm.t())
                };
                let mut da = dz.clone();
                da.zip_mut_with(&acts.pre[l], |v, &z| *v *= act.d1(z));
                dz_k.push(dz);
                da_k.push(da);
            }
            dpre.push(dz_k);
            dpost.push(da_k);
        }
        let wo = self.mat("out.weight");
        let jac = dpost
            .last()
            .expect("non-empty stack")
            .iter()
            .map(|da| da.dot(&wo.t()))
            .collect();
        Tangents {
            acts,
            dh0,
            dpre,
            dpost,
            jac,
        }
    }

    /// Reverse pass through [`Mlp::jacobian_batch`]: given cotangents for the
    /// output (`out_cot`, rows x d) and for the Jacobian (`jac_cot[k]`, rows x d,
    /// matching `Tangents::jac[k]`), returns the input gradient and accumulates
    /// batch-summed parameter gradients.
    pub fn jacobian_backward(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        tan: &Tangents,
        out_cot: ArrayView2<'_, f64>,
        jac_cot: &[Array2<f64>],
        grad_params: &mut [f64],
    ) -> Array2<f64> {
        let act = self.spec.activation;
        let d = self.spec.input_dim;
        let names = self.layer_names();
        let acts = &tan.acts;
        let nl = names.len();
        let wo = self.mat("out.weight");

        self.acc_mat(grad_params, "out.weight", out_cot, acts.post[nl - 1].view());
        for k in 0..d {
            self.acc_mat(
                grad_params,
                "out.weight",
                jac_cot[k].view(),
                tan.dpost[nl - 1][k].view(),
            );
        }
        self.acc_bias(grad_params, "out.bias", out_cot);
        let mut abar = out_cot.dot(&wo);
        let mut dabar: Vec<Array2<f64>> = jac_cot.iter().map(|c| c.dot(&wo)).collect();

        for l in (0..nl).rev() {
            let z = &acts.pre[l];
            let mut zbar = abar;
            zbar.zip_mut_with(z, |g, &zz| *g *= act.d1(zz));
            let mut dzbar = Vec::with_capacity(d);
            for k in 0..d {
                let mut second = dabar[k].clone();
                ndarray::Zip::from(&mut second)
                    .and(z)
                    .and(&tan.dpre[l][k])
                    .for_each(|s, &zz, &dz| *s *= act.d2(zz) * dz);
                zbar += &second;
                let mut dzb = dabar[k].clone();
                dzb.zip_mut_with(z, |g, &zz| *g *= act.d1(zz));
                dzbar.push(dzb);
            }
            let wname = &names[l].0;
            let wm = self.mat(wname);
            if l == 0 {
                self.acc_mat(grad_params, wname, zbar.view(), acts.h0.view());
                for k in 0..d {
                    // the layer-0 input tangent is the same row for every sample
                    let colsum = dzbar[k].sum_axis(Axis(0));
                    let seg = self.params.segment(wname).expect("segment").clone();
                    let mut view = ArrayViewMut2::from_shape(
                        (seg.shape[0], seg.shape[1]),
                        &mut grad_params[seg.range()],
                    )
                    .expect("shape");
                    for (i, mut row) in view.rows_mut().into_iter().enumerate() {
                        row.scaled_add(colsum[i], &tan.dh0[k]);
                    }
                }
            } else {
                self.acc_mat(grad_params, wname, zbar.view(), acts.post[l - 1].view());
                for k in 0..d {
                    self.acc_mat(
                        grad_params,
                        wname,
                        dzbar[k].view(),
                        tan.dpost[l - 1][k].view(),
                    );
                }
            }
            self.acc_bias(grad_params, &names[l].1, zbar.view());
            abar = zbar.dot(&wm);
            dabar = dzbar.iter().map(|g| g.dot(&wm)).collect();
        }

        let h0bar = abar;
        // tangent of h0 along e_k is column k of W_x
        {
            let seg = self
                .params
                .segment("embed.weight")
                .expect("segment")
                .clone();
            let g = &mut grad_params[seg.range()];
            for k in 0..d {
                let colsum = dabar[k].sum_axis(Axis(0));
                for i in 0..seg.shape[0] {
                    g[i * d + k] += colsum[i];
                }
            }
        }
        self.acc_mat(grad_params, "embed.weight", h0bar.view(), x);
        self.acc_bias(grad_params, "embed.bias", h0bar.view());
        let colsum = h0bar.sum_axis(Axis(0));
        self.acc_time(grad_params, t, colsum.view());
        h0bar.dot(&self.mat("embed.weight"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn perturbed(spec: MlpSpec, seed: u64) -> Mlp {
        let mut net = Mlp::new(spec, seed).unwrap();
        let mut rng = crate::rng::stream(seed, 99, 0, 0);
        for v in net.params_mut().get_mut("out.weight") {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in net.params_mut().get_mut("out.bias") {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in net.params_mut().get_mut("time.phase") {
            *v = rng.random_range(-1.0..1.0);
        }
        net
    }

    fn small() -> MlpSpec {
        MlpSpec::new(2, vec![8, 6], 4)
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(MlpSpec::new(2, vec![], 4).validate().is_err());
        assert!(MlpSpec::new(2, vec![0], 4).validate().is_err());
        assert!(MlpSpec::new(2, vec![4], 3).validate().is_err());
        assert!(MlpSpec::new(0, vec![4], 4).validate().is_err());
        assert!(init_params(&MlpSpec::new(2, vec![3, 0], 4), 1).is_err());
    }

    #[test]
    fn init_is_deterministic_and_zero_output() {
        let spec = MlpSpec::new(2, vec![16, 16], 8);
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 8).unwrap());
        let net = Mlp::from_params(spec, a).unwrap();
        for (x, t) in [([0.3, -2.0], 0.0), ([10.0, 4.0], 0.7), ([-1.0, 1e3], 1.0)] {
            assert_eq!(net.forward(&x, t), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn frequencies_are_log_uniform_in_range() {
        let spec = MlpSpec::new(2, vec![4], 512);
        let p = init_params(&spec, 3).unwrap();
        let f = p.get("time.freq");
        assert!(f.iter().all(|&v| (1.0..=1e3).contains(&v)));
        let mean_log = f.iter().map(|v| v.log10()).sum::<f64>() / f.len() as f64;
        assert!(
            (mean_log - 1.5).abs() < 0.15,
            "mean log10 frequency {mean_log}"
        );
    }

    #[test]
    fn embedding_is_linear_x_projection_plus_time_features() {
        let mut net = perturbed(MlpSpec::new(2, vec![4], 2), 1);
        {
            let p = net.params_mut();
            p.get_mut("embed.weight")
                .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            p.get_mut("embed.bias").copy_from_slice(&[0.0, 0.0]);
            p.get_mut("time.freq").copy_from_slice(&[2.0]);
            p.get_mut("time.phase").copy_from_slice(&[0.5]);
        }
        let h0 = net.embed(array![[3.0, -1.0]].view(), 0.25);
        let arg: f64 = 2.0 * 0.25 + 0.5;
        assert!((h0[(0, 0)] - (3.0 + arg.sin())).abs() < 1e-15);
        assert!((h0[(0, 1)] - (-1.0 + arg.cos())).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_finite_over_horizon() {
        let net = Mlp::new(MlpSpec::new(2, vec![4], 64), 5).unwrap();
        for i in 0..=100 {
            let e = net.time_embedding(i as f64 / 100.0);
            assert_eq!(e.len(), 64);
            assert!(e.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = perturbed(small(), 4);
        let (gx, gp) = net.vjp(&[0.4, -0.3], 0.6, &[0.0, 0.0]);
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(gp.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let net = perturbed(small(), 4);
        let a = net.forward(&[0.1, 0.2], 0.3);
        let b = net.forward(&[0.1, 0.2], 0.3);
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "columns")]
    fn dimension_mismatch_is_rejected() {
        let net = perturbed(small(), 4);
        net.forward(&[0.1, 0.2, 0.3], 0.3);
    }

    #[test]
    fn jacobian_matches_vjp_rows() {
        let net = perturbed(small(), 11);
        let x = array![[0.3, -0.7], [1.1, 0.2]];
        let tan = net.jacobian_batch(x.view(), 0.4);
        for r in 0..2 {
            for i in 0..2 {
                let mut cot = [0.0; 2];
                cot[i] = 1.0;
                let (gx, _) = net.vjp(x.row(r).as_slice().unwrap(), 0.4, &cot);
                for k in 0..2 {
                    assert!((tan.jac[k][(r, i)] - gx[k]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn jacobian_backward_matches_finite_differences() {
        // scalar objective: sum of out_cot * y + sum_k jac_cot[k] * J[k]
        let spec = small();
        let net = perturbed(spec.clone(), 21);
        let x = array![[0.3, -0.7], [0.9, 0.4]];
        let t = 0.35;
        let out_cot = array![[0.2, -0.4], [0.7, 0.1]];
        let jac_cot = vec![
            array![[0.5, 0.3], [-0.2, 0.9]],
            array![[-0.6, 0.25], [0.4, -0.3]],
        ];
        let objective = |n: &Mlp, xx: &Array2<f64>| -> f64 {
            let tan = n.jacobian_batch(xx.view(), t);
            let mut s = (&tan.acts.output * &out_cot).sum();
            for k in 0..2 {
                s += (&tan.jac[k] * &jac_cot[k]).sum();
            }
            s
        };
        let tan = net.jacobian_batch(x.view(), t);
        let mut gp = vec![0.0; net.params().len()];
        let gx = net.jacobian_backward(x.view(), t, &tan, out_cot.view(), &jac_cot, &mut gp);
        let h = 1e-6;
        for j in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut().values_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut().values_mut()[j] -= h;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            assert!(
                (fd - gp[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {j}: fd {fd} vs {}",
                gp[j]
            );
        }
        for r in 0..2 {
            for k in 0..2 {
                let mut xp = x.clone();
                xp[(r, k)] += h;
                let mut xm = x.clone();
                xm[(r, k)] -= h;
                let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
                assert!((fd - gx[(r, k)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
