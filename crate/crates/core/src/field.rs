//! Vector fields usable as drift or score: trainable networks plus a few
//! closed-form fields (zero, linear, exact Gaussian OU score) used by the
//! baselines and by analytic test fixtures.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Activations, Mlp, Tangents};

/// Exact score of the Ornstein-Uhlenbeck marginal started from
/// `N(mean0, var0 I)` under `dx = -x/2 dt + g dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuScore {
    pub mean0: Vec<f64>,
    pub var0: f64,
    pub g: f64,
}

impl OuScore {
    pub fn mean_at(&self, t: f64) -> Vec<f64> {
        let decay = (-0.5 * t).exp();
        self.mean0.iter().map(|m| m * decay).collect()
    }

    pub fn var_at(&self, t: f64) -> f64 {
        let e = (-t).exp();
        self.var0 * e + self.g * self.g * (1.0 - e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Zero {
        dim: usize,
    },
    /// `f(x) = A x` with `A` row-major `dim x dim`.
    Linear {
        dim: usize,
        matrix: Vec<f64>,
    },
    OuScore(OuScore),
    Net(Mlp),
}

pub struct FieldJacobian {
    pub output: Array2<f64>,
    /// `jac[k][(r, i)] = d f_i / d x_k` at row `r`.
    pub jac: Vec<Array2<f64>>,
    tangents: Option<Tangents>,
}

/// Forward value plus whatever a later reverse pass needs.
pub struct FieldEval {
    output: Option<Array2<f64>>,
    acts: Option<Activations>,
}

impl FieldEval {
    pub fn output(&self) -> &Array2<f64> {
        match (&self.output, &self.acts) {
            (Some(o), _) => o,
            (None, Some(a)) => &a.output,
            (None, None) => unreachable!("field evaluation without output"),
        }
    }
}

impl Field {
    pub fn zero(dim: usize) -> Self {
        Field::Zero { dim }
    }

    pub fn linear(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::config(format!(
                "linear field needs {} coefficients, got {}",
                dim * dim,
                matrix.len()
            )));
        }
        Ok(Field::Linear { dim, matrix })
    }

    /// `f(x) = c x`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = c;
        }
        Field::Linear { dim, matrix: m }
    }

    pub fn dim(&self) -> usize {
        match self {
            Field::Zero { dim } | Field::Linear { dim, .. } => *dim,
            Field::OuScore(s) => s.mean0.len(),
            Field::Net(n) => n.dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Field::Net(n) => n.params().len(),
            _ => 0,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Field::Net(n) => n.params().values(),
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Field::Net(n) => n.params_mut().values_mut(),
            _ => &mut [],
        }
    }

    /// Fastest oscillation in `t`; zero for the closed-form fields, which
    /// vary smoothly in time.
    pub fn max_time_frequency(&self) -> f64 {
        match self {
            Field::Net(n) => n.max_time_frequency(),
            _ => 0.0,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.num_params() > 0
    }

    fn matrix_view(dim: usize, matrix: &[f64]) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((dim, dim), matrix).expect("square matrix")
    }

    fn check(&self, x: ArrayView2<'_, f64>) {
        assert_eq!(
            x.ncols(),
            self.dim(),
            "input has {} columns, field expects {}",
            x.ncols(),
            self.dim()
        );
    }

    pub fn eval_batch(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        self.check(x);
        match self {
            Field::Zero { .. } => Array2::zeros(x.raw_dim()),
            Field::Linear { dim, matrix } => x.dot(&Self::matrix_view(*dim, matrix).t()),
            Field::OuScore(s) => {
                let m = s.mean_at(t);
                let v = s.var_at(t);
                let mut out = x.to_owned();
                for mut row in out.rows_mut() {
                    for (o, mi) in row.iter_mut().zip(&m) {
                        *o = -(*o - mi) / v;
                    }
                }
                out
            }
            Field::Net(n) => n.forward_batch(x, t),
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        self.eval_batch(xv, t).into_raw_vec_and_offset().0
    }

    /// Forward pass that keeps activations for [`Field::backward_cached`].
    pub fn eval_cached(&self, x: ArrayView2<'_, f64>, t: f64) -> FieldEval {
        match self {
            Field::Net(n) => {
                self.check(x);
                FieldEval {
                    output: None,
                    acts: Some(n.forward_cached(x, t)),
                }
            }
            _ => FieldEval {
                output: Some(self.eval_batch(x, t)),
                acts: None,
            },
        }
    }

    /// Reverse pass reusing the activations of [`Field::eval_cached`].
    pub fn backward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        ev: &FieldEval,
        cot: ArrayView2<'_, f64>,
        grad_params: Option<&mut [f64]>,
    ) -> Array2<f64> {
        match (self, &ev.acts) {
            (Field::Net(n), Some(acts)) => n.backward(x, t, acts, cot, grad_params),
            _ => self.vjp_batch(x, t, cot, grad_params),
        }
    }

    /// Returns `cot^T df/dx` per row; accumulates the batch-summed parameter
    /// gradient into `grad_params` when given (must have `num_params` entries).
    pub fn vjp_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cot: ArrayView2<'_, f64>,
        grad_params: Option<&mut [f64]>,
    ) -> Array2<f64> {
        self.check(x);
        match self {
            Field::Zero { .. } => Array2::zeros(x.raw_dim()),
            Field::Linear { dim, matrix } => cot.dot(&Self::matrix_view(*dim, matrix)),
            Field::OuScore(s) => cot.mapv(|c| -c / s.var_at(t)),
            Field::Net(n) => {
                let acts = n.forward_cached(x, t);
                n.backward(x, t, &acts, cot, grad_params)
            }
        }
    }

    /// Forward value and exact Jacobian of every row.
    pub fn jacobian_batch(&self, x: ArrayView2<'_, f64>, t: f64) -> FieldJacobian {
        self.check(x);
        let rows = x.nrows();
        let d = self.dim();
        let constant = |a: &dyn Fn(usize, usize) -> f64| -> Vec<Array2<f64>> {
            (0..d)
                .map(|k| Array2::from_shape_fn((rows, d), |(_, i)| a(i, k)))
                .collect()
        };
        match self {
            Field::Zero { .. } => FieldJacobian {
                output: Array2::zeros((rows, d)),
                jac: constant(&|_, _| 0.0),
                tangents: None,
            },
            Field::Linear { matrix, .. } => FieldJacobian {
                output: self.eval_batch(x, t),
                jac: constant(&|i, k| matrix[i * d + k]),
                tangents: None,
            },
            Field::OuScore(s) => {
                let v = s.var_at(t);
                FieldJacobian {
                    output: self.eval_batch(x, t),
                    jac: constant(&|i, k| if i == k { -1.0 / v } else { 0.0 }),
                    tangents: None,
                }
            }
            Field::Net(n) => {
                let tan = n.jacobian_batch(x, t);
                FieldJacobian {
                    output: tan.output().clone(),
                    jac: tan.jac.clone(),
                    tangents: Some(tan),
                }
            }
        }
    }

    /// Reverse pass through [`Field::jacobian_batch`].
    pub fn jacobian_backward(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        fj: &FieldJacobian,
        out_cot: ArrayView2<'_, f64>,
        jac_cot: &[Array2<f64>],
        grad_params: &mut [f64],
    ) -> Array2<f64> {
        match self {
            Field::Net(n) => n.jacobian_backward(
                x,
                t,
                fj.tangents.as_ref().expect("network tangents"),
                out_cot,
                jac_cot,
                grad_params,
            ),
            // Jacobian does not depend on x for the closed-form fields
            _ => self.vjp_batch(x, t, out_cot, None),
        }
    }
}
