use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::csv_io::read_matrix;
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Per-column affine standardization `y = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            std: Array1::ones(d),
        }
    }

    /// Population mean and stddev; constant columns keep unit scale.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::config(
                "cannot fit a normalization on an empty split",
            ));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }

    pub fn invert(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        &y * &self.std + &self.mean
    }

    /// Nats to add to a normalized-space NLL to get the raw-space NLL:
    /// `sum_k ln std_k`.
    pub fn rescale_log_det(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// A loaded tabular dataset: normalized splits plus the fitted transform.
#[derive(Debug, Clone)]
pub struct TabularSource {
    pub path: PathBuf,
    pub header: Option<Vec<String>>,
    pub train: Array2<f64>,
    pub valid: Array2<f64>,
    pub test: Array2<f64>,
    pub normalization: Normalization,
}

impl TabularSource {
    pub fn dim(&self) -> usize {
        self.train.ncols()
    }
}

/// Split sizes: train and valid are rounded, test takes the rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let tr = ((n as f64) * a).round() as usize;
    let va = (((n as f64) * b).round() as usize).min(n - tr);
    Ok((tr, va, n - tr - va))
}

/// Permutes rows with the split stream of `seed`.
pub fn shuffled_rows(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, domain::SPLIT, 0, 0));
    idx
}

pub fn split_table(
    data: ArrayView2<'_, f64>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Normalization)> {
    let (tr, va, _) = split_sizes(data.nrows(), ratios)?;
    let idx = shuffled_rows(data.nrows(), seed);
    let take = |ids: &[usize]| data.select(Axis(0), ids);
    let train = take(&idx[..tr]);
    let valid = take(&idx[tr..tr + va]);
    let test = take(&idx[tr + va..]);
    let norm = Normalization::fit(train.view())?;
    Ok((
        norm.apply(train.view()),
        norm.apply(valid.view()),
        norm.apply(test.view()),
        norm,
    ))
}

pub fn load_tabular(path: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<TabularSource> {
    let table = read_matrix(path)?;
    if table.data.nrows() == 0 {
        return Err(Error::Parse {
            row: 1,
            message: "no numeric rows".into(),
        });
    }
    let (train, valid, test, normalization) = split_table(table.data.view(), ratios, seed)?;
    Ok(TabularSource {
        path: path.to_path_buf(),
        header: table.header,
        train,
        valid,
        test,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_three_rows() {
        // column 0: 1,2,3 -> mean 2, std sqrt(2/3); column 1: 10,10,40 -> mean 20, std sqrt(200)
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "u,v\n1,10\n2,10\n3,40\n").unwrap();
        let src = load_tabular(&p, (1.0, 0.0, 0.0), 0).unwrap();
        let n = &src.normalization;
        assert_eq!(n.mean, array![2.0, 20.0]);
        assert!((n.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((n.std[1] - 200.0f64.sqrt()).abs() < 1e-12);
        let y = n.apply(array![[1.0, 10.0], [3.0, 40.0]].view());
        let a = 1.5f64.sqrt();
        let b = 1.0 / 2.0f64.sqrt();
        assert!((y[(0, 0)] + a).abs() < 1e-15 && (y[(1, 0)] - a).abs() < 1e-15);
        assert!((y[(0, 1)] + b).abs() < 1e-15 && (y[(1, 1)] - 2.0 * b).abs() < 1e-15);
        assert!((n.rescale_log_det() - 0.5 * ((2.0f64 / 3.0).ln() + 200.0f64.ln())).abs() < 1e-14);
        assert_eq!(src.valid.nrows() + src.test.nrows(), 0);
    }

    #[test]
    fn standardized_input_is_left_alone() {
        let x = array![[-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [1.0, 1.0]];
        let n = Normalization::fit(x.view()).unwrap();
        let y = n.apply(x.view());
        assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(n.rescale_log_det(), 0.0);
    }

    #[test]
    fn split_sizes_and_fit_statistics() {
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
        assert!(split_sizes(10, (0.8, 0.3, 0.1)).is_err());
        let data = Array2::from_shape_fn((100, 3), |(r, c)| {
            ((r * 7 + c * 13) % 17) as f64 * (c + 1) as f64
        });
        let (tr, va, te, _) = split_table(data.view(), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.nrows(), va.nrows(), te.nrows()), (80, 10, 10));
        for c in tr.columns() {
            assert!(c.mean().unwrap().abs() < 1e-9);
            assert!((c.std(0.0) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_a_deterministic_permutation() {
        let a = shuffled_rows(50, 9);
        assert_eq!(a, shuffled_rows(50, 9));
        assert_ne!(a, shuffled_rows(50, 10));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn parse_failures_propagate_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,2\n3,4\n5\n").unwrap();
        assert!(matches!(
            load_tabular(&p, (0.8, 0.1, 0.1), 0),
            Err(Error::Parse { row: 3, .. })
        ));
        assert!(matches!(
            load_tabular(&dir.path().join("missing.csv"), (0.8, 0.1, 0.1), 0),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..20)
        ) {
            let x = Array2::from_shape_fn((rows.len(), 3), |(r, c)| rows[r][c]);
            let n = Normalization::fit(x.view()).unwrap();
            let back = n.invert(n.apply(x.view()).view());
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
