use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::csv_io::write_matrix;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{self, domain, StreamRng};

/// Radial stddev of the sharp ring constructions.
pub const SHARP_RING_STD: f64 = 0.001;
/// Radial stddev of the non-sharp Olympic rings.
pub const WIDE_RING_STD: f64 = 0.05;
pub const RING_RADIUS: f64 = 1.0;
pub const FOUR_RING_CENTERS: [[f64; 2]; 4] = [[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]];
pub const OLYMPIC_CENTERS: [[f64; 2]; 5] = [
    [-2.2, 0.5],
    [0.0, 0.5],
    [2.2, 0.5],
    [-1.1, -0.5],
    [1.1, -0.5],
];

/// Checkerboard on 8 of the 16 unit cells of `[-2, 2]^2`, scaled by this
/// factor so each coordinate has unit variance.
pub const CHECKERBOARD_SCALE: f64 = 0.866_025_403_784_438_6;
/// Pooled per-coordinate stddev of the raw two-spirals construction.
pub const SPIRALS_STD: f64 = 1.5974;
/// Centre and pooled stddev of the fractal-tree attractor.
pub const TREE_CENTER: [f64; 2] = [0.0, 0.3045];
pub const TREE_STD: f64 = 0.1042;
/// Per-coordinate stddev of the uniform measure on the unit carpet, `sqrt(3/32)`.
pub const CARPET_STD: f64 = 0.306_186_217_847_897_1;

pub const GMM_CENTERS: [[f64; 2]; 2] = [[-1.5, 0.0], [1.5, 0.0]];
pub const GMM_STD: f64 = 0.3;

/// Affine maps `(a, b, c, d, e, f, p)`: `x' = a x + b y + e`, `y' = c x + d y + f`.
pub const TREE_MAPS: [[f64; 7]; 4] = [
    [0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.05],
    [0.42, -0.42, 0.42, 0.42, 0.0, 0.2, 0.4],
    [0.42, 0.42, -0.42, 0.42, 0.0, 0.2, 0.4],
    [0.1, 0.0, 0.0, 0.1, 0.0, 0.2, 0.15],
];
const TREE_ITERATIONS: usize = 60;
const CARPET_ITERATIONS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dataset2DKind {
    FourRings,
    Olympics,
    SharpOlympics,
    Checkerboard,
    TwoSpirals,
    FractalTree,
    Carpet,
    GaussianMixture,
}

impl Dataset2DKind {
    pub const ALL: [Dataset2DKind; 8] = [
        Self::FourRings,
        Self::Olympics,
        Self::SharpOlympics,
        Self::Checkerboard,
        Self::TwoSpirals,
        Self::FractalTree,
        Self::Carpet,
        Self::GaussianMixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FourRings => "four_rings",
            Self::Olympics => "olympics",
            Self::SharpOlympics => "sharp_olympics",
            Self::Checkerboard => "checkerboard",
            Self::TwoSpirals => "two_spirals",
            Self::FractalTree => "fractal_tree",
            Self::Carpet => "carpet",
            Self::GaussianMixture => "gaussian_mixture",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!(
                    "unknown dataset {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    fn id(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }

    pub fn is_sharp(self) -> bool {
        matches!(self, Self::FourRings | Self::SharpOlympics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dataset2DSpec {
    pub kind: Dataset2DKind,
    pub n: usize,
    pub seed: u64,
}

impl Dataset2DSpec {
    pub fn new(kind: Dataset2DKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed }
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        c.insert("dataset", self.kind.name());
        c.insert("n", self.n as i64);
        c.insert("seed", self.seed as i64);
        c
    }
}

fn normal(st: &mut StreamRng) -> f64 {
    st.sample(StandardNormal)
}

fn ring(st: &mut StreamRng, centers: &[[f64; 2]], radial_std: f64) -> [f64; 2] {
    let c = centers[st.random_range(0..centers.len())];
    let r = RING_RADIUS + radial_std * normal(st);
    let a = st.random::<f64>() * TAU;
    [c[0] + r * a.cos(), c[1] + r * a.sin()]
}

fn checkerboard(st: &mut StreamRng) -> [f64; 2] {
    let x1 = st.random::<f64>() * 4.0 - 2.0;
    let band = if st.random::<bool>() { 2.0 } else { 0.0 };
    let x2 = st.random::<f64>() - band + x1.floor().rem_euclid(2.0);
    [x1 * CHECKERBOARD_SCALE, x2 * CHECKERBOARD_SCALE]
}

fn two_spirals(st: &mut StreamRng) -> [f64; 2] {
    let n = st.random::<f64>().sqrt() * 3.0 * PI;
    let sign = if st.random::<bool>() { 1.0 } else { -1.0 };
    let u = st.random::<f64>();
    let v = st.random::<f64>();
    let x = sign * (-n.cos() * n + 0.5 * u) / 3.0 + 0.1 * normal(st);
    let y = sign * (n.sin() * n + 0.5 * v) / 3.0 + 0.1 * normal(st);
    [x / SPIRALS_STD, y / SPIRALS_STD]
}

fn fractal_tree(st: &mut StreamRng) -> [f64; 2] {
    let (mut x, mut y) = (0.0, 0.0);
    for _ in 0..TREE_ITERATIONS {
        let mut u = st.random::<f64>();
        let m = TREE_MAPS
            .iter()
            .find(|m| {
                u -= m[6];
                u < 0.0
            })
            .unwrap_or(&TREE_MAPS[3]);
        (x, y) = (m[0] * x + m[1] * y + m[4], m[2] * x + m[3] * y + m[5]);
    }
    [
        (x - TREE_CENTER[0]) / TREE_STD,
        (y - TREE_CENTER[1]) / TREE_STD,
    ]
}

fn carpet(st: &mut StreamRng) -> [f64; 2] {
    let (mut x, mut y) = (st.random::<f64>(), st.random::<f64>());
    for _ in 0..CARPET_ITERATIONS {
        // 8 of the 9 sub-squares; index 4 is the removed centre
        let mut k = st.random_range(0..8);
        if k >= 4 {
            k += 1;
        }
        x = (x + (k % 3) as f64) / 3.0;
        y = (y + (k / 3) as f64) / 3.0;
    }
    [(x - 0.5) / CARPET_STD, (y - 0.5) / CARPET_STD]
}

fn gaussian_mixture(st: &mut StreamRng) -> [f64; 2] {
    let c = GMM_CENTERS[st.random_range(0..GMM_CENTERS.len())];
    [c[0] + GMM_STD * normal(st), c[1] + GMM_STD * normal(st)]
}

fn draw(kind: Dataset2DKind, st: &mut StreamRng) -> [f64; 2] {
    match kind {
        Dataset2DKind::FourRings => ring(st, &FOUR_RING_CENTERS, SHARP_RING_STD),
        Dataset2DKind::Olympics => ring(st, &OLYMPIC_CENTERS, WIDE_RING_STD),
        Dataset2DKind::SharpOlympics => ring(st, &OLYMPIC_CENTERS, SHARP_RING_STD),
        Dataset2DKind::Checkerboard => checkerboard(st),
        Dataset2DKind::TwoSpirals => two_spirals(st),
        Dataset2DKind::FractalTree => fractal_tree(st),
        Dataset2DKind::Carpet => carpet(st),
        Dataset2DKind::GaussianMixture => gaussian_mixture(st),
    }
}

/// `n x 2` samples; row `r` depends only on `(seed, kind, r)`.
pub fn generate_2d(spec: &Dataset2DSpec) -> Array2<f64> {
    let rows: Vec<[f64; 2]> = (0..spec.n)
        .into_par_iter()
        .map(|r| {
            let mut st = rng::stream(spec.seed, domain::DATASET, spec.kind.id(), r as u64);
            draw(spec.kind, &mut st)
        })
        .collect();
    Array2::from_shape_fn((spec.n, 2), |(r, c)| rows[r][c])
}

/// Manifest path for a dataset written to `csv`.
pub fn manifest_path(csv: &Path) -> std::path::PathBuf {
    let mut name = csv
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.toml");
    csv.with_file_name(name)
}

/// Writes `x,y` rows to `out` and the generating spec next to it.
pub fn write_2d(spec: &Dataset2DSpec, data: &Array2<f64>, out: &Path) -> Result<()> {
    write_matrix(out, &["x", "y"], data.view())?;
    let manifest = manifest_path(out);
    std::fs::write(&manifest, spec.to_config().render()).map_err(|e| Error::io(&manifest, e))
}
