//! Peak heap use of the adjoint recursion, measured with a counting global
//! allocator. Kept in its own test binary with a single test so no other
//! thread allocates while a measurement is running.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use diffflow::dynamics::{sample_forward_trajectory, DiffusionSchedule, NoiseSource, TimeGrid};
use diffflow::field::Field;
use diffflow::nn::{Mlp, MlpSpec};
use diffflow::training::adjoint_gradient;
use diffflow::Model;
use ndarray::Array2;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Bytes allocated by `f` above the live level at entry, at its peak.
fn peak_extra<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

#[test]
fn adjoint_peak_memory_does_not_grow_with_steps() {
    let (rows, width) = (64, 64);
    let spec = MlpSpec::new(2, vec![width, width, width], 16);
    let net = |seed| {
        let mut m = Mlp::new(spec.clone(), seed).unwrap();
        for v in m.params_mut().get_mut("out.weight") {
            *v = 0.01;
        }
        Field::Net(m)
    };
    let model = Model::new(
        net(1),
        net(2),
        DiffusionSchedule::constant(1.0).unwrap(),
        1.0,
    )
    .unwrap();
    let x0 = Array2::from_shape_fn((rows, 2), |(r, k)| {
        ((r * 7 + k * 3) % 11) as f64 / 5.0 - 1.0
    });

    // one node's reverse work: cached forward of both fields plus their pullbacks
    let (_, step) = peak_extra(|| {
        let fe = model.drift.eval_cached(x0.view(), 0.5);
        let se = model.score.eval_cached(x0.view(), 0.5);
        let cot = Array2::<f64>::ones((rows, 2));
        let mut gf = vec![0.0; model.drift.num_params()];
        let mut gs = vec![0.0; model.score.num_params()];
        let a = model
            .drift
            .backward_cached(x0.view(), 0.5, &fe, cot.view(), Some(&mut gf));
        let b = model
            .score
            .backward_cached(x0.view(), 0.5, &se, cot.view(), Some(&mut gs));
        (a, b, gf, gs)
    });

    let mut peaks = Vec::new();
    for n in [8usize, 64, 512] {
        let grid = TimeGrid::fixed(n, 1.0, 1.0).unwrap();
        let traj =
            sample_forward_trajectory(x0.view(), &grid, &model, NoiseSource::new(3)).unwrap();
        let (res, peak) = peak_extra(|| adjoint_gradient(&traj, &model).unwrap());
        assert!(res.loss.is_finite());
        let cached: usize = traj
            .states
            .iter()
            .chain(&traj.forward_noises)
            .map(|a| a.len() * 8)
            .sum();
        println!("N = {n}: adjoint peak {peak} B, one-step footprint {step} B, cached trajectory {cached} B");
        peaks.push(peak);
    }
    let (lo, hi) = (*peaks.iter().min().unwrap(), *peaks.iter().max().unwrap());
    assert!(hi as f64 <= 1.1 * lo as f64, "peak grows with N: {peaks:?}");
    assert!(
        hi <= 4 * step,
        "peak {hi} exceeds 4x the one-step footprint {step}"
    );
}
