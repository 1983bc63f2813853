//! End-to-end behaviour of the EM family on small simulated scans.

mod common;

use common::max_abs_diff;
use mkrem::dictionary::{ksvd_learn, DictionarySpec, PatchMatrix};
use mkrem::graph::{averaged_markov, feature_windows, select_power, GraphSpec};
use mkrem::kernel::{build_kernel_operator, KernelOperator, KernelSpec, MultiKernelSpec};
use mkrem::linalg::SparseMatrix;
use mkrem::metrics::line_profile;
use mkrem::phantom::{make_brain_like_phantom, simulate, Dataset, NoiseSpec, PhantomConfig};
use mkrem::pipeline::{KernelSetup, RegularizedSetup};
use mkrem::projector::Geometry;
use mkrem::recon::{log_likelihood, mlem_step, run, Algorithm, ReconConfig, Reconstructor, Regularizers};
use rand::Rng;

fn small_dataset(n_realizations: usize) -> Dataset {
    let noise = NoiseSpec {
        target_counts: 20_000.0,
        n_realizations,
        ..NoiseSpec::default()
    };
    simulate(Geometry::new(32, 32, 45, 47), &PhantomConfig::default(), &noise).unwrap()
}

fn small_setup(ds: &Dataset, g: usize) -> RegularizedSetup {
    let kernels = KernelSetup {
        a: KernelSpec::gaussian_window(0.5, 9),
        g,
        ..KernelSetup::default()
    };
    let dict = DictionarySpec {
        code_sparsity: Some(5),
        n_iters: 10,
        ..DictionarySpec::default()
    };
    RegularizedSetup::build(&ds.phantom.priors, &kernels, &dict, &GraphSpec::default()).unwrap()
}

fn cfg(algorithm: Algorithm, n_iters: usize) -> ReconConfig {
    ReconConfig {
        algorithm,
        n_iters,
        ..ReconConfig::default()
    }
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
}

#[test]
fn regularized_update_without_weights_is_kem() {
    let ds = small_dataset(1);
    let setup = small_setup(&ds, 1);
    let p = &ds.realizations[0];
    let kem = run(&ds.model, &cfg(Algorithm::Kem, 20), Some(&setup.k_ma), Regularizers::default(), p).unwrap();
    let c = ReconConfig {
        beta1: 0.0,
        beta2: 0.0,
        ..cfg(Algorithm::Mkrem, 20)
    };
    let mk = run(&ds.model, &c, Some(&setup.k_ma), setup.regularizers(), p).unwrap();
    for (a, b) in kem.images.iter().zip(&mk.images) {
        assert!(rel_close(a, b, 1e-14));
    }
}

#[test]
fn identity_kernel_is_mlem() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let eye = KernelOperator::from(SparseMatrix::identity(ds.model.n_voxels()));
    let kem = run(&ds.model, &cfg(Algorithm::Kem, 15), Some(&eye), Regularizers::default(), p).unwrap();
    let mlem = run(&ds.model, &cfg(Algorithm::Mlem, 15), None, Regularizers::default(), p).unwrap();
    for (a, b) in kem.images.iter().zip(&mlem.images) {
        assert!(rel_close(a, b, 1e-14));
    }
}

#[test]
fn mlem_likelihood_never_decreases() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let mut x = vec![1.0; ds.model.n_voxels()];
    let mut prev = log_likelihood(&ds.model, p, &x).unwrap();
    for _ in 0..60 {
        x = mlem_step(&ds.model, p, &x, None, None).unwrap();
        let l = log_likelihood(&ds.model, p, &x).unwrap();
        assert!(l >= prev - 1e-9 * prev.abs(), "{l} < {prev}");
        prev = l;
    }
}

#[test]
fn noiseless_counts_converge() {
    let ds = small_dataset(1);
    let model = ds.model.clone().with_randoms(vec![0.0; ds.model.n_bins()]).unwrap();
    let p = model.forward(ds.reference.data()).unwrap();
    let total: f64 = p.iter().sum();
    let mut x = vec![1.0; model.n_voxels()];
    let mut gap = f64::INFINITY;
    for _ in 0..20 {
        x = mlem_step(&model, &p, &x, None, None).unwrap();
        let g = (model.forward(&x).unwrap().iter().sum::<f64>() - total).abs() / total;
        assert!(g <= gap + 1e-12, "gap grew from {gap} to {g}");
        gap = g;
    }
}

#[test]
fn one_iteration_run_is_one_step() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let r = run(&ds.model, &cfg(Algorithm::Mlem, 1), None, Regularizers::default(), p).unwrap();
    let step = mlem_step(&ds.model, p, &vec![1.0; ds.model.n_voxels()], None, None).unwrap();
    assert_eq!(r.final_image, step);
    assert_eq!(r.iterations, vec![1]);
}

#[test]
fn every_algorithm_is_deterministic_and_nonnegative() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let s1 = small_setup(&ds, 1);
    let s2 = small_setup(&ds, 2);
    for alg in Algorithm::ALL {
        let (k, regs) = match alg {
            Algorithm::Mlem | Algorithm::MlemF => (None, Regularizers::default()),
            Algorithm::Kem => (Some(&s1.k_ma), Regularizers::default()),
            Algorithm::Krem => (Some(&s1.k_ma), s1.regularizers()),
            Algorithm::Mkrem => (Some(&s2.k_ma), s2.regularizers()),
        };
        let c = ReconConfig {
            beta1: 0.9,
            beta2: 39.0,
            record_every: 3,
            ..cfg(alg, 12)
        };
        let a = run(&ds.model, &c, k, regs, p).unwrap();
        let b = run(&ds.model, &c, k, regs, p).unwrap();
        assert_eq!(a.images, b.images, "{alg}");
        assert_eq!(a.iterations, vec![3, 6, 9, 12]);
        for img in &a.images {
            assert!(img.iter().all(|&v| v >= 0.0), "{alg}");
        }
    }
}

#[test]
fn reconstructor_resume_continues_the_run() {
    let ds = small_dataset(1);
    let setup = small_setup(&ds, 2);
    let p = &ds.realizations[0];
    let c = ReconConfig {
        beta1: 0.9,
        beta2: 39.0,
        ..cfg(Algorithm::Mkrem, 8)
    };
    let full = run(&ds.model, &c, Some(&setup.k_ma), setup.regularizers(), p).unwrap();
    let mut first = Reconstructor::new(&ds.model, &c, Some(&setup.k_ma), setup.regularizers(), p).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let mut second = Reconstructor::new(&ds.model, &c, Some(&setup.k_ma), setup.regularizers(), p).unwrap();
    second.resume(first.into_iterate(), 5).unwrap();
    for _ in 0..3 {
        second.step().unwrap();
    }
    assert_eq!(second.iteration(), 8);
    assert_eq!(second.image().unwrap(), full.final_image);
}

#[test]
fn post_filter_smooths_mlem() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let plain = run(&ds.model, &cfg(Algorithm::Mlem, 30), None, Regularizers::default(), p).unwrap();
    let filtered = run(&ds.model, &cfg(Algorithm::MlemF, 30), None, Regularizers::default(), p).unwrap();
    let tv = |x: &[f64]| x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    assert!(tv(&filtered.final_image) < tv(&plain.final_image));
}

#[test]
fn ksvd_objective_is_monotone_on_paper_shape() {
    let mut r = common::rng(4);
    let cols: Vec<Vec<f64>> = (0..400)
        .map(|_| (0..25).map(|_| r.random_range(0.0..1.0)).collect())
        .collect();
    let data = PatchMatrix::from_columns(25, &cols).unwrap();
    // with s >= 25 every column is coded exactly, so only rounding moves the objective
    let slack = 64.0 * f64::EPSILON * data.frobenius_norm();
    let res = ksvd_learn(&data, 50, 50, 50, 1).unwrap();
    assert_eq!(res.objective.len(), 50);
    for w in res.objective.windows(2) {
        assert!(w[1] <= w[0] + slack, "{} -> {}", w[0], w[1]);
    }
    let res = ksvd_learn(&data, 50, 3, 50, 1).unwrap();
    assert!(res.objective[49] < res.objective[0]);
    for w in res.objective.windows(2) {
        assert!(w[1] <= w[0] + slack, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn power_selection_terminates_on_phantom() {
    let ph = make_brain_like_phantom(64, 64, &PhantomConfig::default()).unwrap();
    let spec = GraphSpec::default();
    let z = averaged_markov(&ph.priors, &spec).unwrap();
    let y = feature_windows(&ph.priors[0], spec.window_m).unwrap();
    let t = select_power(&z, &y, spec.eps_t, spec.t_max).unwrap();
    assert!((1..=spec.t_max).contains(&t));
}

#[test]
fn lesion_profile_peaks_inside_lesion() {
    let ph = make_brain_like_phantom(64, 64, &PhantomConfig::default()).unwrap();
    let row = ph.lesion_row().unwrap();
    let prof = line_profile(&ph.activity, row).unwrap();
    assert_eq!(prof.len(), 64);
    let (argmax, _) = prof
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    assert!(ph.lesion_mask[row * 64 + argmax]);
}

#[test]
fn kernel_smoothing_beats_mlem_noise() {
    let ds = small_dataset(1);
    let p = &ds.realizations[0];
    let k = build_kernel_operator(&ds.phantom.priors, &MultiKernelSpec::repeated(KernelSpec::gaussian_window(0.5, 9), 1)).unwrap();
    let f = ds.reference.data();
    let mlem = run(&ds.model, &cfg(Algorithm::Mlem, 40), None, Regularizers::default(), p).unwrap();
    let kem = run(&ds.model, &cfg(Algorithm::Kem, 40), Some(&k), Regularizers::default(), p).unwrap();
    let err = |x: &[f64]| max_abs_diff(&[mkrem::metrics::mse(x, f).unwrap()], &[0.0]);
    assert!(err(&kem.final_image) < err(&mlem.final_image));
}
