//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the low-count experiment on the 64x64 phantom, so expect it to take
//! tens of minutes on a single core. Exits non-zero when a criterion fails,
//! except for the ones listed in `KNOWN_FAILURES`.

use std::cell::Cell;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mkrem::dictionary::{
    build_learning_data, ksvd_learn, omp, Dictionary, DictionaryMapping, PatchMatrix, PatchOperator,
};
use mkrem::graph::{averaged_markov, build_laplacian, feature_windows, select_power, GraphSpec, LaplacianPack};
use mkrem::kernel::{build_kernel_operator, KernelOperator, KernelSpec, MultiKernelSpec, Neighborhood};
use mkrem::linalg::{add, matvec, matvec_transpose, spmm, SparseMatrix};
use mkrem::metrics::{curve_minimum, mse};
use mkrem::phantom::{simulate, Dataset};
use mkrem::pipeline::{KernelSetup, RegularizedSetup};
use mkrem::projector::{Geometry, SystemModel};
use mkrem::recon::{log_likelihood, mlem_step, Algorithm, ReconConfig, Reconstructor, Regularizers};
use mkrem::Image;
use mkrem_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria whose failure is understood and recorded; they still print FAIL.
const KNOWN_FAILURES: &[u32] = &[9];

const SWEEP_REALIZATIONS: usize = 3;
const MIN_SEARCH_CAP: usize = 1500;
const STABILITY_CAP: usize = 2500;

type Outcome = Result<(bool, String), String>;

struct Suite {
    failed: Vec<u32>,
    nonnegative: Cell<bool>,
    checked_images: Cell<usize>,
}

impl Suite {
    fn record(&mut self, id: u32, name: &str, started: Instant, outcome: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let known = if !pass && KNOWN_FAILURES.contains(&id) { " [known]" } else { "" };
        println!("{} {id:>2} {name}: {detail} ({secs:.1} s){known}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }

    fn check_images(&self, images: &[&[f64]]) {
        for img in images {
            self.checked_images.set(self.checked_images.get() + 1);
            if img.iter().any(|&v| !(v >= 0.0)) {
                self.nonnegative.set(false);
            }
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_matvec(a: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| dot(&a[i * cols..(i + 1) * cols], v)).collect()
}

fn dense_transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn dense_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            for j in 0..m {
                c[i * m + j] += a[i * k + l] * b[l * m + j];
            }
        }
    }
    c
}

fn random_sparse(r: &mut ChaCha8Rng, n: usize, m: usize) -> (SparseMatrix, Vec<f64>) {
    let d: Vec<f64> = (0..n * m)
        .map(|_| if r.random_bool(0.3) { r.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    (SparseMatrix::from_dense(n, m, &d).unwrap(), d)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Realizations advanced in lockstep, tracking the ensemble AMSE curve.
struct Ensemble<'a> {
    recs: Vec<Reconstructor<'a>>,
    reference: &'a [f64],
    curve: Vec<(usize, f64)>,
}

impl<'a> Ensemble<'a> {
    fn new(
        ds: &'a Dataset,
        cfg: &ReconConfig,
        kernel: Option<&'a KernelOperator>,
        regs: Regularizers<'a>,
        realizations: usize,
    ) -> Result<Self, String> {
        let recs = ds.realizations[..realizations]
            .iter()
            .map(|p| Reconstructor::new(&ds.model, cfg, kernel, regs, p))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        Ok(Self {
            recs,
            reference: ds.reference.data(),
            curve: Vec::new(),
        })
    }

    fn step(&mut self, suite: &Suite) -> Result<(), String> {
        let mut acc = 0.0;
        for rec in &mut self.recs {
            rec.step().map_err(err)?;
            let img = rec.image().map_err(err)?;
            suite.check_images(&[&img]);
            acc += mse(&img, self.reference).map_err(err)?;
        }
        let n = self.recs[0].iteration();
        self.curve.push((n, acc / self.recs.len() as f64));
        Ok(())
    }

    fn iteration(&self) -> usize {
        self.curve.len()
    }

    fn minimum(&self) -> (usize, f64) {
        curve_minimum(&self.curve).expect("curve has at least one point")
    }

    fn amse_at(&self, n: usize) -> f64 {
        self.curve[n - 1].1
    }

    /// Steps until the curve has clearly passed its minimum: at least twice
    /// the minimizing iteration and 50 iterations past it.
    fn find_minimum(&mut self, suite: &Suite, cap: usize) -> Result<(usize, f64), String> {
        while self.iteration() < cap {
            self.step(suite)?;
            let (at, _) = self.minimum();
            let n = self.iteration();
            if n >= 30 && n >= 2 * at && n >= at + 50 {
                break;
            }
        }
        Ok(self.minimum())
    }

    /// Steps until the current iteration is five times the minimizing one.
    fn run_to_five_times_minimum(&mut self, suite: &Suite, cap: usize) -> Result<bool, String> {
        loop {
            let (at, _) = self.minimum();
            if self.iteration() >= 5 * at {
                return Ok(true);
            }
            if self.iteration() >= cap {
                return Ok(false);
            }
            self.step(suite)?;
        }
    }
}

/// Kernels, dictionaries and graph for one reconstruction kernel width.
struct Setups {
    g1: RegularizedSetup,
    g2: RegularizedSetup,
}

impl Setups {
    fn build(ds: &Dataset, cfg: &ExperimentConfig, ja: usize) -> Result<Self, String> {
        let build = |g| {
            let mut kernels = cfg.kernel;
            kernels.a.neighborhood = Neighborhood::Window(ja);
            kernels.g = g;
            RegularizedSetup::build(&ds.phantom.priors, &kernels, &cfg.dictionary, &cfg.graph).map_err(err)
        };
        Ok(Self {
            g1: build(1)?,
            g2: build(2)?,
        })
    }

    fn ensemble<'a>(
        &'a self,
        ds: &'a Dataset,
        cfg: &ExperimentConfig,
        alg: Algorithm,
        realizations: usize,
    ) -> Result<Ensemble<'a>, String> {
        let rcfg = cfg.recon.config_for(alg);
        let (k, regs) = match alg {
            Algorithm::Mlem | Algorithm::MlemF => (None, Regularizers::default()),
            Algorithm::Kem => (Some(&self.g1.k_ma), Regularizers::default()),
            Algorithm::Krem => (Some(&self.g1.k_ma), self.g1.regularizers()),
            Algorithm::Mkrem => (Some(&self.g2.k_ma), self.g2.regularizers()),
        };
        Ensemble::new(ds, &rcfg, k, regs, realizations)
    }
}

fn reductions(suite: &Suite, ds: &Dataset, setups: &Setups) -> Outcome {
    let p = &ds.realizations[0];
    let n_iters = 30;
    let run = |cfg: ReconConfig, k: Option<&KernelOperator>, regs: Regularizers| -> Result<Vec<Vec<f64>>, String> {
        let mut rec = Reconstructor::new(&ds.model, &cfg, k, regs, p).map_err(err)?;
        let mut out = Vec::new();
        for _ in 0..n_iters {
            rec.step().map_err(err)?;
            out.push(rec.image().map_err(err)?);
        }
        suite.check_images(&out.iter().map(Vec::as_slice).collect::<Vec<_>>());
        Ok(out)
    };
    let base = |algorithm| ReconConfig {
        algorithm,
        n_iters,
        ..ReconConfig::default()
    };
    let kem = run(base(Algorithm::Kem), Some(&setups.g1.k_ma), Regularizers::default())?;
    let unweighted = ReconConfig {
        beta1: 0.0,
        beta2: 0.0,
        ..base(Algorithm::Mkrem)
    };
    let mkrem = run(unweighted, Some(&setups.g1.k_ma), setups.g1.regularizers())?;
    let eye = KernelOperator::from(SparseMatrix::identity(ds.model.n_voxels()));
    let kem_eye = run(base(Algorithm::Kem), Some(&eye), Regularizers::default())?;
    let mlem = run(base(Algorithm::Mlem), None, Regularizers::default())?;
    let d1 = kem.iter().zip(&mkrem).map(|(a, b)| max_rel_diff(a, b)).fold(0.0, f64::max);
    let d2 = kem_eye.iter().zip(&mlem).map(|(a, b)| max_rel_diff(a, b)).fold(0.0, f64::max);
    Ok((
        d1 <= 1e-14 && d2 <= 1e-14,
        format!("unweighted MKREM vs KEM {d1:.1e}, identity-kernel KEM vs MLEM {d2:.1e} over {n_iters} iterations (tol 1e-14 rel)"),
    ))
}

fn em_monotonicity(suite: &Suite, ds: &Dataset) -> Outcome {
    let p = &ds.realizations[0];
    let mut x = vec![1.0; ds.model.n_voxels()];
    let mut prev = log_likelihood(&ds.model, p, &x).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        x = mlem_step(&ds.model, p, &x, None, None).map_err(err)?;
        suite.check_images(&[&x]);
        let l = log_likelihood(&ds.model, p, &x).map_err(err)?;
        worst = worst.max((prev - l) / prev.abs());
        prev = l;
    }
    Ok((
        worst <= 1e-9,
        format!("largest relative log-likelihood drop {worst:.1e} over 100 iterations (tol 1e-9)"),
    ))
}

fn oracles(ds: &Dataset) -> Outcome {
    let mut r = rng(3);
    let mut adjoint: f64 = 0.0;
    for _ in 0..5 {
        let x = random_vec(&mut r, ds.model.n_voxels());
        let y = random_vec(&mut r, ds.model.n_bins());
        let lhs = dot(&ds.model.project(&x).map_err(err)?, &y);
        let rhs = dot(&x, &ds.model.backproject(&y).map_err(err)?);
        adjoint = adjoint.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    let n = 20;
    let mut sparse: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let (a, ad) = random_sparse(&mut r, n, n);
        let (b, bd) = random_sparse(&mut r, n, n);
        let v = random_vec(&mut r, n);
        let at = dense_transpose(&ad, n, n);
        let sum: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x + 2.0 * y).collect();
        let rows: Vec<f64> = (0..n).map(|i| ad[i * n..(i + 1) * n].iter().sum()).collect();
        for d in [
            max_abs_diff(&matvec(&a, &v).map_err(err)?, &dense_matvec(&ad, n, n, &v)),
            max_abs_diff(&matvec_transpose(&a, &v).map_err(err)?, &dense_matvec(&at, n, n, &v)),
            max_abs_diff(&a.transpose().to_dense(), &at),
            max_abs_diff(&spmm(&a, &b).map_err(err)?.to_dense(), &dense_matmul(&ad, &bd, n, n, n)),
            max_abs_diff(&add(&a, &b, 2.0).map_err(err)?.to_dense(), &sum),
            max_abs_diff(&a.row_sums(), &rows),
        ] {
            sparse = sparse.max(d);
        }
    }
    let small = SystemModel::build(Geometry::new(20, 20, 12, 29)).map_err(err)?;
    let hd = small.h.to_dense();
    let (m, nv) = (small.geometry.n_bins(), small.geometry.n_voxels());
    let x = random_vec(&mut r, nv);
    let projector = max_abs_diff(&small.project(&x).map_err(err)?, &dense_matvec(&hd, m, nv, &x));
    let sparse = sparse.max(projector);
    Ok((
        adjoint <= 1e-10 && sparse <= 1e-12,
        format!("adjoint mismatch {adjoint:.1e} (tol 1e-10), sparse vs dense {sparse:.1e} (tol 1e-12)"),
    ))
}

fn omp_exactness() -> Outcome {
    const MAX_SUPPORT_COHERENCE: f64 = 0.5;
    let (dim, n_atoms, trials) = (8, 12, 200);
    let mut r = rng(99);
    let (mut agree, mut done, mut too_many) = (0, 0, 0);
    while done < trials {
        let cols: Vec<Vec<f64>> = (0..n_atoms).map(|_| random_vec(&mut r, dim)).collect();
        let d = Dictionary::new(PatchMatrix::from_columns(dim, &cols).map_err(err)?).map_err(err)?;
        let (i, j) = (r.random_range(0..n_atoms), r.random_range(0..n_atoms));
        if i == j {
            continue;
        }
        let coherence = [i, j]
            .iter()
            .flat_map(|&s| (0..n_atoms).filter(move |&k| k != s).map(move |k| (s, k)))
            .map(|(s, k)| dot(d.atom(s), d.atom(k)).abs())
            .fold(0.0, f64::max);
        if coherence > MAX_SUPPORT_COHERENCE {
            continue;
        }
        done += 1;
        let c: [f64; 2] = std::array::from_fn(|_| r.random_range(0.5..1.5) * if r.random() { 1.0 } else { -1.0 });
        let y: Vec<f64> = (0..dim).map(|k| c[0] * d.atom(i)[k] + c[1] * d.atom(j)[k]).collect();
        let mut best = (f64::INFINITY, 0, 0);
        for p in 0..n_atoms {
            for q in p + 1..n_atoms {
                let res = pair_residual(&d, &y, p, q);
                if res < best.0 {
                    best = (res, p, q);
                }
            }
        }
        let code = omp(&d, &y, 2).map_err(err)?;
        if code.nnz() > 2 {
            too_many += 1;
        }
        let mut support = code.indices.clone();
        support.sort_unstable();
        if support == [best.1, best.2] {
            agree += 1;
        }
    }
    Ok((
        agree * 100 >= 95 * trials && too_many == 0,
        format!("brute-force support recovered in {agree}/{trials} trials (need 95%), {too_many} codes over sparsity"),
    ))
}

fn pair_residual(d: &Dictionary, y: &[f64], i: usize, j: usize) -> f64 {
    let (u, v) = (d.atom(i), d.atom(j));
    let (uu, uv, vv) = (dot(u, u), dot(u, v), dot(v, v));
    let (uy, vy) = (dot(u, y), dot(v, y));
    let det = uu * vv - uv * uv;
    let a = (vv * uy - uv * vy) / det;
    let b = (uu * vy - uv * uy) / det;
    y.iter()
        .enumerate()
        .map(|(k, yk)| (yk - a * u[k] - b * v[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn ksvd_monotonicity(ds: &Dataset, cfg: &ExperimentConfig) -> Outcome {
    let priors = &ds.phantom.priors;
    let k_mb = KernelSetup::k_mb(&cfg.kernel, priors).map_err(err)?;
    let op = PatchOperator::new(5, 1, priors[0].width(), priors[0].height()).map_err(err)?;
    let data = build_learning_data(&k_mb, priors, &op, 400, 11).map_err(err)?;
    let res = ksvd_learn(&data, 50, 50, 50, 11).map_err(err)?;
    // with s >= 25 every patch is coded exactly, so rounding is all that moves
    let slack = 64.0 * f64::EPSILON * data.frobenius_norm();
    let rise = res.objective.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        res.objective.len() == 50 && rise <= slack,
        format!(
            "{}x{} data, {} rounds, largest rise {rise:.1e} (rounding slack {slack:.1e}), objective {:.2e} -> {:.2e}",
            data.dim,
            data.n,
            res.objective.len(),
            res.objective[0],
            res.objective[49]
        ),
    ))
}

fn graph_invariants(ds: &Dataset, cfg: &ExperimentConfig, setups: &Setups) -> Outcome {
    let spec = &cfg.graph;
    let priors = &ds.phantom.priors;
    let z = averaged_markov(priors, spec).map_err(err)?;
    let rows = z.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let y = feature_windows(&priors[0], spec.window_m).map_err(err)?;
    let t = select_power(&z, &y, spec.eps_t, spec.t_max).map_err(err)?;
    let lap = LaplacianPack::new(z, t, spec.symmetrize_q).map_err(err)?;
    let ones = vec![1.0; lap.n()];
    let q1 = lap.apply_q(&ones).map_err(err)?.iter().map(|v| v.abs()).fold(0.0, f64::max);

    // exact quadratic identity with explicit matrices on a crop of the prior
    let crop = Image::new(
        16,
        16,
        (0..256).map(|k| priors[0].data()[(24 + k / 16) * 64 + 24 + k % 16]).collect(),
    )
    .map_err(err)?;
    let small = GraphSpec {
        knn_graph: Some(16),
        ..*spec
    };
    let small_lap = build_laplacian(std::slice::from_ref(&crop), &small).map_err(err)?;
    let k = build_kernel_operator(
        std::slice::from_ref(&crop),
        &MultiKernelSpec::repeated(KernelSpec::gaussian_window(0.5, 5), 2),
    )
    .map_err(err)?;
    let q = small_lap.q_matrix().map_err(err)?;
    let q_a = small_lap.q_a_matrix(&k.to_matrix().map_err(err)?).map_err(err)?;
    let mut r = rng(8);
    let mut quad: f64 = 0.0;
    for _ in 0..5 {
        let a: Vec<f64> = (0..256).map(|_| r.random_range(0.0..1.0)).collect();
        let x = k.apply(&a);
        let want = dot(&x, &q.mul_vec(&x));
        quad = quad.max((dot(&a, &q_a.mul_vec(&a)) - want).abs());
        quad = quad.max((dot(&a, &small_lap.apply_q_a(&k, &a).map_err(err)?) - want).abs());
    }
    // implicit form on the full phantom with the experiment's K_Ma
    let a: Vec<f64> = (0..lap.n()).map(|_| r.random_range(0.0..1.0)).collect();
    let x = setups.g2.k_ma.apply(&a);
    let want = dot(&x, &lap.apply_q(&x).map_err(err)?);
    let got = dot(&a, &lap.apply_q_a(&setups.g2.k_ma, &a).map_err(err)?);
    let full = (got - want).abs() / want.abs().max(1.0);
    Ok((
        rows <= 1e-12 && q1 <= 1e-10 && quad <= 1e-10 && full <= 1e-10 && (1..=spec.t_max).contains(&t),
        format!(
            "row sums {rows:.1e}, |Q 1| {q1:.1e}, quadratic identity {quad:.1e} (full size {full:.1e} rel), t = {t} of at most {}",
            spec.t_max
        ),
    ))
}

fn ordering<'a>(
    suite: &Suite,
    ds: &'a Dataset,
    cfg: &ExperimentConfig,
    setups: &'a Setups,
) -> Result<(Outcome, Ensemble<'a>), String> {
    let o = ds.realizations.len();
    let minimum = |alg| -> Result<(usize, f64), String> {
        setups.ensemble(ds, cfg, alg, o)?.find_minimum(suite, MIN_SEARCH_CAP)
    };
    let (mlem_f, kem, krem) = (minimum(Algorithm::MlemF)?, minimum(Algorithm::Kem)?, minimum(Algorithm::Krem)?);
    let mut mk = setups.ensemble(ds, cfg, Algorithm::Mkrem, o)?;
    let mkrem = mk.find_minimum(suite, MIN_SEARCH_CAP)?;
    let pass = mkrem.1 < krem.1 && krem.1 < kem.1 && kem.1 < mlem_f.1;
    let detail = format!(
        "{o} realizations, min AMSE MKREM {:.5} @{} < KREM {:.5} @{} < KEM {:.5} @{}; KEM < MLEM+F {:.5} @{}",
        mkrem.1, mkrem.0, krem.1, krem.0, kem.1, kem.0, mlem_f.1, mlem_f.0
    );
    Ok((Ok((pass, detail)), mk))
}

fn stability(suite: &Suite, ds: &Dataset, setups: &Setups, cfg: &ExperimentConfig, mkrem: &mut Ensemble) -> Outcome {
    let mk_reached = mkrem.run_to_five_times_minimum(suite, STABILITY_CAP)?;
    let (mk_at, mk_min) = mkrem.minimum();
    let mut mlem = setups.ensemble(ds, cfg, Algorithm::Mlem, ds.realizations.len())?;
    mlem.find_minimum(suite, MIN_SEARCH_CAP)?;
    let ml_reached = mlem.run_to_five_times_minimum(suite, STABILITY_CAP)?;
    let (ml_at, ml_min) = mlem.minimum();
    if !mk_reached || !ml_reached {
        return Ok((
            false,
            format!("minimum still moving at the {STABILITY_CAP}-iteration cap (MKREM @{mk_at}, MLEM @{ml_at})"),
        ));
    }
    let mk_ratio = mkrem.amse_at(5 * mk_at) / mk_min;
    let ml_ratio = mlem.amse_at(5 * ml_at) / ml_min;
    Ok((
        mk_ratio <= 1.15 && ml_ratio >= 1.5,
        format!(
            "AMSE at 5x argmin over min: MKREM {mk_ratio:.3} (@{}, need <= 1.15), MLEM {ml_ratio:.3} (@{}, need >= 1.5)",
            5 * mk_at,
            5 * ml_at
        ),
    ))
}

fn kernel_width_sweep(suite: &Suite, ds: &Dataset, cfg: &ExperimentConfig, at_default: &Setups) -> Outcome {
    let default_ja = match cfg.kernel.a.neighborhood {
        Neighborhood::Window(j) => j,
        other => return Err(format!("sweep needs a window neighbourhood, got {other:?}")),
    };
    let mut kem = Vec::new();
    let mut mkrem = Vec::new();
    for &ja in &cfg.sweep.ja {
        let built;
        let setups = if ja == default_ja {
            at_default
        } else {
            built = Setups::build(ds, cfg, ja)?;
            &built
        };
        kem.push(setups.ensemble(ds, cfg, Algorithm::Kem, SWEEP_REALIZATIONS)?.find_minimum(suite, MIN_SEARCH_CAP)?.1);
        mkrem.push(setups.ensemble(ds, cfg, Algorithm::Mkrem, SWEEP_REALIZATIONS)?.find_minimum(suite, MIN_SEARCH_CAP)?.1);
    }
    let spread = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        (hi - lo) / lo
    };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ");
    let (sk, sm) = (spread(&kem), spread(&mkrem));
    Ok((
        sm < sk,
        format!(
            "J_a {:?}, {SWEEP_REALIZATIONS} realizations: AMMSE spread MKREM {:.1}% [{}] vs KEM {:.1}% [{}]",
            cfg.sweep.ja,
            100.0 * sm,
            fmt(&mkrem),
            100.0 * sk,
            fmt(&kem)
        ),
    ))
}

/// MKREM with the dictionary used unmapped in coefficient space.
fn bypass_mapping(suite: &Suite, ds: &Dataset, cfg: &ExperimentConfig) -> Result<String, String> {
    let mut dict = cfg.dictionary;
    dict.mapping = DictionaryMapping::Bypass;
    let setup = RegularizedSetup::build(&ds.phantom.priors, &cfg.kernel, &dict, &cfg.graph).map_err(err)?;
    let rcfg = cfg.recon.config_for(Algorithm::Mkrem);
    let mut e = Ensemble::new(ds, &rcfg, Some(&setup.k_ma), setup.regularizers(), 1)?;
    for _ in 0..40 {
        e.step(suite)?;
    }
    Ok(format!("bypass-mapped MKREM AMSE {:.5} after 40 iterations", e.amse_at(40)))
}

fn demo_determinism(suite: &Suite, scratch: &Path) -> Outcome {
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let out = scratch.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mkrem"))
            .args(["--log", "warn", "demo", "--size", "32", "--realizations", "3", "--iterations", "30", "--seed", "7", "--sweep", "--output"])
            .arg(&out)
            .status()
            .map_err(err)?;
        if !status.success() {
            return Err(format!("demo exited with {status}"));
        }
        Ok(out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut names: Vec<String> = std::fs::read_dir(a.join("report"))
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let x = std::fs::read(a.join("report").join(n)).map_err(err)?;
        let y = std::fs::read(b.join("report").join(n)).map_err(err)?;
        if x != y {
            differing.push(n.clone());
        }
    }
    for alg in Algorithm::ALL {
        let dir = a.join("recon").join(alg.name());
        for entry in std::fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.extension().is_some_and(|e| e == "stack") {
                let (_, _, frames) = mkrem_cli::io::read_stack(&path).map_err(err)?;
                suite.check_images(&frames.iter().map(Vec::as_slice).collect::<Vec<_>>());
            }
        }
    }
    Ok((
        differing.is_empty() && names.len() >= 6,
        format!("{} CSV files compared, {} differ {:?}", names.len(), differing.len(), differing),
    ))
}

fn performance(ds: &Dataset, cfg: &ExperimentConfig) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    pool.install(|| {
        let start = Instant::now();
        let mut kernels = cfg.kernel;
        kernels.g = 2;
        let setup =
            RegularizedSetup::build(&ds.phantom.priors, &kernels, &cfg.dictionary, &cfg.graph).map_err(err)?;
        let built = start.elapsed();
        let rcfg = ReconConfig {
            n_iters: 40,
            ..cfg.recon.config_for(Algorithm::Mkrem)
        };
        let mut rec =
            Reconstructor::new(&ds.model, &rcfg, Some(&setup.k_ma), setup.regularizers(), &ds.realizations[0]).map_err(err)?;
        for _ in 0..40 {
            rec.step().map_err(err)?;
        }
        rec.image().map_err(err)?;
        let total = start.elapsed();
        Ok((
            total < Duration::from_secs(60),
            format!(
                "one thread: setup {:.1} s + 40 iterations {:.1} s = {:.1} s (budget 60 s)",
                built.as_secs_f64(),
                (total - built).as_secs_f64(),
                total.as_secs_f64()
            ),
        ))
    })
}

fn main() {
    let cfg = ExperimentConfig::from_toml(include_str!("../configs/low_count.toml")).expect("shipped config parses");
    let mut suite = Suite {
        failed: Vec::new(),
        nonnegative: Cell::new(true),
        checked_images: Cell::new(0),
    };
    println!(
        "acceptance: {}x{} phantom, {} angles, {} counts, {} realizations",
        cfg.geometry.image_width, cfg.geometry.image_height, cfg.geometry.n_angles, cfg.noise.target_counts, cfg.noise.n_realizations
    );
    let t = Instant::now();
    let ds = simulate(cfg.geometry, &cfg.phantom, &cfg.noise).expect("simulation succeeds");
    let setups = Setups::build(&ds, &cfg, 21).expect("setup builds");
    println!("setup: data and J_a = 21 operators in {:.1} s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let o = reductions(&suite, &ds, &setups);
    suite.record(1, "reduction identities", t, o);
    let t = Instant::now();
    let o = em_monotonicity(&suite, &ds);
    suite.record(2, "MLEM log-likelihood monotone", t, o);
    let t = Instant::now();
    suite.record(3, "adjoint and dense oracles", t, oracles(&ds));
    let t = Instant::now();
    suite.record(4, "OMP exactness", t, omp_exactness());
    let t = Instant::now();
    suite.record(5, "K-SVD monotone", t, ksvd_monotonicity(&ds, &cfg));
    let t = Instant::now();
    suite.record(6, "graph invariants", t, graph_invariants(&ds, &cfg, &setups));

    let t = Instant::now();
    match ordering(&suite, &ds, &cfg, &setups) {
        Ok((o, mut mkrem)) => {
            let under_budget = t.elapsed() < Duration::from_secs(15 * 60);
            let o = o.map(|(pass, d)| (pass && under_budget, d));
            suite.record(7, "low-count AMSE ordering", t, o);
            let t = Instant::now();
            let o = stability(&suite, &ds, &setups, &cfg, &mut mkrem);
            suite.record(8, "stability past the minimum", t, o);
        }
        Err(e) => {
            suite.record(7, "low-count AMSE ordering", t, Err(e.clone()));
            suite.record(8, "stability past the minimum", t, Err(e));
        }
    }
    let t = Instant::now();
    let o = kernel_width_sweep(&suite, &ds, &cfg, &setups);
    suite.record(9, "kernel width sensitivity", t, o);

    let scratch = tempfile::tempdir().expect("temporary directory");
    let t = Instant::now();
    let determinism = demo_determinism(&suite, scratch.path());

    let t10 = Instant::now();
    let nonneg = bypass_mapping(&suite, &ds, &cfg).map(|bypass| {
        (
            suite.nonnegative.get(),
            format!("{} recorded images checked, including {bypass}", suite.checked_images.get()),
        )
    });
    suite.record(10, "nonnegativity", t10, nonneg);
    suite.record(11, "demo determinism", t, determinism);
    let t = Instant::now();
    suite.record(12, "performance envelope", t, performance(&ds, &cfg));

    let unexpected: Vec<u32> = suite.failed.iter().copied().filter(|id| !KNOWN_FAILURES.contains(id)).collect();
    println!(
        "acceptance: {} of 12 criteria passed; failing {:?}, unexpected {:?}",
        12 - suite.failed.len(),
        suite.failed,
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
