//! EM reconstruction: MLEM, MLEM with post-filter, and the kernelized
//! KEM / KREM / MKREM updates.
//!
//! The kernelized updates iterate on a coefficient field `a` with image
//! `x = K a`. The regularized update is one-step-late:
//!
//! ```text
//! a' = a * K^T H^T (p / (H K a + r)) / K^T (H^T 1 + b1 (a - D c) + b2 Q_a a)
//! ```
//!
//! with the denominator floored at a small positive value.

use serde::{Deserialize, Serialize};

use crate::dictionary::{code_coefficients, Dictionary, PatchOperator};
use crate::error::{check_len, Error, Result};
use crate::graph::LaplacianPack;
use crate::image::Image;
use crate::kernel::KernelOperator;
use crate::projector::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mlem,
    MlemF,
    Kem,
    Krem,
    Mkrem,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Mlem,
        Algorithm::MlemF,
        Algorithm::Kem,
        Algorithm::Krem,
        Algorithm::Mkrem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mlem => "mlem",
            Algorithm::MlemF => "mlem_f",
            Algorithm::Kem => "kem",
            Algorithm::Krem => "krem",
            Algorithm::Mkrem => "mkrem",
        }
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, Algorithm::Kem | Algorithm::Krem | Algorithm::Mkrem)
    }

    pub fn is_regularized(self) -> bool {
        matches!(self, Algorithm::Krem | Algorithm::Mkrem)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    pub n_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Denominator floor; `None` uses `1e-8 * mean(K^T H^T 1)`.
    pub denom_floor: Option<f64>,
    pub record_every: usize,
    pub seed: u64,
    /// Add the regularizer gradient after the `K^T` product instead of inside it.
    pub outside_kt: bool,
    /// Post-filter for `mlem_f`.
    pub filter_sigma: f64,
    pub filter_window: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mkrem,
            n_iters: 100,
            beta1: 0.003,
            beta2: 0.13,
            denom_floor: None,
            record_every: 1,
            seed: 0,
            outside_kt: false,
            filter_sigma: 1.0,
            filter_window: 5,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.record_every == 0 {
            return Err(Error::InvalidParameter("n_iters and record_every must be >= 1".into()));
        }
        if !(self.beta1 >= 0.0) || !(self.beta2 >= 0.0) {
            return Err(Error::InvalidParameter("beta1 and beta2 must be >= 0".into()));
        }
        if let Some(f) = self.denom_floor {
            if !(f > 0.0) {
                return Err(Error::InvalidParameter("denom_floor must be > 0".into()));
            }
        }
        if !(self.filter_sigma > 0.0) || self.filter_window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "filter_sigma must be > 0 and filter_window odd".into(),
            ));
        }
        Ok(())
    }
}

/// Floor applied to the forward projection before dividing the data by it.
const RATIO_FLOOR: f64 = 1e-12;

/// Measured data, forward model, optional kernel and the cached
/// sensitivity `K^T H^T 1`.
#[derive(Debug, Clone)]
pub struct EmProblem<'a> {
    pub model: &'a SystemModel,
    pub data: &'a [f64],
    pub kernel: Option<&'a KernelOperator>,
    sensitivity: Vec<f64>,
    floor: f64,
}

impl<'a> EmProblem<'a> {
    pub fn new(
        model: &'a SystemModel,
        data: &'a [f64],
        kernel: Option<&'a KernelOperator>,
        denom_floor: Option<f64>,
    ) -> Result<Self> {
        check_len("EmProblem (data)", model.n_bins(), data.len())?;
        if data.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("measured data must be finite and >= 0".into()));
        }
        if let Some(k) = kernel {
            check_len("EmProblem (kernel)", model.n_voxels(), k.n())?;
        }
        let sens = model.sensitivity();
        let sensitivity = match kernel {
            Some(k) => k.apply_t(&sens),
            None => sens,
        };
        let mean = sensitivity.iter().sum::<f64>() / sensitivity.len() as f64;
        let floor = match denom_floor {
            Some(f) => f,
            None => (1e-8 * mean).max(f64::MIN_POSITIVE),
        };
        Ok(Self {
            model,
            data,
            kernel,
            sensitivity,
            floor,
        })
    }

    pub fn n(&self) -> usize {
        self.sensitivity.len()
    }

    pub fn sensitivity(&self) -> &[f64] {
        &self.sensitivity
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Image `x = K a` (or `a` itself without a kernel).
    pub fn image(&self, a: &[f64]) -> Vec<f64> {
        match self.kernel {
            Some(k) => k.apply(a),
            None => a.to_vec(),
        }
    }

    fn kt(&self, v: &[f64]) -> Vec<f64> {
        match self.kernel {
            Some(k) => k.apply_t(v),
            None => v.to_vec(),
        }
    }

    /// `K^T H^T (p / (H K a + r))`
    pub fn backprojected_ratio(&self, a: &[f64]) -> Result<Vec<f64>> {
        check_len("em_step", self.n(), a.len())?;
        self.backprojected_ratio_image(&self.image(a))
    }

    fn backprojected_ratio_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fwd = self.model.forward(x)?;
        let ratio: Vec<f64> = self
            .data
            .iter()
            .zip(&fwd)
            .map(|(p, q)| if *p == 0.0 { 0.0 } else { p / q.max(RATIO_FLOOR) })
            .collect();
        Ok(self.kt(&self.model.backproject(&ratio)?))
    }

    /// One EM update with an optional one-step-late penalty gradient.
    ///
    /// The gradient lives in image space when `outside_kt` is false and is
    /// passed through `K^T` with the sensitivity; otherwise it is added to
    /// the coefficient-space denominator as is.
    pub fn step(&self, a: &[f64], penalty_grad: Option<&[f64]>, outside_kt: bool) -> Result<Vec<f64>> {
        check_len("em_step", self.n(), a.len())?;
        self.step_with_image(a, &self.image(a), penalty_grad, outside_kt)
    }

    /// [`step`](Self::step) with `x = K a` supplied by the caller.
    pub fn step_with_image(
        &self,
        a: &[f64],
        x: &[f64],
        penalty_grad: Option<&[f64]>,
        outside_kt: bool,
    ) -> Result<Vec<f64>> {
        check_len("em_step", self.n(), a.len())?;
        let num = self.backprojected_ratio_image(x)?;
        let den: Vec<f64> = match penalty_grad {
            None => self.sensitivity.clone(),
            Some(g) => {
                check_len("em_step (gradient)", self.n(), g.len())?;
                let g = if outside_kt { g.to_vec() } else { self.kt(g) };
                self.sensitivity.iter().zip(&g).map(|(s, g)| s + g).collect()
            }
        };
        Ok(a.iter()
            .zip(&num)
            .zip(&den)
            .map(|((a, n), d)| (a * n / d.max(self.floor)).max(0.0))
            .collect())
    }

    /// Poisson log-likelihood `sum(p log p_bar - p_bar)` of the image `K a`.
    pub fn log_likelihood(&self, a: &[f64]) -> Result<f64> {
        check_len("log_likelihood", self.n(), a.len())?;
        log_likelihood(self.model, self.data, &self.image(a))
    }
}

/// Poisson log-likelihood without the constant `log p!` term.
pub fn log_likelihood(model: &SystemModel, data: &[f64], x: &[f64]) -> Result<f64> {
    check_len("log_likelihood", model.n_bins(), data.len())?;
    let fwd = model.forward(x)?;
    Ok(data
        .iter()
        .zip(&fwd)
        .map(|(&p, &q)| {
            if p == 0.0 {
                -q
            } else if q <= 0.0 {
                f64::NEG_INFINITY
            } else {
                p * q.ln() - q
            }
        })
        .sum())
}

/// One (optionally penalized) MLEM update of the image `x`.
pub fn mlem_step(
    model: &SystemModel,
    data: &[f64],
    x: &[f64],
    prior_grad: Option<&[f64]>,
    denom_floor: Option<f64>,
) -> Result<Vec<f64>> {
    EmProblem::new(model, data, None, denom_floor)?.step(x, prior_grad, true)
}

/// One unregularized kernel EM update of the coefficients `a`.
pub fn kem_step(model: &SystemModel, data: &[f64], k: &KernelOperator, a: &[f64]) -> Result<Vec<f64>> {
    EmProblem::new(model, data, Some(k), None)?.step(a, None, false)
}

/// Dictionary prior: coefficient-space atoms, patch geometry and the OMP
/// sparsity used for per-iteration coding.
#[derive(Debug, Clone, Copy)]
pub struct DictionaryPrior<'a> {
    pub dictionary: &'a Dictionary,
    pub patches: PatchOperator,
    pub sparsity: usize,
}

impl DictionaryPrior<'_> {
    /// `D_a c` for the current coefficient field.
    pub fn code(&self, a: &[f64]) -> Result<Vec<f64>> {
        code_coefficients(self.dictionary, a, &self.patches, self.sparsity)
    }
}

/// Regularizers of the KREM / MKREM update.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regularizers<'a> {
    pub dictionary: Option<DictionaryPrior<'a>>,
    pub laplacian: Option<&'a LaplacianPack>,
}

/// Penalty gradient `b1 (a - dict_field) + b2 Q_a a`.
pub fn penalty_gradient(
    problem: &EmProblem<'_>,
    a: &[f64],
    dict_field: &[f64],
    laplacian: Option<&LaplacianPack>,
    beta1: f64,
    beta2: f64,
) -> Result<Vec<f64>> {
    penalty_gradient_with_image(problem, a, &problem.image(a), dict_field, laplacian, beta1, beta2)
}

fn penalty_gradient_with_image(
    problem: &EmProblem<'_>,
    a: &[f64],
    x: &[f64],
    dict_field: &[f64],
    laplacian: Option<&LaplacianPack>,
    beta1: f64,
    beta2: f64,
) -> Result<Vec<f64>> {
    check_len("penalty_gradient", a.len(), dict_field.len())?;
    let mut g: Vec<f64> = a.iter().zip(dict_field).map(|(a, d)| beta1 * (a - d)).collect();
    if let Some(lap) = laplacian {
        let k = problem
            .kernel
            .ok_or_else(|| Error::InvalidParameter("graph penalty needs a kernel matrix".into()))?;
        let qa = lap.apply_q_a_image(k, x)?;
        g.iter_mut().zip(&qa).for_each(|(g, q)| *g += beta2 * q);
    }
    Ok(g)
}

/// One regularized multi-kernel EM update.
pub fn mkrem_step(
    problem: &EmProblem<'_>,
    a: &[f64],
    dict_field: &[f64],
    laplacian: Option<&LaplacianPack>,
    beta1: f64,
    beta2: f64,
    outside_kt: bool,
) -> Result<Vec<f64>> {
    check_len("mkrem_step", problem.n(), a.len())?;
    let x = problem.image(a);
    let g = penalty_gradient_with_image(problem, a, &x, dict_field, laplacian, beta1, beta2)?;
    problem.step_with_image(a, &x, Some(&g), outside_kt)
}

/// 2-D Gaussian smoothing with a `window x window` kernel normalized to sum
/// one and replicated borders.
pub fn gaussian_postfilter(x: &Image, window: usize, sigma: f64) -> Result<Image> {
    if window == 0 || window.is_multiple_of(2) || !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "filter needs an odd window and sigma > 0, got {window} and {sigma}"
        )));
    }
    let half = (window / 2) as isize;
    let mut weights = Vec::with_capacity(window * window);
    for dr in -half..=half {
        for dc in -half..=half {
            weights.push((-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let (w, h) = (x.width() as isize, x.height() as isize);
    let mut out = Vec::with_capacity(x.len());
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut k = 0;
            for dr in -half..=half {
                for dc in -half..=half {
                    acc += weights[k] * x.at_clamped(r + dr, c + dc);
                    k += 1;
                }
            }
            out.push(acc);
        }
    }
    x.with_data(out)
}

/// Recorded iterates of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub algorithm: Algorithm,
    /// 1-based iteration numbers of the recorded images.
    pub iterations: Vec<usize>,
    pub images: Vec<Vec<f64>>,
    /// Final image (post-filtered for `mlem_f`).
    pub final_image: Vec<f64>,
    /// Final EM iterate: the coefficients, or the unfiltered image.
    pub final_iterate: Vec<f64>,
}

/// Iteration state of one reconstruction, advanced one EM update at a time.
pub struct Reconstructor<'a> {
    problem: EmProblem<'a>,
    cfg: ReconConfig,
    regs: Regularizers<'a>,
    width: usize,
    height: usize,
    a: Vec<f64>,
    n: usize,
}

impl<'a> Reconstructor<'a> {
    /// Starts from the all-ones field.
    ///
    /// `kernel` is required by the kernel methods; KREM and MKREM also need
    /// the regularizers whose weights are nonzero.
    pub fn new(
        model: &'a SystemModel,
        cfg: &ReconConfig,
        kernel: Option<&'a KernelOperator>,
        regs: Regularizers<'a>,
        data: &'a [f64],
    ) -> Result<Self> {
        cfg.validate()?;
        let alg = cfg.algorithm;
        let kernel = if alg.uses_kernel() {
            Some(kernel.ok_or_else(|| Error::InvalidParameter(format!("{alg} needs a kernel matrix")))?)
        } else {
            None
        };
        if alg.is_regularized() {
            if cfg.beta1 > 0.0 && regs.dictionary.is_none() {
                return Err(Error::InvalidParameter(format!("{alg} with beta1 > 0 needs a dictionary")));
            }
            if cfg.beta2 > 0.0 && regs.laplacian.is_none() {
                return Err(Error::InvalidParameter(format!("{alg} with beta2 > 0 needs a graph Laplacian")));
            }
        }
        let problem = EmProblem::new(model, data, kernel, cfg.denom_floor)?;
        let a = vec![1.0; problem.n()];
        Ok(Self {
            problem,
            cfg: *cfg,
            regs,
            width: model.geometry.image_width,
            height: model.geometry.image_height,
            a,
            n: 0,
        })
    }

    /// Number of updates performed so far.
    pub fn iteration(&self) -> usize {
        self.n
    }

    /// Current EM iterate (coefficients for the kernel methods).
    pub fn iterate(&self) -> &[f64] {
        &self.a
    }

    pub fn into_iterate(self) -> Vec<f64> {
        self.a
    }

    /// Continues from a saved iterate instead of the all-ones start.
    pub fn resume(&mut self, a: Vec<f64>, iteration: usize) -> Result<()> {
        check_len("Reconstructor::resume", self.problem.n(), a.len())?;
        if a.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("iterate must be finite and >= 0".into()));
        }
        self.a = a;
        self.n = iteration;
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let a = &self.a;
        let next = if cfg.algorithm.is_regularized() {
            let dict_field = match self.regs.dictionary {
                Some(d) if cfg.beta1 > 0.0 => d.code(a)?,
                _ => a.clone(),
            };
            let lap = if cfg.beta2 > 0.0 { self.regs.laplacian } else { None };
            mkrem_step(&self.problem, a, &dict_field, lap, cfg.beta1, cfg.beta2, cfg.outside_kt)?
        } else {
            self.problem.step(a, None, false)?
        };
        self.n += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "{}: non-finite iterate at iteration {}",
                cfg.algorithm, self.n
            )));
        }
        self.a = next;
        Ok(())
    }

    /// Current image, post-filtered for `mlem_f`.
    pub fn image(&self) -> Result<Vec<f64>> {
        let x = self.problem.image(&self.a);
        if self.cfg.algorithm == Algorithm::MlemF {
            let img = Image::new(self.width, self.height, x)?;
            Ok(gaussian_postfilter(&img, self.cfg.filter_window, self.cfg.filter_sigma)?.into_data())
        } else {
            Ok(x)
        }
    }
}

/// Runs the configured algorithm from an all-ones start, recording the image
/// every `record_every` iterations. `mlem_f` records the post-filtered image
/// at every record point.
pub fn run(
    model: &SystemModel,
    cfg: &ReconConfig,
    kernel: Option<&KernelOperator>,
    regs: Regularizers<'_>,
    data: &[f64],
) -> Result<ReconResult> {
    let mut rec = Reconstructor::new(model, cfg, kernel, regs, data)?;
    let mut result = ReconResult {
        algorithm: cfg.algorithm,
        iterations: Vec::new(),
        images: Vec::new(),
        final_image: Vec::new(),
        final_iterate: Vec::new(),
    };
    for n in 1..=cfg.n_iters {
        rec.step()?;
        if n % cfg.record_every == 0 {
            result.iterations.push(n);
            result.images.push(rec.image()?);
        }
    }
    result.final_image = rec.image()?;
    result.final_iterate = rec.into_iterate();
    Ok(result)
}
