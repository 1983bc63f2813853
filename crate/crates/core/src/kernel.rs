//! Kernel matrices built from anatomical prior images.
//!
//! A kernel matrix `K` represents the activity image as `x = K a`. Entry
//! `K(i, j)` is a kernel function of the prior-image feature vectors of voxels
//! `i` and `j`, restricted to a spatial window (or the k nearest neighbours in
//! feature space). Multi-kernel matrices are ordered products of such factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{spmm, DenseLu, RowBuilder, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum KernelKind {
    /// `exp(-|u - v|^2 / (2 sigma^2))`
    Gaussian { sigma: f64 },
    /// `(u.v + gamma)^degree`
    Polynomial { gamma: f64, degree: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// Square spatial window of odd width `J` centred on the voxel.
    Window(usize),
    /// The `k` nearest voxels in feature space, the voxel itself included.
    Knn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Intensity,
    /// `w x w` patch of z-scored prior intensities (replicated border).
    Patch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub neighborhood: Neighborhood,
    pub feature: Feature,
    pub normalize_rows: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::Gaussian { sigma: 0.5 },
            neighborhood: Neighborhood::Window(21),
            feature: Feature::Patch(3),
            normalize_rows: true,
        }
    }
}

impl KernelSpec {
    pub fn gaussian_window(sigma: f64, window: usize) -> Self {
        Self {
            kind: KernelKind::Gaussian { sigma },
            neighborhood: Neighborhood::Window(window),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Gaussian { sigma } if !(sigma > 0.0) => {
                return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")))
            }
            KernelKind::Polynomial { degree, .. } if !(degree >= 1.0) => {
                return Err(Error::InvalidParameter(format!("degree must be >= 1, got {degree}")))
            }
            _ => {}
        }
        match self.neighborhood {
            Neighborhood::Window(j) if j == 0 || j % 2 == 0 => {
                return Err(Error::InvalidParameter(format!("window width J must be odd and >= 1, got {j}")))
            }
            Neighborhood::Knn(0) => return Err(Error::InvalidParameter("knn must be >= 1".into())),
            _ => {}
        }
        if let Feature::Patch(w) = self.feature {
            if w == 0 || w % 2 == 0 {
                return Err(Error::InvalidParameter(format!("feature patch width must be odd, got {w}")));
            }
        }
        Ok(())
    }
}

/// Ordered list of kernel factors, `K_M = K_1 K_2 ... K_G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiKernelSpec {
    pub factors: Vec<KernelSpec>,
}

impl MultiKernelSpec {
    pub fn repeated(spec: KernelSpec, g: usize) -> Self {
        Self {
            factors: vec![spec; g],
        }
    }
}

pub fn kernel_value(kind: &KernelKind, u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    match *kind {
        KernelKind::Gaussian { sigma } => {
            let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
        KernelKind::Polynomial { gamma, degree } => {
            let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            (d + gamma).powf(degree)
        }
    }
}

/// Per-voxel feature vectors, row-major `n_voxels x dim`.
#[derive(Debug, Clone)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn zscore(img: &Image) -> Image {
    let n = img.len() as f64;
    let mean = img.sum() / n;
    let var = img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    img.with_data(img.data().iter().map(|v| (v - mean) / sd).collect())
        .expect("same shape")
}

/// Feature vectors of every voxel, concatenated over the prior images.
pub fn kernel_features(priors: &[Image], feature: Feature) -> Result<Features> {
    let first = priors
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one prior image is required".into()))?;
    if priors.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::InvalidParameter("prior images differ in shape".into()));
    }
    let (w, h) = (first.width(), first.height());
    let half = match feature {
        Feature::Intensity => 0,
        Feature::Patch(pw) => (pw / 2) as isize,
    };
    let per_prior = ((2 * half + 1) * (2 * half + 1)) as usize;
    let dim = per_prior * priors.len();
    let normalized: Vec<Image> = priors.iter().map(zscore).collect();
    let mut data = Vec::with_capacity(w * h * dim);
    for row in 0..h as isize {
        for col in 0..w as isize {
            for img in &normalized {
                for dr in -half..=half {
                    for dc in -half..=half {
                        data.push(img.at_clamped(row + dr, col + dc));
                    }
                }
            }
        }
    }
    Ok(Features { dim, data })
}

fn knn_indices(features: &Features, i: usize, k: usize) -> Vec<usize> {
    let fi = features.get(i);
    let mut dists: Vec<(f64, usize)> = (0..features.len())
        .map(|j| {
            let d: f64 = fi
                .iter()
                .zip(features.get(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, j)
        })
        .collect();
    let k = k.min(dists.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, cmp);
        dists.truncate(k);
    }
    let mut idx: Vec<usize> = dists.into_iter().map(|(_, j)| j).collect();
    idx.sort_unstable();
    idx
}

/// Single-kernel matrix over the prior images.
pub fn build_single_kernel(priors: &[Image], spec: &KernelSpec) -> Result<SparseMatrix> {
    spec.validate()?;
    let features = kernel_features(priors, spec.feature)?;
    let (w, h) = (priors[0].width(), priors[0].height());
    let m = w * h;
    let mut b = RowBuilder::new(m, m);
    for i in 0..m {
        let fi = features.get(i);
        let push = |j: usize, b: &mut RowBuilder| {
            let v = kernel_value(&spec.kind, fi, features.get(j));
            if v != 0.0 {
                b.push(j, v);
            }
        };
        match spec.neighborhood {
            Neighborhood::Window(jw) => {
                let half = (jw / 2) as isize;
                let (row, col) = ((i / w) as isize, (i % w) as isize);
                for r in (row - half).max(0)..=(row + half).min(h as isize - 1) {
                    for c in (col - half).max(0)..=(col + half).min(w as isize - 1) {
                        push(r as usize * w + c as usize, &mut b);
                    }
                }
            }
            Neighborhood::Knn(k) => {
                for j in knn_indices(&features, i, k) {
                    push(j, &mut b);
                }
            }
        }
        b.finish_row();
    }
    let mut k = b.build();
    if let Some(i) = (0..m).find(|&i| k.row_nnz(i) == 0) {
        return Err(Error::Degenerate(format!("kernel row {i} has an empty neighborhood")));
    }
    if spec.normalize_rows {
        k.normalize_rows()?;
    }
    Ok(k)
}

/// Ordered product of the factor kernel matrices.
pub fn build_multi_kernel(priors: &[Image], mspec: &MultiKernelSpec) -> Result<SparseMatrix> {
    if mspec.factors.is_empty() {
        return Err(Error::InvalidParameter("multi-kernel needs G >= 1 factors".into()));
    }
    build_kernel_operator(priors, mspec)?.to_matrix()
}

/// Kernel matrix kept as its ordered factors, `K = F_1 F_2 ... F_G`.
///
/// Applying the factors one after the other is cheaper than applying the
/// (much denser) explicit product.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    factors: Vec<SparseMatrix>,
}

impl KernelOperator {
    pub fn from_factors(factors: Vec<SparseMatrix>) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| Error::InvalidParameter("kernel operator needs at least one factor".into()))?;
        let n = first.n_rows();
        for f in &factors {
            if f.n_rows() != n || f.n_cols() != n {
                return Err(Error::DimensionMismatch {
                    op: "KernelOperator",
                    expected: n,
                    found: if f.n_rows() != n { f.n_rows() } else { f.n_cols() },
                });
            }
        }
        Ok(Self { factors })
    }

    pub fn n(&self) -> usize {
        self.factors[0].n_rows()
    }

    pub fn factors(&self) -> &[SparseMatrix] {
        &self.factors
    }

    /// `K v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for f in self.factors.iter().rev() {
            f.mul_vec_into(&out, &mut tmp);
            std::mem::swap(&mut out, &mut tmp);
        }
        out
    }

    /// `K^T v`
    pub fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for f in &self.factors {
            f.tmul_vec_into(&out, &mut tmp);
            std::mem::swap(&mut out, &mut tmp);
        }
        out
    }

    /// Explicit product of the factors.
    pub fn to_matrix(&self) -> Result<SparseMatrix> {
        let mut product = self.factors[0].clone();
        for f in &self.factors[1..] {
            product = spmm(&product, f)?;
        }
        Ok(product)
    }
}

impl From<SparseMatrix> for KernelOperator {
    fn from(k: SparseMatrix) -> Self {
        Self { factors: vec![k] }
    }
}

/// Factor matrices of a multi-kernel, built once per distinct spec.
pub fn build_kernel_operator(priors: &[Image], mspec: &MultiKernelSpec) -> Result<KernelOperator> {
    let mut cache: Vec<(KernelSpec, SparseMatrix)> = Vec::new();
    let mut factors = Vec::with_capacity(mspec.factors.len());
    for spec in &mspec.factors {
        let k = match cache.iter().find(|(s, _)| s == spec) {
            Some((_, k)) => k.clone(),
            None => {
                let k = build_single_kernel(priors, spec)?;
                cache.push((*spec, k.clone()));
                k
            }
        };
        factors.push(k);
    }
    KernelOperator::from_factors(factors)
}

/// Result of [`factorize`].
#[derive(Debug, Clone)]
pub struct Factorization {
    pub k_tilde: SparseMatrix,
    /// Ridge actually used in `(K_Ma + ridge I) K~ = K_Mb`.
    pub ridge: f64,
    /// `|K_Ma K~ - K_Mb|_F / |K_Mb|_F`.
    pub residual: f64,
}

/// Tolerance on the factorization residual accepted by [`factorize`].
pub const FACTORIZE_TOLERANCE: f64 = 1e-6;

/// Default ridge, `1e-8 * trace(K_Ma) / M`.
pub fn default_ridge(k_ma: &SparseMatrix) -> f64 {
    1e-8 * k_ma.trace().abs() / k_ma.n_rows().max(1) as f64
}

/// Solves `(K_Ma + ridge I) K~ = K_Mb`, multiplying the ridge by 100 (up to
/// six times) whenever the shifted solve fails to converge. Returns the
/// factor whatever its unshifted residual; see [`factorize`] for the checked
/// version.
pub fn factorize_regularized(
    k_ma: &SparseMatrix,
    k_mb: &SparseMatrix,
    ridge: Option<f64>,
) -> Result<Factorization> {
    if !k_ma.is_square() {
        return Err(Error::NotSquare {
            op: "factorize",
            rows: k_ma.n_rows(),
            cols: k_ma.n_cols(),
        });
    }
    crate::error::check_len("factorize", k_ma.n_rows(), k_mb.n_rows())?;
    let base = ridge.unwrap_or_else(|| default_ridge(k_ma));
    let mut last_err = None;
    for attempt in 0..7 {
        let eps = if attempt == 0 { base } else { base.max(1e-300) * 100f64.powi(attempt) };
        let lu = DenseLu::factor(k_ma, eps)?;
        match lu.solve_columns(k_mb) {
            Ok(sol) => {
                // B - K_Ma X = (B - (K_Ma + eps I) X) + eps X
                let unshifted = &sol.residual + &sol.x * faer::Scale(eps);
                let residual = if sol.b_norm == 0.0 { 0.0 } else { unshifted.norm_l2() / sol.b_norm };
                if attempt > 0 {
                    log::warn!("factorize: ridge raised to {eps:.3e} (residual {residual:.3e})");
                }
                return Ok(Factorization {
                    k_tilde: sol.sparse_solution(),
                    ridge: eps,
                    residual,
                });
            }
            Err(e @ Error::NotConverged { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Kernel matrix factorization `K_Mb = K_Ma K~`.
///
/// Fails with `NotConverged` when the residual `|K_Ma K~ - K_Mb|_F / |K_Mb|_F`
/// exceeds [`FACTORIZE_TOLERANCE`].
pub fn factorize(k_ma: &SparseMatrix, k_mb: &SparseMatrix, ridge: Option<f64>) -> Result<Factorization> {
    let f = factorize_regularized(k_ma, k_mb, ridge)?;
    if f.residual > FACTORIZE_TOLERANCE {
        return Err(Error::NotConverged {
            op: "factorize",
            residual: f.residual,
        });
    }
    Ok(f)
}
