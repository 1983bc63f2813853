//! Image-graph Laplacian used by the quadratic smoothness regularizer.
//!
//! Voxels are graph nodes described by the zero-padded window of prior
//! intensities around them. Affinities with an adaptive per-node bandwidth
//! are symmetrized and row-normalized into a Markov matrix `Z`, and the
//! Laplacian is `Q = I - Z^t`. In coefficient space the regularizer uses
//! `Q_a = K_Ma^T Q K_Ma`, which is applied as an operator rather than formed.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::kernel::{Features, KernelOperator};
use crate::linalg::{add, dot, spmm, RowBuilder, SparseMatrix};
use crate::par::map_range;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    /// Elements per feature window, a perfect square.
    pub window_m: usize,
    /// Neighbour rank that sets each node's bandwidth.
    pub knn: usize,
    /// Neighbours kept per node; `None` keeps the dense graph.
    pub knn_graph: Option<usize>,
    pub eps_t: f64,
    pub t_max: usize,
    /// Use `(Q_a + Q_a^T) / 2` in the regularizer gradient.
    pub symmetrize_q: bool,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            window_m: 9,
            knn: 7,
            knn_graph: Some(32),
            eps_t: 1e-4,
            t_max: 20,
            symmetrize_q: false,
        }
    }
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        let side = (self.window_m as f64).sqrt().round() as usize;
        if self.window_m == 0 || side * side != self.window_m || side.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "window_m must be an odd perfect square, got {}",
                self.window_m
            )));
        }
        if self.knn == 0 {
            return Err(Error::InvalidParameter("knn must be >= 1".into()));
        }
        if let Some(g) = self.knn_graph {
            if g < self.knn + 1 {
                return Err(Error::InvalidParameter(format!(
                    "knn_graph ({g}) must be at least knn + 1 ({})",
                    self.knn + 1
                )));
            }
        }
        if !(self.eps_t > 0.0) {
            return Err(Error::InvalidParameter("eps_t must be > 0".into()));
        }
        if self.t_max == 0 {
            return Err(Error::InvalidParameter("t_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row `i` holds the `sqrt(m) x sqrt(m)` window centred on voxel `i`,
/// zero outside the image.
pub fn feature_windows(img: &Image, window_m: usize) -> Result<Features> {
    let side = (window_m as f64).sqrt().round() as usize;
    if window_m == 0 || side * side != window_m || side.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "window_m must be an odd perfect square, got {window_m}"
        )));
    }
    let half = (side / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut data = Vec::with_capacity(img.len() * window_m);
    for r in 0..h {
        for c in 0..w {
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    let inside = rr >= 0 && cc >= 0 && rr < h && cc < w;
                    data.push(if inside { img.at(rr as usize, cc as usize) } else { 0.0 });
                }
            }
        }
    }
    Ok(Features { dim: window_m, data })
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Markov transition matrix of the window graph.
///
/// With `knn_graph = Some(g)` each node keeps only its `g` nearest windows
/// (itself included) before symmetrization; `None` uses all pairs.
pub fn markov_matrix(y: &Features, knn: usize, knn_graph: Option<usize>) -> Result<SparseMatrix> {
    let n = y.len();
    if knn == 0 || knn + 1 > n {
        return Err(Error::InvalidParameter(format!("need 1 <= knn < M, got knn={knn}, M={n}")));
    }
    let keep = knn_graph.unwrap_or(n).min(n);
    if keep < knn + 1 {
        return Err(Error::InvalidParameter(format!("knn_graph ({keep}) must be >= knn + 1")));
    }

    // neighbour lists sorted by (distance, index), self first
    let rows: Vec<Vec<(f64, usize)>> = map_range(n, |i| {
        let yi = y.get(i);
        let mut d: Vec<(f64, usize)> = (0..n).map(|j| (dist(yi, y.get(j)), j)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if keep < n {
            d.select_nth_unstable_by(keep - 1, cmp);
            d.truncate(keep);
        }
        d.sort_by(cmp);
        d
    });

    let e_max = rows
        .iter()
        .flat_map(|r| r.iter().map(|e| e.0))
        .fold(0.0f64, f64::max);
    let floor = 1e-12 * e_max;

    let mut b = RowBuilder::new(n, n);
    for row in &rows {
        // the (knn+1)-th smallest distance, the zero self-distance included
        let bw = row[knn].0.max(floor);
        let mut entries: Vec<(usize, f64)> = row
            .iter()
            .map(|&(e, j)| {
                let ratio = if e == 0.0 { 0.0 } else { e / bw };
                (j, (-ratio * ratio).exp())
            })
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        for (j, v) in entries {
            b.push(j, v);
        }
        b.finish_row();
    }
    let w = b.build();
    let mut z = add(&w, &w.transpose(), 1.0)?;
    z.normalize_rows()?;
    Ok(z)
}

/// `Z` averaged over the priors.
pub fn averaged_markov(priors: &[Image], spec: &GraphSpec) -> Result<SparseMatrix> {
    spec.validate()?;
    if priors.is_empty() {
        return Err(Error::InvalidParameter("at least one prior image is required".into()));
    }
    let mut acc: Option<SparseMatrix> = None;
    for p in priors {
        let z = markov_matrix(&feature_windows(p, spec.window_m)?, spec.knn, spec.knn_graph)?;
        acc = Some(match acc {
            None => z,
            Some(a) => add(&a, &z, 1.0)?,
        });
    }
    let mut z = acc.expect("non-empty priors");
    z.scale(1.0 / priors.len() as f64);
    Ok(z)
}

/// Applies `z` to each column of the row-major `n x dim` block.
fn apply_to_columns(z: &SparseMatrix, v: &Features) -> Features {
    let dim = v.dim;
    let mut out = vec![0.0; v.data.len()];
    for i in 0..z.n_rows() {
        let (cols, vals) = z.row(i);
        let o = &mut out[i * dim..(i + 1) * dim];
        for (&j, &zv) in cols.iter().zip(vals) {
            for (a, b) in o.iter_mut().zip(v.get(j as usize)) {
                *a += zv * b;
            }
        }
    }
    Features { dim, data: out }
}

/// Smallest `t >= 1` with `|Z^t Y - Z^(t-1) Y|_F^2 / |Z^(t-1) Y|_F^2 <= eps_t`,
/// or `t_max` (with a warning) when the criterion is never met.
pub fn select_power(z: &SparseMatrix, y: &Features, eps_t: f64, t_max: usize) -> Result<usize> {
    check_len("select_power", z.n_cols(), y.len())?;
    if !z.is_square() {
        return Err(Error::NotSquare {
            op: "select_power",
            rows: z.n_rows(),
            cols: z.n_cols(),
        });
    }
    if t_max == 0 {
        return Err(Error::InvalidParameter("t_max must be >= 1".into()));
    }
    let mut prev = y.clone();
    for t in 1..=t_max {
        let next = apply_to_columns(z, &prev);
        let den = dot(&prev.data, &prev.data);
        let num: f64 = next.data.iter().zip(&prev.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let ratio = if den == 0.0 { 0.0 } else { num / den };
        log::debug!("select_power: t={t} ratio={ratio:.3e}");
        if ratio <= eps_t {
            return Ok(t);
        }
        prev = next;
    }
    log::warn!("select_power: criterion {eps_t:e} not met, using t_max={t_max}");
    Ok(t_max)
}

/// Markov matrix, its power and the kernel-space Laplacian operator.
#[derive(Debug, Clone)]
pub struct LaplacianPack {
    pub z: SparseMatrix,
    z_t: SparseMatrix,
    pub t: usize,
    pub symmetrize: bool,
}

impl LaplacianPack {
    pub fn new(z: SparseMatrix, t: usize, symmetrize: bool) -> Result<Self> {
        if !z.is_square() {
            return Err(Error::NotSquare {
                op: "LaplacianPack",
                rows: z.n_rows(),
                cols: z.n_cols(),
            });
        }
        if t == 0 {
            return Err(Error::InvalidParameter("Laplacian power t must be >= 1".into()));
        }
        let z_t = z.transpose();
        Ok(Self { z, z_t, t, symmetrize })
    }

    pub fn n(&self) -> usize {
        self.z.n_rows()
    }

    /// `Z^t x`
    pub fn diffuse(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for _ in 0..self.t {
            self.z.mul_vec_into(&v, &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
        }
        v
    }

    fn diffuse_t(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for _ in 0..self.t {
            self.z_t.mul_vec_into(&v, &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
        }
        v
    }

    /// `Q x = x - Z^t x`
    pub fn apply_q(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_q", self.n(), x.len())?;
        let d = self.diffuse(x);
        Ok(x.iter().zip(&d).map(|(a, b)| a - b).collect())
    }

    fn apply_q_t(&self, x: &[f64]) -> Vec<f64> {
        let d = self.diffuse_t(x);
        x.iter().zip(&d).map(|(a, b)| a - b).collect()
    }

    /// Regularizer gradient in coefficient space: `Q_a a`, or the symmetric
    /// part `(Q_a + Q_a^T) a / 2` when `symmetrize` is set.
    pub fn apply_q_a(&self, k_ma: &KernelOperator, a: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_q_a", k_ma.n(), a.len())?;
        self.apply_q_a_image(k_ma, &k_ma.apply(a))
    }

    /// `K_Ma^T Q x` for an image `x = K_Ma a` that is already at hand.
    pub fn apply_q_a_image(&self, k_ma: &KernelOperator, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_q_a", self.n(), k_ma.n())?;
        check_len("apply_q_a", self.n(), x.len())?;
        let qx = if self.symmetrize {
            let q1 = self.apply_q(x)?;
            let q2 = self.apply_q_t(x);
            q1.iter().zip(&q2).map(|(u, v)| 0.5 * (u + v)).collect()
        } else {
            self.apply_q(x)?
        };
        Ok(k_ma.apply_t(&qx))
    }

    /// `½ a^T Q_a a`
    pub fn energy(&self, k_ma: &KernelOperator, a: &[f64]) -> Result<f64> {
        check_len("energy", k_ma.n(), a.len())?;
        let x = k_ma.apply(a);
        Ok(0.5 * dot(&x, &self.apply_q(&x)?))
    }

    /// Explicit `Q = I - Z^t`; quadratic in the fill of `Z^t`, meant for small M.
    pub fn q_matrix(&self) -> Result<SparseMatrix> {
        let mut zt = self.z.clone();
        for _ in 1..self.t {
            zt = spmm(&zt, &self.z)?;
        }
        add(&SparseMatrix::identity(self.n()), &zt, -1.0)
    }

    /// Explicit `Q_a = K_Ma^T Q K_Ma` with entries below 1e-14 dropped.
    pub fn q_a_matrix(&self, k_ma: &SparseMatrix) -> Result<SparseMatrix> {
        let q = self.q_matrix()?;
        let qk = spmm(&q, k_ma)?;
        Ok(spmm(&k_ma.transpose(), &qk)?.pruned(1e-14))
    }
}

/// Builds `Z` from the priors, selects `t` and returns the Laplacian pack.
pub fn build_laplacian(priors: &[Image], spec: &GraphSpec) -> Result<LaplacianPack> {
    let z = averaged_markov(priors, spec)?;
    let mut windows = Features {
        dim: spec.window_m * priors.len(),
        data: Vec::new(),
    };
    let per: Vec<Features> = priors
        .iter()
        .map(|p| feature_windows(p, spec.window_m))
        .collect::<Result<_>>()?;
    for i in 0..z.n_rows() {
        for f in &per {
            windows.data.extend_from_slice(f.get(i));
        }
    }
    let t = select_power(&z, &windows, spec.eps_t, spec.t_max)?;
    LaplacianPack::new(z, t, spec.symmetrize_q)
}
