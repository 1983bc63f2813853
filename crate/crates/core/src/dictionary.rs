//! Patch dictionaries in kernel-coefficient space.
//!
//! A dictionary `D_b` is learned with OMP + K-SVD on patches of
//! `B = K_Mb^{-1} X~`, mapped to the coefficient space of `K_Ma` through the
//! factor `K~` (`K_Mb = K_Ma K~`), and used every EM iteration to sparse-code
//! the current coefficient field patch by patch.

use faer::{Mat, Side};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::linalg::{dot, norm2, DenseLu, SparseMatrix};

/// OMP stops once the residual norm drops below this value.
pub const OMP_RESIDUAL_TOL: f64 = 1e-10;

/// How learned atoms are carried into coefficient space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryMapping {
    /// Through the patch-local average of `K~`.
    PatchLocal,
    /// Use the learned atoms unchanged.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySpec {
    pub patch_w: usize,
    pub stride: usize,
    pub n_train: usize,
    pub n_atoms: usize,
    /// Sparsity used while learning.
    pub sparsity: usize,
    /// Sparsity of the per-iteration coding; defaults to `sparsity`.
    pub code_sparsity: Option<usize>,
    pub n_iters: usize,
    pub seed: u64,
    pub mapping: DictionaryMapping,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            patch_w: 5,
            stride: 1,
            n_train: 400,
            n_atoms: 50,
            sparsity: 50,
            code_sparsity: None,
            n_iters: 50,
            seed: 11,
            mapping: DictionaryMapping::PatchLocal,
        }
    }
}

impl DictionarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_w == 0 || self.stride == 0 || self.n_atoms == 0 || self.sparsity == 0 || self.n_iters == 0 {
            return Err(Error::InvalidParameter(
                "patch_w, stride, n_atoms, sparsity and n_iters must all be >= 1".into(),
            ));
        }
        if self.code_sparsity == Some(0) {
            return Err(Error::InvalidParameter("code_sparsity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn coding_sparsity(&self) -> usize {
        self.code_sparsity.unwrap_or(self.sparsity)
    }
}

/// Extraction of square patches on a regular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOperator {
    pub patch_w: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    // keep full coverage when the stride does not divide the extent
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    pos
}

impl PatchOperator {
    pub fn new(patch_w: usize, stride: usize, width: usize, height: usize) -> Result<Self> {
        if patch_w == 0 || stride == 0 {
            return Err(Error::InvalidParameter("patch width and stride must be >= 1".into()));
        }
        if patch_w > width || patch_w > height {
            return Err(Error::InvalidParameter(format!(
                "{patch_w}x{patch_w} patches do not fit in a {width}x{height} image"
            )));
        }
        Ok(Self {
            patch_w,
            stride,
            width,
            height,
        })
    }

    /// Patch dimension `m_p = patch_w^2`.
    pub fn dim(&self) -> usize {
        self.patch_w * self.patch_w
    }

    /// Top-left corners `(row, col)`, row-major.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let rows = axis_positions(self.height, self.patch_w, self.stride);
        let cols = axis_positions(self.width, self.patch_w, self.stride);
        rows.iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn n_patches(&self) -> usize {
        axis_positions(self.height, self.patch_w, self.stride).len()
            * axis_positions(self.width, self.patch_w, self.stride).len()
    }

    /// Flat pixel indices covered by the patch at `(row, col)`, row-major.
    pub fn patch_indices(&self, row: usize, col: usize) -> impl Iterator<Item = usize> + '_ {
        let (w, pw) = (self.width, self.patch_w);
        (0..pw * pw).map(move |k| (row + k / pw) * w + col + k % pw)
    }

    /// Column `k` of the result is the flattened patch at position `k`.
    pub fn extract(&self, img: &[f64]) -> Result<PatchMatrix> {
        check_len("extract_patches", self.width * self.height, img.len())?;
        let positions = self.positions();
        let mut data = Vec::with_capacity(positions.len() * self.dim());
        for &(r, c) in &positions {
            data.extend(self.patch_indices(r, c).map(|i| img[i]));
        }
        Ok(PatchMatrix {
            dim: self.dim(),
            n: positions.len(),
            data,
        })
    }

    /// Overlap-averaged image from a full set of patches.
    pub fn reassemble(&self, patches: &PatchMatrix) -> Result<Vec<f64>> {
        check_len("reassemble_patches (dim)", self.dim(), patches.dim)?;
        let positions = self.positions();
        check_len("reassemble_patches (count)", positions.len(), patches.n)?;
        let mut sum = vec![0.0; self.width * self.height];
        let mut count = vec![0u32; self.width * self.height];
        for (k, &(r, c)) in positions.iter().enumerate() {
            for (v, i) in patches.col(k).iter().zip(self.patch_indices(r, c)) {
                sum[i] += v;
                count[i] += 1;
            }
        }
        Ok(sum
            .iter()
            .zip(&count)
            .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect())
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.width * self.height];
        for (r, c) in self.positions() {
            for i in self.patch_indices(r, c) {
                count[i] += 1;
            }
        }
        count
    }
}

/// Column-major `dim x n` matrix of patch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub dim: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl PatchMatrix {
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * columns.len());
        for c in columns {
            check_len("PatchMatrix::from_columns", dim, c.len())?;
            data.extend_from_slice(c);
        }
        Ok(Self {
            dim,
            n: columns.len(),
            data,
        })
    }

    #[inline]
    pub fn col(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn col_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Keeps the listed columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(cols.len() * self.dim);
        for &k in cols {
            data.extend_from_slice(self.col(k));
        }
        Self {
            dim: self.dim,
            n: cols.len(),
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }
}

/// Dictionary of unit-norm atoms stored column-major (`dim x n_atoms`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: PatchMatrix,
}

impl Dictionary {
    /// Wraps the given atoms, normalizing each to unit norm.
    pub fn new(mut atoms: PatchMatrix) -> Result<Self> {
        for k in 0..atoms.n {
            let col = atoms.col_mut(k);
            let n = norm2(col);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Degenerate(format!("dictionary atom {k} has zero norm")));
            }
            col.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { atoms })
    }

    pub fn dim(&self) -> usize {
        self.atoms.dim
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.n
    }

    #[inline]
    pub fn atom(&self, k: usize) -> &[f64] {
        self.atoms.col(k)
    }

    pub fn atoms(&self) -> &PatchMatrix {
        &self.atoms
    }

    /// `D c` for a sparse code.
    pub fn synthesize(&self, code: &SparseCode) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (&k, &c) in code.indices.iter().zip(&code.values) {
            for (o, a) in out.iter_mut().zip(self.atom(k)) {
                *o += c * a;
            }
        }
        out
    }
}

/// Sparse coefficient vector: atom indices (in selection order) and values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Orthogonal matching pursuit.
///
/// Greedily adds the atom most correlated with the residual (ties go to the
/// lowest index) and refits all selected coefficients by least squares, for
/// at most `s` atoms. Atoms that would make the selected set rank deficient
/// are skipped.
pub fn omp(dict: &Dictionary, y: &[f64], s: usize) -> Result<SparseCode> {
    check_len("omp", dict.dim(), y.len())?;
    if s == 0 {
        return Err(Error::InvalidParameter("sparsity must be >= 1".into()));
    }
    Ok(omp_unchecked(dict, y, s))
}

fn omp_unchecked(dict: &Dictionary, y: &[f64], s: usize) -> SparseCode {
    let mut ws = OmpWorkspace::new(dict, s);
    ws.run(dict, y);
    ws.code()
}

/// Reusable OMP state for one dictionary: the atom Gram matrix plus scratch
/// buffers, so coding many signals allocates nothing per signal.
struct OmpWorkspace {
    n_atoms: usize,
    s: usize,
    gram: Vec<f64>,
    alpha: Vec<f64>,
    excluded: Vec<bool>,
    /// Lower-triangular Cholesky factor, row stride `s`.
    chol: Vec<f64>,
    support: Vec<usize>,
    coef: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
    residual: Vec<f64>,
}

impl OmpWorkspace {
    fn new(dict: &Dictionary, s: usize) -> Self {
        let n = dict.n_atoms();
        let s = s.min(n);
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let g = dot(dict.atom(i), dict.atom(j));
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        Self {
            n_atoms: n,
            s,
            gram,
            alpha: vec![0.0; n],
            excluded: vec![false; n],
            chol: vec![0.0; s * s],
            support: Vec::with_capacity(s),
            coef: vec![0.0; s],
            z: vec![0.0; s],
            w: vec![0.0; s],
            residual: vec![0.0; dict.dim()],
        }
    }

    fn code(&self) -> SparseCode {
        SparseCode {
            indices: self.support.clone(),
            values: self.coef[..self.support.len()].to_vec(),
        }
    }

    /// Leaves the selected atoms in `support` and their least-squares
    /// coefficients in `coef`.
    fn run(&mut self, dict: &Dictionary, y: &[f64]) {
        let (n, s) = (self.n_atoms, self.s);
        self.support.clear();
        self.excluded.iter_mut().for_each(|e| *e = false);
        for j in 0..n {
            self.alpha[j] = dot(dict.atom(j), y);
        }
        self.residual.copy_from_slice(y);

        while self.support.len() < s {
            if norm2(&self.residual) < OMP_RESIDUAL_TOL {
                break;
            }
            let k = self.support.len();
            // correlations with the residual: D^T y - G_S x
            let mut best = None;
            let mut best_abs = 0.0;
            for j in 0..n {
                if self.excluded[j] {
                    continue;
                }
                let row = &self.gram[j * n..(j + 1) * n];
                let mut c = self.alpha[j];
                for (&i, &x) in self.support.iter().zip(&self.coef[..k]) {
                    c -= row[i] * x;
                }
                if c.abs() > best_abs {
                    best_abs = c.abs();
                    best = Some(j);
                }
            }
            let Some(j) = best else { break };

            let gj = &self.gram[j * n..(j + 1) * n];
            for r in 0..k {
                let mut acc = gj[self.support[r]];
                for c in 0..r {
                    acc -= self.chol[r * s + c] * self.w[c];
                }
                self.w[r] = acc / self.chol[r * s + r];
            }
            let gjj = gj[j];
            let delta = gjj - dot(&self.w[..k], &self.w[..k]);
            self.excluded[j] = true;
            if !(delta > 1e-10 * gjj) {
                continue;
            }
            self.chol[k * s..k * s + k].copy_from_slice(&self.w[..k]);
            self.chol[k * s + k] = delta.sqrt();
            self.support.push(j);

            // L z = alpha_S, then L^T x = z
            let m = k + 1;
            for r in 0..m {
                let mut acc = self.alpha[self.support[r]];
                for c in 0..r {
                    acc -= self.chol[r * s + c] * self.z[c];
                }
                self.z[r] = acc / self.chol[r * s + r];
            }
            for r in (0..m).rev() {
                let mut acc = self.z[r];
                for c in r + 1..m {
                    acc -= self.chol[c * s + r] * self.coef[c];
                }
                self.coef[r] = acc / self.chol[r * s + r];
            }
            self.residual.copy_from_slice(y);
            for (&i, &x) in self.support.iter().zip(&self.coef[..m]) {
                for (rv, a) in self.residual.iter_mut().zip(dict.atom(i)) {
                    *rv -= x * a;
                }
            }
        }
    }
}

/// Output of [`ksvd_learn`].
#[derive(Debug, Clone)]
pub struct KsvdResult {
    pub dictionary: Dictionary,
    pub codes: Vec<SparseCode>,
    /// `|Y - D C|_F` after each round.
    pub objective: Vec<f64>,
}

/// Dictionary learning by alternating OMP coding and K-SVD atom updates.
///
/// Each coding pass keeps a column's previous code when the fresh OMP code
/// does not lower its residual, so the objective never increases. Atoms used
/// by no column are replaced by the worst-represented data column.
pub fn ksvd_learn(data: &PatchMatrix, n_atoms: usize, s: usize, n_iters: usize, seed: u64) -> Result<KsvdResult> {
    if data.n == 0 {
        return Err(Error::InvalidParameter("dictionary learning needs at least one data column".into()));
    }
    if n_iters == 0 || n_atoms == 0 || s == 0 {
        return Err(Error::InvalidParameter(
            "n_iters, the atom count and the sparsity must all be >= 1".into(),
        ));
    }
    let m = data.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = PatchMatrix {
        dim: m,
        n: n_atoms,
        data: vec![0.0; m * n_atoms],
    };
    let picks: Vec<usize> = if data.n >= n_atoms {
        let mut v = sample(&mut rng, data.n, n_atoms).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..data.n).collect()
    };
    for k in 0..n_atoms {
        let col = atoms.col_mut(k);
        match picks.get(k) {
            Some(&j) if norm2(data.col(j)) > 0.0 => col.copy_from_slice(data.col(j)),
            _ => col.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng)),
        }
    }
    let mut dict = Dictionary::new(atoms)?;

    let mut codes: Vec<SparseCode> = vec![SparseCode::default(); data.n];
    let mut residual = data.clone();
    let mut objective = Vec::with_capacity(n_iters);

    for _round in 0..n_iters {
        // sparse coding
        let mut ws = OmpWorkspace::new(&dict, s);
        for j in 0..data.n {
            let y = data.col(j);
            ws.run(&dict, y);
            let code = ws.code();
            let approx = dict.synthesize(&code);
            let r_new: Vec<f64> = y.iter().zip(&approx).map(|(a, b)| a - b).collect();
            if norm2(&r_new) <= norm2(residual.col(j)) {
                residual.col_mut(j).copy_from_slice(&r_new);
                codes[j] = code;
            }
        }

        // atom updates
        let mut dead = Vec::new();
        for k in 0..dict.n_atoms() {
            let users: Vec<(usize, usize)> = codes
                .iter()
                .enumerate()
                .filter_map(|(j, c)| c.indices.iter().position(|&a| a == k).map(|p| (j, p)))
                .collect();
            if users.is_empty() {
                dead.push(k);
                continue;
            }
            // E = residual + d_k c_k on the using columns
            let atom = dict.atom(k).to_vec();
            let mut e = Mat::<f64>::zeros(m, users.len());
            for (col, &(j, p)) in users.iter().enumerate() {
                let ck = codes[j].values[p];
                for i in 0..m {
                    e[(i, col)] = residual.col(j)[i] + ck * atom[i];
                }
            }
            let gram = &e * e.transpose();
            let eig = gram
                .self_adjoint_eigen(Side::Lower)
                .map_err(|_| Error::Degenerate("eigen-decomposition failed in K-SVD".into()))?;
            let u: Vec<f64> = (0..m).map(|i| eig.U()[(i, m - 1)]).collect();
            if !(norm2(&u) > 0.0) {
                continue;
            }
            for (col, &(j, p)) in users.iter().enumerate() {
                let coeff: f64 = (0..m).map(|i| u[i] * e[(i, col)]).sum();
                codes[j].values[p] = coeff;
                let r = residual.col_mut(j);
                for i in 0..m {
                    r[i] = e[(i, col)] - coeff * u[i];
                }
            }
            dict.atoms.col_mut(k).copy_from_slice(&u);
        }

        // replace unused atoms by the worst-represented columns
        if !dead.is_empty() {
            let mut order: Vec<(f64, usize)> = (0..data.n).map(|j| (norm2(residual.col(j)), j)).collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (k, &(rn, j)) in dead.iter().zip(&order) {
                if rn <= OMP_RESIDUAL_TOL {
                    break;
                }
                let col: Vec<f64> = residual.col(j).iter().map(|v| v / rn).collect();
                dict.atoms.col_mut(*k).copy_from_slice(&col);
            }
        }

        objective.push(residual.frobenius_norm());
    }

    Ok(KsvdResult {
        dictionary: dict,
        codes,
        objective,
    })
}

/// Solves `K_Mb B = X~` for every prior image, raising a ridge by factors of
/// 100 from `1e-8 * trace / M` if the plain solve does not converge.
pub fn solve_learning_images(k_mb: &SparseMatrix, priors: &[Image]) -> Result<Vec<Vec<f64>>> {
    let mut ridge = 0.0;
    let base = crate::kernel::default_ridge(k_mb).max(1e-300);
    for attempt in 0..8 {
        let lu = DenseLu::factor(k_mb, ridge)?;
        let solved: Result<Vec<Vec<f64>>> = priors.iter().map(|p| lu.solve_vector(p.data())).collect();
        match solved {
            Ok(b) => {
                if attempt > 0 {
                    log::warn!("learning data: ridge raised to {ridge:.3e}");
                }
                return Ok(b);
            }
            Err(Error::NotConverged { .. }) if attempt < 7 => {
                ridge = if ridge == 0.0 { base } else { ridge * 100.0 };
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// Patched dictionary-learning data `P(K_Mb^{-1} X~)`, subsampled to at most
/// `n_train` columns with a seeded generator.
pub fn build_learning_data(
    k_mb: &SparseMatrix,
    priors: &[Image],
    op: &PatchOperator,
    n_train: usize,
    seed: u64,
) -> Result<PatchMatrix> {
    let images = solve_learning_images(k_mb, priors)?;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for b in &images {
        let p = op.extract(b)?;
        columns.extend((0..p.n).map(|k| p.col(k).to_vec()));
    }
    let all = PatchMatrix::from_columns(op.dim(), &columns)?;
    if n_train == 0 || n_train >= all.n {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, all.n, n_train).into_vec();
    picks.sort_unstable();
    Ok(all.select_columns(&picks))
}

/// Average over all patch positions of `K~` restricted to the patch support.
pub fn local_patch_operator(k_tilde: &SparseMatrix, op: &PatchOperator) -> Result<Vec<f64>> {
    check_len("local_patch_operator", op.width * op.height, k_tilde.n_rows())?;
    check_len("local_patch_operator", op.width * op.height, k_tilde.n_cols())?;
    let d = op.dim();
    let mut acc = vec![0.0; d * d];
    let positions = op.positions();
    for &(r, c) in &positions {
        let idx: Vec<usize> = op.patch_indices(r, c).collect();
        for (u, &i) in idx.iter().enumerate() {
            let (cols, vals) = k_tilde.row(i);
            // both lists are sorted, so walk them together
            let mut p = 0;
            for (v, &j) in idx.iter().enumerate() {
                while p < cols.len() && (cols[p] as usize) < j {
                    p += 1;
                }
                if p < cols.len() && cols[p] as usize == j {
                    acc[u * d + v] += vals[p];
                }
            }
        }
    }
    let n = positions.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Maps patch atoms through the patch-local restriction of `K~` and
/// renormalizes them; atoms mapped to zero keep their original direction.
pub fn map_dictionary(k_tilde: &SparseMatrix, d_b: &Dictionary, op: &PatchOperator) -> Result<Dictionary> {
    check_len("map_dictionary", op.dim(), d_b.dim())?;
    map_with_local(&local_patch_operator(k_tilde, op)?, d_b)
}

/// Applies a row-major `dim x dim` patch operator to every atom.
pub fn map_with_local(local: &[f64], d_b: &Dictionary) -> Result<Dictionary> {
    let d = d_b.dim();
    check_len("map_with_local", d * d, local.len())?;
    let mut atoms = d_b.atoms().clone();
    for k in 0..d_b.n_atoms() {
        let src = d_b.atom(k);
        let mapped: Vec<f64> = (0..d).map(|u| dot(&local[u * d..(u + 1) * d], src)).collect();
        if norm2(&mapped) > 0.0 && mapped.iter().all(|v| v.is_finite()) {
            atoms.col_mut(k).copy_from_slice(&mapped);
        } else {
            log::warn!("map_dictionary: atom {k} maps to zero, left unmapped");
        }
    }
    Dictionary::new(atoms)
}

/// Sparse-codes every patch of `field` against `dict` and returns the
/// overlap-averaged reconstruction `D c`.
pub fn code_coefficients(dict: &Dictionary, field: &[f64], op: &PatchOperator, s: usize) -> Result<Vec<f64>> {
    check_len("code_coefficients", op.dim(), dict.dim())?;
    check_len("code_coefficients", op.width * op.height, field.len())?;
    if s == 0 {
        return Err(Error::InvalidParameter("sparsity must be >= 1".into()));
    }
    let mut ws = OmpWorkspace::new(dict, s);
    let mut patch = vec![0.0; op.dim()];
    let mut sum = vec![0.0; field.len()];
    let mut count = vec![0u32; field.len()];
    let mut approx = vec![0.0; op.dim()];
    for (r, c) in op.positions() {
        for (p, i) in patch.iter_mut().zip(op.patch_indices(r, c)) {
            *p = field[i];
        }
        ws.run(dict, &patch);
        // D c = y - residual
        for ((a, y), res) in approx.iter_mut().zip(&patch).zip(&ws.residual) {
            *a = y - res;
        }
        for (a, i) in approx.iter().zip(op.patch_indices(r, c)) {
            sum[i] += a;
            count[i] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect())
}
