//! 2-D parallel-beam projector with exact line-length (Siddon) weights.
//!
//! The image is centred on the origin with square pixels of side
//! `pixel_size`; pixel `(row, col)` covers
//! `x in [x0 + col*p, x0 + (col+1)*p]`, `y in [y0 + row*p, y0 + (row+1)*p]`.
//! Ray `(k, l)` is the line `x cos(theta_k) + y sin(theta_k) = s_l` with
//! `theta_k = k*pi/n_angles` and `s_l = (l - (n_radial-1)/2) * p`. Sinogram bins
//! are ordered angle-major: `i = k * n_radial + l`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{RowBuilder, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub image_width: usize,
    pub image_height: usize,
    pub n_angles: usize,
    pub n_radial: usize,
    pub pixel_size: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            n_angles: 90,
            n_radial: 95,
            pixel_size: 1.0,
        }
    }
}

impl Geometry {
    pub fn new(image_width: usize, image_height: usize, n_angles: usize, n_radial: usize) -> Self {
        Self {
            image_width,
            image_height,
            n_angles,
            n_radial,
            pixel_size: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 || self.n_angles == 0 || self.n_radial == 0 {
            return Err(Error::InvalidParameter(format!("all geometry counts must be >= 1: {self:?}")));
        }
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pixel_size must be positive, got {}",
                self.pixel_size
            )));
        }
        Ok(())
    }

    /// Number of sinogram bins, N.
    pub fn n_bins(&self) -> usize {
        self.n_angles * self.n_radial
    }

    /// Number of voxels, M.
    pub fn n_voxels(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    pub fn radial_offset(&self, l: usize) -> f64 {
        (l as f64 - (self.n_radial as f64 - 1.0) / 2.0) * self.pixel_size
    }
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Intersection lengths of one ray with the pixel grid, as `(voxel, length)`
/// pairs sorted by voxel index.
fn trace_ray(geom: &Geometry, theta: f64, s: f64, scratch: &mut Vec<f64>) -> Vec<(usize, f64)> {
    let p = geom.pixel_size;
    let (w, h) = (geom.image_width, geom.image_height);
    let x0 = -(w as f64) * p / 2.0;
    let y0 = -(h as f64) * p / 2.0;
    let (x1, y1) = (-x0, -y0);
    let (c, sn) = (snap(theta.cos()), snap(theta.sin()));
    // point on the ray closest to the origin, and unit direction
    let (px, py) = (s * c, s * sn);
    let (dx, dy) = (-sn, c);

    let mut a_min = f64::NEG_INFINITY;
    let mut a_max = f64::INFINITY;
    for (pos, dir, lo, hi) in [(px, dx, x0, x1), (py, dy, y0, y1)] {
        if dir == 0.0 {
            if pos < lo || pos >= hi {
                return Vec::new();
            }
        } else {
            let (a, b) = ((lo - pos) / dir, (hi - pos) / dir);
            a_min = a_min.max(a.min(b));
            a_max = a_max.min(a.max(b));
        }
    }
    if a_max <= a_min {
        return Vec::new();
    }

    scratch.clear();
    scratch.push(a_min);
    scratch.push(a_max);
    for (pos, dir, lo, n) in [(px, dx, x0, w), (py, dy, y0, h)] {
        if dir == 0.0 {
            continue;
        }
        for m in 0..=n {
            let a = (lo + m as f64 * p - pos) / dir;
            if a > a_min && a < a_max {
                scratch.push(a);
            }
        }
    }
    scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut hits: Vec<(usize, f64)> = Vec::with_capacity(scratch.len());
    for seg in scratch.windows(2) {
        let len = seg[1] - seg[0];
        if len <= 1e-12 * p {
            continue;
        }
        let mid = 0.5 * (seg[0] + seg[1]);
        let (mx, my) = (px + mid * dx, py + mid * dy);
        let col = ((mx - x0) / p).floor();
        let row = ((my - y0) / p).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        hits.push((row as usize * w + col as usize, len));
    }
    hits.sort_by_key(|e| e.0);
    hits.dedup_by(|next, prev| {
        if next.0 == prev.0 {
            prev.1 += next.1;
            true
        } else {
            false
        }
    });
    hits
}

/// System matrix H (N x M) of intersection lengths, rows angle-major.
pub fn build_system_matrix(geom: &Geometry) -> Result<SparseMatrix> {
    geom.validate()?;
    let mut b = RowBuilder::new(geom.n_bins(), geom.n_voxels());
    let mut scratch = Vec::new();
    for k in 0..geom.n_angles {
        let theta = geom.angle(k);
        for l in 0..geom.n_radial {
            for (j, len) in trace_ray(geom, theta, geom.radial_offset(l), &mut scratch) {
                b.push(j, len);
            }
            b.finish_row();
        }
    }
    Ok(b.build())
}

/// Forward model `p_bar = norm o (H x) + r`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub geometry: Geometry,
    pub h: SparseMatrix,
    /// Expected randoms and scatter per bin.
    pub randoms: Vec<f64>,
    /// Optional per-bin multiplicative correction.
    pub norm: Option<Vec<f64>>,
}

impl SystemModel {
    pub fn build(geometry: Geometry) -> Result<Self> {
        let h = build_system_matrix(&geometry)?;
        Ok(Self {
            geometry,
            h,
            randoms: vec![0.0; geometry.n_bins()],
            norm: None,
        })
    }

    pub fn with_randoms(mut self, randoms: Vec<f64>) -> Result<Self> {
        check_len("SystemModel::with_randoms", self.n_bins(), randoms.len())?;
        if randoms.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::InvalidParameter("randoms must be nonnegative".into()));
        }
        self.randoms = randoms;
        Ok(self)
    }

    pub fn with_norm(mut self, norm: Vec<f64>) -> Result<Self> {
        check_len("SystemModel::with_norm", self.n_bins(), norm.len())?;
        if norm.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter("normalization must be nonnegative".into()));
        }
        self.norm = Some(norm);
        Ok(self)
    }

    pub fn n_bins(&self) -> usize {
        self.h.n_rows()
    }

    pub fn n_voxels(&self) -> usize {
        self.h.n_cols()
    }

    /// `norm o (H x)` without the additive term.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("forward", self.n_voxels(), x.len())?;
        let mut y = self.h.mul_vec(x);
        if let Some(norm) = &self.norm {
            y.iter_mut().zip(norm).for_each(|(v, n)| *v *= n);
        }
        Ok(y)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.project(x)?;
        y.iter_mut().zip(&self.randoms).for_each(|(v, r)| *v += r);
        Ok(y)
    }

    pub fn backproject(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len("backproject", self.n_bins(), q.len())?;
        Ok(match &self.norm {
            Some(norm) => {
                let weighted: Vec<f64> = q.iter().zip(norm).map(|(a, b)| a * b).collect();
                self.h.tmul_vec(&weighted)
            }
            None => self.h.tmul_vec(q),
        })
    }

    /// Sensitivity image, the backprojection of all ones.
    pub fn sensitivity(&self) -> Vec<f64> {
        self.backproject(&vec![1.0; self.n_bins()])
            .expect("length matches by construction")
    }
}

pub fn forward(model: &SystemModel, x: &[f64]) -> Result<Vec<f64>> {
    model.forward(x)
}

pub fn backproject(model: &SystemModel, q: &[f64]) -> Result<Vec<f64>> {
    model.backproject(q)
}
