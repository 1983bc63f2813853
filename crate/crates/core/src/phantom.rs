//! Synthetic brain-like phantom, anatomical prior images and Poisson noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projector::{Geometry, SystemModel};

/// Tissue class of a phantom pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Background,
    WhiteMatter,
    GrayMatter,
    Ventricle,
    Lesion,
}

/// Intensity assigned to each tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionValues {
    pub background: f64,
    pub white_matter: f64,
    pub gray_matter: f64,
    pub ventricle: f64,
    pub lesion: f64,
}

impl RegionValues {
    pub fn value(&self, region: Region) -> f64 {
        match region {
            Region::Background => self.background,
            Region::WhiteMatter => self.white_matter,
            Region::GrayMatter => self.gray_matter,
            Region::Ventricle => self.ventricle,
            Region::Lesion => self.lesion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub lesion: bool,
    /// Whether the lesion also shows up in the prior images.
    pub lesion_in_prior: bool,
    pub lesion_radius: f64,
    pub activity: RegionValues,
    pub prior: RegionValues,
    /// Prior noise standard deviation as a fraction of the prior's dynamic range.
    pub prior_noise: f64,
    /// Number of training (prior) images, T.
    pub n_priors: usize,
    pub prior_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            lesion: true,
            lesion_in_prior: true,
            lesion_radius: 3.0,
            activity: RegionValues {
                background: 0.0,
                white_matter: 1.0,
                gray_matter: 4.0,
                ventricle: 0.5,
                lesion: 6.0,
            },
            prior: RegionValues {
                background: 0.0,
                white_matter: 3.0,
                gray_matter: 1.0,
                ventricle: 4.0,
                lesion: 2.0,
            },
            prior_noise: 0.02,
            n_priors: 1,
            prior_seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub activity: Image,
    pub priors: Vec<Image>,
    pub lesion_mask: Vec<bool>,
    pub labels: Vec<Region>,
}

impl PhantomPair {
    /// Noise-free prior built from the region labels.
    pub fn clean_prior(&self, cfg: &PhantomConfig) -> Image {
        render(&self.labels, self.activity.width(), self.activity.height(), |r| {
            prior_value(cfg, r)
        })
    }

    /// Row through the lesion centre, if the phantom has a lesion.
    pub fn lesion_row(&self) -> Option<usize> {
        let w = self.activity.width();
        let rows: Vec<usize> = self
            .lesion_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i / w)
            .collect();
        if rows.is_empty() {
            None
        } else {
            Some((rows[0] + rows[rows.len() - 1]) / 2)
        }
    }
}

fn prior_value(cfg: &PhantomConfig, r: Region) -> f64 {
    if r == Region::Lesion && !cfg.lesion_in_prior {
        cfg.prior.white_matter
    } else {
        cfg.prior.value(r)
    }
}

fn render(labels: &[Region], w: usize, h: usize, f: impl Fn(Region) -> f64) -> Image {
    Image::new(w, h, labels.iter().map(|&r| f(r)).collect()).expect("shape matches labels")
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b <= 1.0
}

/// Tissue labels of the brain-like phantom on a `width x height` grid.
pub fn phantom_labels(width: usize, height: usize, cfg: &PhantomConfig) -> Result<Vec<Region>> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidParameter(format!(
            "phantom needs at least 16x16 pixels, got {width}x{height}"
        )));
    }
    let mut labels = Vec::with_capacity(width * height);
    // lesion centre in periventricular white matter
    let (lu, lv) = (0.30, -0.35);
    for row in 0..height {
        for col in 0..width {
            let u = (col as f64 + 0.5) / width as f64 * 2.0 - 1.0;
            let v = (row as f64 + 0.5) / height as f64 * 2.0 - 1.0;
            let mut region = Region::Background;
            if in_ellipse(u, v, 0.0, 0.0, 0.85, 0.95) {
                region = Region::GrayMatter;
                if in_ellipse(u, v, 0.0, 0.0, 0.72, 0.82) {
                    region = Region::WhiteMatter;
                }
                // deep gray nuclei
                if in_ellipse(u, v, 0.28, 0.1, 0.12, 0.18) || in_ellipse(u, v, -0.28, 0.1, 0.12, 0.18) {
                    region = Region::GrayMatter;
                }
                // a gray-matter fold reaching into white matter
                if in_ellipse(u, v, 0.0, 0.72, 0.08, 0.2) {
                    region = Region::GrayMatter;
                }
                if in_ellipse(u, v, 0.1, -0.15, 0.07, 0.25) || in_ellipse(u, v, -0.1, -0.15, 0.07, 0.25) {
                    region = Region::Ventricle;
                }
                if cfg.lesion {
                    let du = (u - lu) * width as f64 / 2.0;
                    let dv = (v - lv) * height as f64 / 2.0;
                    if du * du + dv * dv <= cfg.lesion_radius * cfg.lesion_radius {
                        region = Region::Lesion;
                    }
                }
            }
            labels.push(region);
        }
    }
    Ok(labels)
}

/// Ground-truth activity, noisy anatomical priors and lesion mask.
///
/// Activity is piecewise constant over the tissue classes. Each prior shares
/// the region boundaries with different intensities plus Gaussian noise of
/// standard deviation `prior_noise * (max - min)`.
pub fn make_brain_like_phantom(width: usize, height: usize, cfg: &PhantomConfig) -> Result<PhantomPair> {
    if cfg.n_priors == 0 {
        return Err(Error::InvalidParameter("n_priors must be >= 1".into()));
    }
    if !(cfg.prior_noise >= 0.0) {
        return Err(Error::InvalidParameter("prior_noise must be >= 0".into()));
    }
    let labels = phantom_labels(width, height, cfg)?;
    let activity = render(&labels, width, height, |r| cfg.activity.value(r));
    if activity.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("activity intensities must be nonnegative".into()));
    }
    let clean = render(&labels, width, height, |r| prior_value(cfg, r));
    let (lo, hi) = clean.min_max();
    let sigma = cfg.prior_noise * (hi - lo);
    let mut priors = Vec::with_capacity(cfg.n_priors);
    for t in 0..cfg.n_priors {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.prior_seed);
        rng.set_stream(t as u64);
        let mut data = clean.data().to_vec();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
            for v in &mut data {
                *v += normal.sample(&mut rng);
            }
        }
        priors.push(clean.with_data(data)?);
    }
    let lesion_mask = labels.iter().map(|&r| r == Region::Lesion).collect();
    Ok(PhantomPair {
        activity,
        priors,
        lesion_mask,
        labels,
    })
}

/// Factor that rescales `clean` to sum to `target_counts`.
pub fn count_scale_factor(clean: &[f64], target_counts: f64) -> Result<f64> {
    let total: f64 = clean.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("sinogram has no counts to scale".into()));
    }
    if !(target_counts > 0.0) {
        return Err(Error::InvalidParameter("target_counts must be > 0".into()));
    }
    Ok(target_counts / total)
}

/// Rescales a noiseless sinogram so that it sums to `target_counts`.
pub fn scale_to_counts(clean: &[f64], target_counts: f64) -> Result<Vec<f64>> {
    let f = count_scale_factor(clean, target_counts)?;
    Ok(clean.iter().map(|v| v * f).collect())
}

/// Independent Poisson draw per bin, reproducible from `(seed, stream)`.
///
/// ChaCha is a counter-based generator, so every `(seed, stream)` pair
/// addresses its own keystream and realizations can be drawn in any order.
pub fn poissonize_stream(mean: &[f64], seed: u64, stream: u64) -> Result<Vec<f64>> {
    if mean.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::InvalidParameter("Poisson means must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(mean
        .iter()
        .map(|&m| {
            if m == 0.0 {
                0.0
            } else {
                Poisson::new(m).expect("mean is positive").sample(&mut rng)
            }
        })
        .collect())
}

pub fn poissonize(mean: &[f64], seed: u64) -> Result<Vec<f64>> {
    poissonize_stream(mean, seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub target_counts: f64,
    pub seed: u64,
    pub n_realizations: usize,
    /// Uniform randoms/scatter level as a fraction of the mean true counts per bin.
    pub randoms_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            target_counts: 64_000.0,
            seed: 2024,
            n_realizations: 10,
            randoms_fraction: 0.05,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_counts > 0.0) {
            return Err(Error::InvalidParameter("target_counts must be > 0".into()));
        }
        if self.n_realizations == 0 {
            return Err(Error::InvalidParameter("n_realizations must be >= 1".into()));
        }
        if !(self.randoms_fraction >= 0.0) {
            return Err(Error::InvalidParameter("randoms_fraction must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a reconstruction experiment needs from the simulation stage.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: SystemModel,
    pub phantom: PhantomPair,
    /// Activity in count units, the reference `f` for the error metrics.
    pub reference: Image,
    /// Noiseless expected sinogram, `H f + r`, summing to the target counts.
    pub mean_sinogram: Vec<f64>,
    pub realizations: Vec<Vec<f64>>,
}

/// Projects the phantom, adds uniform randoms, scales the expectation to the
/// target count level and draws the noisy realizations.
pub fn simulate(geometry: Geometry, phantom_cfg: &PhantomConfig, noise: &NoiseSpec) -> Result<Dataset> {
    noise.validate()?;
    let phantom = make_brain_like_phantom(geometry.image_width, geometry.image_height, phantom_cfg)?;
    let model = SystemModel::build(geometry)?;
    let true_counts = model.project(phantom.activity.data())?;
    let mean_true = true_counts.iter().sum::<f64>() / true_counts.len() as f64;
    let randoms_level = noise.randoms_fraction * mean_true;
    let unscaled: Vec<f64> = true_counts.iter().map(|t| t + randoms_level).collect();
    let factor = count_scale_factor(&unscaled, noise.target_counts)?;
    let randoms = vec![randoms_level * factor; model.n_bins()];
    let model = model.with_randoms(randoms)?;
    let reference = phantom
        .activity
        .with_data(phantom.activity.data().iter().map(|v| v * factor).collect())?;
    let mean_sinogram = model.forward(reference.data())?;
    let realizations = (0..noise.n_realizations)
        .map(|i| poissonize_stream(&mean_sinogram, noise.seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        model,
        phantom,
        reference,
        mean_sinogram,
        realizations,
    })
}
