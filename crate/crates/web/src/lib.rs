//! Browser front end: simulate a small phantom scan and step any of the
//! reconstruction algorithms interactively.
//!
//! [`Session`] holds the logic and is usable from Rust; [`Demo`] is the thin
//! wasm-bindgen wrapper the page talks to.

use mkrem::dictionary::DictionarySpec;
use mkrem::graph::GraphSpec;
use mkrem::kernel::{build_kernel_operator, KernelOperator, MultiKernelSpec, Neighborhood};
use mkrem::metrics::{line_profile, mse};
use mkrem::phantom::{simulate, Dataset, NoiseSpec, PhantomConfig};
use mkrem::pipeline::{KernelSetup, RegularizedSetup};
use mkrem::projector::Geometry;
use mkrem::recon::{Algorithm, ReconConfig, Reconstructor, Regularizers};
use mkrem::{Error, Image, Result};
use wasm_bindgen::prelude::*;

struct Run {
    cfg: ReconConfig,
    ja: usize,
    a: Vec<f64>,
    image: Vec<f64>,
    curve: Vec<f64>,
}

enum Setup {
    Kernel(KernelOperator),
    Regularized(Box<RegularizedSetup>),
}

pub struct Session {
    ds: Dataset,
    setups: Vec<((usize, usize, bool), Setup)>,
    run: Option<Run>,
}

impl Session {
    pub fn new(size: usize, counts: f64, seed: u64) -> Result<Self> {
        let geometry = Geometry::new(size, size, 90, size + size / 2 - 1);
        let noise = NoiseSpec {
            target_counts: counts,
            seed,
            n_realizations: 1,
            ..NoiseSpec::default()
        };
        let ds = simulate(geometry, &PhantomConfig::default(), &noise)?;
        Ok(Self {
            ds,
            setups: Vec::new(),
            run: None,
        })
    }

    pub fn reference(&self) -> &Image {
        &self.ds.reference
    }

    pub fn prior(&self) -> &Image {
        &self.ds.phantom.priors[0]
    }

    pub fn sinogram(&self) -> Result<Image> {
        let g = self.ds.model.geometry;
        Image::new(g.n_radial, g.n_angles, self.ds.realizations[0].clone())
    }

    pub fn lesion_row(&self) -> usize {
        self.ds
            .phantom
            .lesion_row()
            .unwrap_or(self.ds.reference.height() / 2)
    }

    fn ensure_setup(&mut self, alg: Algorithm, ja: usize) -> Result<usize> {
        let g = if alg == Algorithm::Mkrem { 2 } else { 1 };
        let key = (ja, g, alg.is_regularized());
        if let Some(i) = self.setups.iter().position(|(k, _)| *k == key) {
            return Ok(i);
        }
        let mut kernels = KernelSetup::default();
        kernels.a.neighborhood = Neighborhood::Window(ja);
        kernels.g = g;
        let priors = &self.ds.phantom.priors;
        let setup = if alg.is_regularized() {
            let dict = DictionarySpec {
                code_sparsity: Some(5),
                ..DictionarySpec::default()
            };
            Setup::Regularized(Box::new(RegularizedSetup::build(
                priors,
                &kernels,
                &dict,
                &GraphSpec::default(),
            )?))
        } else {
            Setup::Kernel(build_kernel_operator(priors, &MultiKernelSpec::repeated(kernels.a, 1))?)
        };
        self.setups.push((key, setup));
        Ok(self.setups.len() - 1)
    }

    /// Starts a fresh run from the all-ones image. Kernel and regularizer
    /// setups are built on first use and kept for later runs.
    pub fn start(&mut self, algorithm: &str, beta1: f64, beta2: f64, ja: usize) -> Result<()> {
        let alg: Algorithm = algorithm.parse()?;
        let cfg = ReconConfig {
            algorithm: alg,
            beta1,
            beta2,
            ..ReconConfig::default()
        };
        cfg.validate()?;
        if ja == 0 || ja.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("J_a must be odd, got {ja}")));
        }
        if alg.uses_kernel() {
            self.ensure_setup(alg, ja)?;
        }
        let n = self.ds.reference.len();
        self.run = Some(Run {
            cfg,
            ja,
            a: vec![1.0; n],
            image: vec![1.0; n],
            curve: Vec::new(),
        });
        self.advance(0)?;
        Ok(())
    }

    /// Runs `n` more iterations and returns the MSE of the current image.
    pub fn advance(&mut self, n: usize) -> Result<f64> {
        let mut run = self
            .run
            .take()
            .ok_or_else(|| Error::InvalidParameter("no run started".into()))?;
        let result = self.advance_run(&mut run, n);
        self.run = Some(run);
        result
    }

    fn advance_run(&mut self, run: &mut Run, n: usize) -> Result<f64> {
        let alg = run.cfg.algorithm;
        let (kernel, regs) = if alg.uses_kernel() {
            let i = self.ensure_setup(alg, run.ja)?;
            match &self.setups[i].1 {
                Setup::Kernel(k) => (Some(k), Regularizers::default()),
                Setup::Regularized(s) => (Some(&s.k_ma), s.regularizers()),
            }
        } else {
            (None, Regularizers::default())
        };
        let f = self.ds.reference.data();
        let mut rec = Reconstructor::new(&self.ds.model, &run.cfg, kernel, regs, &self.ds.realizations[0])?;
        rec.resume(std::mem::take(&mut run.a), run.curve.len())?;
        for _ in 0..n {
            rec.step()?;
            run.curve.push(mse(&rec.image()?, f)?);
        }
        run.image = rec.image()?;
        run.a = rec.into_iterate();
        mse(&run.image, f)
    }

    pub fn iteration(&self) -> usize {
        self.run.as_ref().map_or(0, |r| r.curve.len())
    }

    pub fn image(&self) -> Option<Image> {
        let r = self.run.as_ref()?;
        let (w, h) = (self.ds.reference.width(), self.ds.reference.height());
        Image::new(w, h, r.image.clone()).ok()
    }

    /// MSE after each iteration of the current run.
    pub fn curve(&self) -> &[f64] {
        self.run.as_ref().map_or(&[], |r| &r.curve)
    }
}

/// Grayscale RGBA bytes with `max` mapped to white.
pub fn to_rgba(img: &Image, max: f64) -> Vec<u8> {
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    img.data()
        .iter()
        .flat_map(|&v| {
            let g = (v * scale).round().clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, counts: f64, seed: u32) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            session: Session::new(size, counts, u64::from(seed)).map_err(js)?,
        })
    }

    pub fn width(&self) -> usize {
        self.session.reference().width()
    }

    pub fn sinogram_width(&self) -> usize {
        self.session.ds.model.geometry.n_radial
    }

    pub fn sinogram_height(&self) -> usize {
        self.session.ds.model.geometry.n_angles
    }

    pub fn reference_rgba(&self) -> Vec<u8> {
        let r = self.session.reference();
        to_rgba(r, r.min_max().1)
    }

    pub fn prior_rgba(&self) -> Vec<u8> {
        let p = self.session.prior();
        to_rgba(p, p.min_max().1)
    }

    pub fn sinogram_rgba(&self) -> std::result::Result<Vec<u8>, JsError> {
        let s = self.session.sinogram().map_err(js)?;
        Ok(to_rgba(&s, s.min_max().1))
    }

    pub fn start(&mut self, algorithm: &str, beta1: f64, beta2: f64, ja: usize) -> std::result::Result<(), JsError> {
        self.session.start(algorithm, beta1, beta2, ja).map_err(js)
    }

    pub fn step(&mut self, n: usize) -> std::result::Result<f64, JsError> {
        self.session.advance(n).map_err(js)
    }

    pub fn iteration(&self) -> usize {
        self.session.iteration()
    }

    /// Current image on the reference's grey scale.
    pub fn image_rgba(&self) -> Vec<u8> {
        match self.session.image() {
            Some(img) => to_rgba(&img, self.session.reference().min_max().1),
            None => Vec::new(),
        }
    }

    pub fn mse_curve(&self) -> Vec<f64> {
        self.session.curve().to_vec()
    }

    pub fn lesion_row(&self) -> usize {
        self.session.lesion_row()
    }

    /// Row `row` of the current image followed by the same row of the reference.
    pub fn profiles(&self, row: usize) -> std::result::Result<Vec<f64>, JsError> {
        let mut out = match self.session.image() {
            Some(img) => line_profile(&img, row).map_err(js)?,
            None => Vec::new(),
        };
        out.extend(line_profile(self.session.reference(), row).map_err(js)?);
        Ok(out)
    }
}
