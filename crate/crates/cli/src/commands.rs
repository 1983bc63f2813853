//! The `phantom`, `build`, `reconstruct`, `report`, `sweep` and `demo` commands.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use mkrem::dictionary::{Dictionary, DictionaryMapping, PatchOperator};
use mkrem::graph::{build_laplacian, LaplacianPack};
use mkrem::kernel::{build_single_kernel, KernelOperator, KernelSpec};
use mkrem::linalg::{spmm, SparseMatrix};
use mkrem::metrics::{bias, curve_minimum, ensemble_mean, line_profile, mse, variance};
use mkrem::phantom::simulate;
use mkrem::pipeline::{build_dictionary, repeat_kernel, DictionaryPack};
use mkrem::projector::SystemModel;
use mkrem::recon::{Algorithm, ReconConfig, Reconstructor, Regularizers};
use mkrem::Image;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io;
use crate::workspace::{stage_key, HasKey, StageStatus, Workspace};

macro_rules! meta_key {
    ($($t:ty),*) => {$(
        impl HasKey for $t {
            fn key(&self) -> &str {
                &self.key
            }
        }
    )*};
}

#[derive(Debug, Serialize, Deserialize)]
struct PhantomMeta {
    key: String,
    priors_key: String,
    n_priors: usize,
    n_realizations: usize,
    lesion_row: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelMeta {
    key: String,
    n: usize,
    nnz: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DictionaryMeta {
    key: String,
    patch_w: usize,
    stride: usize,
    sparsity: usize,
    factor_ridge: Option<f64>,
    factor_residual: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphMeta {
    key: String,
    t: usize,
    symmetrize: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReconMeta {
    key: String,
    iterations: Vec<usize>,
    n_realizations: usize,
}

meta_key!(PhantomMeta, KernelMeta, DictionaryMeta, GraphMeta, ReconMeta);

fn realization_name(i: usize) -> String {
    format!("{i:03}")
}

/// Stage keys derived from a configuration.
struct Keys<'a> {
    cfg: &'a ExperimentConfig,
}

impl<'a> Keys<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg }
    }

    fn priors(&self) -> String {
        let g = &self.cfg.geometry;
        stage_key("priors", &(g.image_width, g.image_height, &self.cfg.phantom))
    }

    fn phantom(&self) -> String {
        stage_key("phantom", &(&self.cfg.geometry, &self.cfg.phantom, &self.cfg.noise))
    }

    fn kernel(&self, spec: &KernelSpec) -> String {
        stage_key("kernel", &(self.priors(), spec))
    }

    fn dictionary(&self, g: usize) -> String {
        let k = &self.cfg.kernel;
        stage_key(
            "dictionary",
            &(self.kernel(&k.a), self.kernel(&k.b), g, &self.cfg.dictionary),
        )
    }

    fn graph(&self) -> String {
        stage_key("graph", &(self.priors(), &self.cfg.graph))
    }

    /// Kernel power used by an algorithm.
    fn kernel_power(&self, alg: Algorithm) -> usize {
        if alg == Algorithm::Mkrem {
            self.cfg.kernel.g
        } else {
            1
        }
    }

    fn recon(&self, cfg: &ReconConfig) -> String {
        let alg = cfg.algorithm;
        let g = self.kernel_power(alg);
        let kernel = alg.uses_kernel().then(|| self.kernel(&self.cfg.kernel.a));
        let regs = alg.is_regularized().then(|| (self.dictionary(g), self.graph()));
        stage_key("recon", &(self.phantom(), kernel, g, regs, cfg))
    }
}

/// Simulated experiment loaded from the `phantom` stage.
pub struct PhantomData {
    pub model: SystemModel,
    pub reference: Image,
    pub priors: Vec<Image>,
    pub sinograms: Vec<Vec<f64>>,
    pub lesion_row: Option<usize>,
}

/// Outcome of a command that may reuse cached stages.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub stages: Vec<(String, StageStatus)>,
}

impl BuildReport {
    fn push(&mut self, name: impl Into<String>, status: StageStatus) {
        let name = name.into();
        match status {
            StageStatus::Hit => log::info!("{name}: cache hit"),
            StageStatus::Built => log::info!("{name}: built"),
        }
        self.stages.push((name, status));
    }

    pub fn built(&self) -> impl Iterator<Item = &str> {
        self.stages
            .iter()
            .filter(|(_, s)| *s == StageStatus::Built)
            .map(|(n, _)| n.as_str())
    }
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let ws = Workspace::new(cfg.output.clone());
        Self { cfg, ws }
    }

    fn keys(&self) -> Keys<'_> {
        Keys::new(&self.cfg)
    }

    fn config_hash(&self) -> String {
        stage_key("config", &self.cfg)
    }

    pub fn finish(&self) -> Result<()> {
        self.ws.write_manifest(&self.config_hash())
    }

    // ---- phantom -------------------------------------------------------

    /// Writes the activity, priors, lesion mask, randoms and noisy
    /// sinograms. Skipped when the directory already holds this config's data.
    pub fn phantom(&self) -> Result<StageStatus> {
        let dir = self.ws.phantom_dir();
        let key = self.keys().phantom();
        if self.ws.load_meta::<PhantomMeta>(&dir, &key)?.is_some() {
            log::info!("phantom: cache hit");
            return Ok(StageStatus::Hit);
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let ds = simulate(self.cfg.geometry, &self.cfg.phantom, &self.cfg.noise)?;
        let g = &self.cfg.geometry;
        io::write_image(&dir.join("activity.img"), &ds.phantom.activity)?;
        io::write_image(&dir.join("reference.img"), &ds.reference)?;
        for (i, p) in ds.phantom.priors.iter().enumerate() {
            io::write_image(&dir.join(format!("prior_{}.img", realization_name(i))), p)?;
        }
        let mask: Vec<f64> = ds.phantom.lesion_mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        io::write_array(&dir.join("lesion_mask.img"), g.image_width, g.image_height, &mask)?;
        io::write_array(&dir.join("randoms.img"), g.n_radial, g.n_angles, &ds.model.randoms)?;
        io::write_array(&dir.join("mean_sinogram.img"), g.n_radial, g.n_angles, &ds.mean_sinogram)?;
        for (i, p) in ds.realizations.iter().enumerate() {
            io::write_array(
                &dir.join(format!("sinogram_{}.img", realization_name(i))),
                g.n_radial,
                g.n_angles,
                p,
            )?;
        }
        let max = ds.reference.min_max().1;
        io::write_pgm(&dir.join("reference.pgm"), &ds.reference, max)?;
        io::write_pgm(&dir.join("prior.pgm"), &ds.phantom.priors[0], ds.phantom.priors[0].min_max().1)?;
        self.ws.store_meta(
            &dir,
            &PhantomMeta {
                key,
                priors_key: self.keys().priors(),
                n_priors: ds.phantom.priors.len(),
                n_realizations: ds.realizations.len(),
                lesion_row: ds.phantom.lesion_row(),
            },
        )?;
        Ok(StageStatus::Built)
    }

    fn missing_phantom(&self) -> CliError {
        CliError::MissingCache {
            stage: "phantom",
            path: self.ws.phantom_dir(),
            command: "phantom",
        }
    }

    fn phantom_meta(&self) -> Result<PhantomMeta> {
        self.ws
            .load_meta::<PhantomMeta>(&self.ws.phantom_dir(), &self.keys().phantom())?
            .ok_or_else(|| self.missing_phantom())
    }

    pub fn load_priors(&self) -> Result<Vec<Image>> {
        let meta = self.phantom_meta()?;
        let dir = self.ws.phantom_dir();
        (0..meta.n_priors)
            .map(|i| io::read_image(&dir.join(format!("prior_{}.img", realization_name(i)))))
            .collect()
    }

    pub fn load_phantom(&self) -> Result<PhantomData> {
        let meta = self.phantom_meta()?;
        let dir = self.ws.phantom_dir();
        let (_, _, randoms) = io::read_array(&dir.join("randoms.img"))?;
        let model = SystemModel::build(self.cfg.geometry)?.with_randoms(randoms)?;
        let sinograms = (0..meta.n_realizations)
            .map(|i| io::read_array(&dir.join(format!("sinogram_{}.img", realization_name(i)))).map(|a| a.2))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhantomData {
            model,
            reference: io::read_image(&dir.join("reference.img"))?,
            priors: self.load_priors()?,
            sinograms,
            lesion_row: meta.lesion_row,
        })
    }

    // ---- build ---------------------------------------------------------

    fn kernel_stage(&self, priors: &[Image], spec: &KernelSpec, report: &mut BuildReport) -> Result<SparseMatrix> {
        let key = self.keys().kernel(spec);
        let dir = self.ws.stage_dir("kernel", &key);
        let name = format!("kernel {}", &key[..16]);
        if self.ws.load_meta::<KernelMeta>(&dir, &key)?.is_some() {
            report.push(name, StageStatus::Hit);
            return io::read_csr(&dir.join("k.csr"));
        }
        let k = build_single_kernel(priors, spec)?;
        io::write_csr(&dir.join("k.csr"), &k)?;
        self.ws.store_meta(
            &dir,
            &KernelMeta {
                key,
                n: k.n_rows(),
                nnz: k.nnz(),
            },
        )?;
        report.push(name, StageStatus::Built);
        Ok(k)
    }

    fn dictionary_stage(
        &self,
        priors: &[Image],
        k_a: &SparseMatrix,
        k_b: &SparseMatrix,
        g: usize,
        report: &mut BuildReport,
    ) -> Result<()> {
        let key = self.keys().dictionary(g);
        let dir = self.ws.stage_dir("dictionary", &key);
        let name = format!("dictionary G={g}");
        if self.ws.load_meta::<DictionaryMeta>(&dir, &key)?.is_some() {
            report.push(name, StageStatus::Hit);
            return Ok(());
        }
        let k_ma = repeat_kernel(k_a, g)?;
        let mut k_mb = k_b.clone();
        for _ in 1..g {
            k_mb = spmm(&k_mb, k_b)?;
        }
        let pack = build_dictionary(priors, &k_ma, &k_mb, &self.cfg.dictionary)?;
        io::write_dictionary(&dir.join("d_b.dict"), &pack.d_b)?;
        io::write_dictionary(&dir.join("d_a.dict"), &pack.d_a)?;
        if let Some(local) = &pack.local_operator {
            let d = pack.d_b.dim();
            io::write_array(&dir.join("local_operator.img"), d, d, local)?;
        }
        let mut csv = String::from("round,objective\n");
        for (i, v) in pack.objective.iter().enumerate() {
            writeln!(csv, "{},{v}", i + 1).unwrap();
        }
        io::write_text(&dir.join("ksvd_objective.csv"), &csv)?;
        self.ws.store_meta(
            &dir,
            &DictionaryMeta {
                key,
                patch_w: pack.patches.patch_w,
                stride: pack.patches.stride,
                sparsity: pack.sparsity,
                factor_ridge: pack.factor_ridge,
                factor_residual: pack.factor_residual,
            },
        )?;
        report.push(name, StageStatus::Built);
        Ok(())
    }

    fn graph_stage(&self, priors: &[Image], report: &mut BuildReport) -> Result<()> {
        let key = self.keys().graph();
        let dir = self.ws.stage_dir("graph", &key);
        if self.ws.load_meta::<GraphMeta>(&dir, &key)?.is_some() {
            report.push("graph", StageStatus::Hit);
            return Ok(());
        }
        let lap = build_laplacian(priors, &self.cfg.graph)?;
        io::write_csr(&dir.join("z.csr"), &lap.z)?;
        self.ws.store_meta(
            &dir,
            &GraphMeta {
                key,
                t: lap.t,
                symmetrize: lap.symmetrize,
            },
        )?;
        report.push("graph", StageStatus::Built);
        Ok(())
    }

    /// Builds every stage the configured algorithms need, reusing caches.
    pub fn build(&self) -> Result<BuildReport> {
        self.build_for(&self.cfg.recon.algorithms)
    }

    pub fn build_for(&self, algorithms: &[Algorithm]) -> Result<BuildReport> {
        let mut report = BuildReport::default();
        if !algorithms.iter().any(|a| a.uses_kernel()) {
            return Ok(report);
        }
        let priors = self.load_priors()?;
        let k_a = self.kernel_stage(&priors, &self.cfg.kernel.a, &mut report)?;
        let powers: BTreeSet<usize> = algorithms
            .iter()
            .filter(|a| a.is_regularized())
            .map(|&a| self.keys().kernel_power(a))
            .collect();
        if !powers.is_empty() {
            let k_b = self.kernel_stage(&priors, &self.cfg.kernel.b, &mut report)?;
            for g in powers {
                self.dictionary_stage(&priors, &k_a, &k_b, g, &mut report)?;
            }
            self.graph_stage(&priors, &mut report)?;
        }
        Ok(report)
    }

    fn missing(&self, stage: &'static str, dir: PathBuf) -> CliError {
        CliError::MissingCache {
            stage,
            path: dir,
            command: "build",
        }
    }

    fn load_kernel(&self) -> Result<SparseMatrix> {
        let key = self.keys().kernel(&self.cfg.kernel.a);
        let dir = self.ws.stage_dir("kernel", &key);
        if self.ws.load_meta::<KernelMeta>(&dir, &key)?.is_none() {
            return Err(self.missing("kernel", dir));
        }
        io::read_csr(&dir.join("k.csr"))
    }

    fn load_dictionary(&self, g: usize) -> Result<DictionaryPack> {
        let key = self.keys().dictionary(g);
        let dir = self.ws.stage_dir("dictionary", &key);
        let meta = self
            .ws
            .load_meta::<DictionaryMeta>(&dir, &key)?
            .ok_or_else(|| self.missing("dictionary", dir.clone()))?;
        let g_ = &self.cfg.geometry;
        let patches = PatchOperator::new(meta.patch_w, meta.stride, g_.image_width, g_.image_height)?;
        let d_b = io::read_dictionary(&dir.join("d_b.dict"))?;
        let d_a: Dictionary = io::read_dictionary(&dir.join("d_a.dict"))?;
        let local_operator = match self.cfg.dictionary.mapping {
            DictionaryMapping::PatchLocal => Some(io::read_array(&dir.join("local_operator.img"))?.2),
            DictionaryMapping::Bypass => None,
        };
        Ok(DictionaryPack {
            d_b,
            d_a,
            patches,
            sparsity: meta.sparsity,
            objective: Vec::new(),
            factor_ridge: meta.factor_ridge,
            factor_residual: meta.factor_residual,
            local_operator,
        })
    }

    fn load_graph(&self) -> Result<LaplacianPack> {
        let key = self.keys().graph();
        let dir = self.ws.stage_dir("graph", &key);
        let meta = self
            .ws
            .load_meta::<GraphMeta>(&dir, &key)?
            .ok_or_else(|| self.missing("graph", dir.clone()))?;
        Ok(LaplacianPack::new(io::read_csr(&dir.join("z.csr"))?, meta.t, meta.symmetrize)?)
    }

    /// Kernel and regularizers for one algorithm, read from the caches.
    pub fn load_setup(&self, alg: Algorithm) -> Result<AlgorithmSetup> {
        if !alg.uses_kernel() {
            return Ok(AlgorithmSetup::default());
        }
        let g = self.keys().kernel_power(alg);
        let kernel = Some(repeat_kernel(&self.load_kernel()?, g)?);
        let (dictionary, laplacian) = if alg.is_regularized() {
            (Some(self.load_dictionary(g)?), Some(self.load_graph()?))
        } else {
            (None, None)
        };
        Ok(AlgorithmSetup {
            kernel,
            dictionary,
            laplacian,
        })
    }

    // ---- reconstruct ---------------------------------------------------

    /// Reconstructs every realization with each algorithm and writes the
    /// recorded traces and final images.
    pub fn reconstruct(&self, algorithms: &[Algorithm]) -> Result<()> {
        let data = self.load_phantom()?;
        let g = &self.cfg.geometry;
        for &alg in algorithms {
            let setup = self.load_setup(alg)?;
            let rcfg = self.cfg.recon.config_for(alg);
            let dir = self.ws.recon_dir(alg.name());
            log::info!("{alg}: {} realizations x {} iterations", data.sinograms.len(), rcfg.n_iters);
            let traces: Vec<Trace> = data
                .sinograms
                .par_iter()
                .map(|p| {
                    let mut frames = Vec::new();
                    let last = setup.run(&data.model, &rcfg, p, |_, img| frames.push(img.to_vec()))?;
                    Ok(Trace { frames, last })
                })
                .collect::<Result<_>>()?;
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            }
            for (i, t) in traces.iter().enumerate() {
                let name = realization_name(i);
                io::write_stack(&dir.join(format!("trace_{name}.stack")), g.image_width, g.image_height, &t.frames)?;
                io::write_array(&dir.join(format!("final_{name}.img")), g.image_width, g.image_height, &t.last)?;
            }
            self.ws.store_meta(
                &dir,
                &ReconMeta {
                    key: self.keys().recon(&rcfg),
                    iterations: self.cfg.recon.recorded_iterations(),
                    n_realizations: traces.len(),
                },
            )?;
        }
        Ok(())
    }

    // ---- report --------------------------------------------------------

    /// Writes the CSV tables, renders and image notes for every configured
    /// algorithm whose reconstruction is up to date.
    pub fn report(&self) -> Result<()> {
        let data = self.load_phantom()?;
        let f = data.reference.data();
        let (w, h) = (data.reference.width(), data.reference.height());
        let row = data.lesion_row.unwrap_or(h / 2);
        let dir = self.ws.report_dir();
        let mut amse_csv = String::from("algorithm,iteration,amse\n");
        let mut mse_csv = String::from("algorithm,realization,iteration,mse\n");
        let mut bv_csv = String::from("algorithm,iteration,bias,variance\n");
        let mut summary_csv = String::from("algorithm,min_amse,argmin_iteration,final_amse\n");
        let mut profiles_csv = String::from("algorithm,iteration,column,value\n");
        let mut notes = String::from("algorithm iteration realization mse file\n");
        let ref_max = data.reference.min_max().1;
        for (c, v) in line_profile(&data.reference, row)?.iter().enumerate() {
            writeln!(profiles_csv, "reference,0,{c},{v}").unwrap();
        }
        io::write_pgm(&dir.join("reference.pgm"), &data.reference, ref_max)?;
        for &alg in &self.cfg.recon.algorithms {
            let rcfg = self.cfg.recon.config_for(alg);
            let rdir = self.ws.recon_dir(alg.name());
            let meta = self
                .ws
                .load_meta::<ReconMeta>(&rdir, &self.keys().recon(&rcfg))?
                .ok_or_else(|| CliError::MissingCache {
                    stage: "reconstruction",
                    path: rdir.clone(),
                    command: "reconstruct",
                })?;
            let traces = (0..meta.n_realizations)
                .map(|i| {
                    let path = rdir.join(format!("trace_{}.stack", realization_name(i)));
                    let (_, _, frames) = io::read_stack(&path)?;
                    if frames.len() != meta.iterations.len() {
                        return Err(CliError::format(path, "frame count does not match the iteration list"));
                    }
                    Ok(frames)
                })
                .collect::<Result<Vec<_>>>()?;
            let name = alg.name();
            let mut curve = Vec::with_capacity(meta.iterations.len());
            for (k, &it) in meta.iterations.iter().enumerate() {
                let mut acc = 0.0;
                for (i, t) in traces.iter().enumerate() {
                    let m = mse(&t[k], f)?;
                    writeln!(mse_csv, "{name},{i},{it},{m}").unwrap();
                    acc += m;
                }
                let amse = acc / traces.len() as f64;
                writeln!(amse_csv, "{name},{it},{amse}").unwrap();
                curve.push((it, amse));
                if (3..=93).contains(&it) && (it - 3) % 10 == 0 {
                    let ensemble: Vec<&[f64]> = traces.iter().map(|t| t[k].as_slice()).collect();
                    let mean = ensemble_mean(&ensemble)?;
                    writeln!(bv_csv, "{name},{it},{},{}", bias(&mean, f)?, variance(&ensemble, f)?).unwrap();
                }
            }
            let Some((best_it, best)) = curve_minimum(&curve) else {
                continue;
            };
            let last = curve.last().expect("curve is non-empty").1;
            writeln!(summary_csv, "{name},{best},{best_it},{last}").unwrap();
            let k = meta.iterations.iter().position(|&i| i == best_it).expect("minimum is on the curve");
            let img = Image::new(w, h, traces[0][k].clone())?;
            for (c, v) in line_profile(&img, row)?.iter().enumerate() {
                writeln!(profiles_csv, "{name},{best_it},{c},{v}").unwrap();
            }
            let file = format!("{name}.pgm");
            io::write_pgm(&dir.join(&file), &img, ref_max)?;
            writeln!(notes, "{name} {best_it} 0 {} {file}", mse(img.data(), f)?).unwrap();
        }
        io::write_text(&dir.join("amse.csv"), &amse_csv)?;
        io::write_text(&dir.join("mse.csv"), &mse_csv)?;
        io::write_text(&dir.join("bias_variance.csv"), &bv_csv)?;
        io::write_text(&dir.join("summary.csv"), &summary_csv)?;
        io::write_text(&dir.join("profiles.csv"), &profiles_csv)?;
        io::write_text(&dir.join("images.txt"), &notes)?;
        Ok(())
    }

    // ---- sweep ---------------------------------------------------------

    /// AMMSE of each sweep algorithm for each `J_a`, written to
    /// `report/mmse_vs_Ja.csv`. Kernel and dictionary stages are cached per
    /// window width.
    pub fn sweep(&self) -> Result<Vec<SweepRow>> {
        let data = self.load_phantom()?;
        let mut rows = Vec::new();
        for &ja in &self.cfg.sweep.ja {
            let exp = Experiment {
                cfg: self.cfg.with_ja(ja),
                ws: self.ws.clone(),
            };
            exp.build_for(&self.cfg.sweep.algorithms)?;
            for &alg in &self.cfg.sweep.algorithms {
                let setup = exp.load_setup(alg)?;
                let (iteration, ammse) = setup.ammse(&data, &exp.cfg.recon.config_for(alg))?;
                log::info!("J_a={ja} {alg}: AMMSE {ammse:.5} at iteration {iteration}");
                rows.push(SweepRow {
                    algorithm: alg,
                    ja,
                    ammse,
                    iteration,
                });
            }
        }
        let mut csv = String::from("algorithm,ja,ammse,iteration\n");
        for r in &rows {
            writeln!(csv, "{},{},{},{}", r.algorithm, r.ja, r.ammse, r.iteration).unwrap();
        }
        io::write_text(&self.ws.report_dir().join("mmse_vs_Ja.csv"), &csv)?;
        Ok(rows)
    }
}

struct Trace {
    frames: Vec<Vec<f64>>,
    last: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub ja: usize,
    pub ammse: f64,
    pub iteration: usize,
}

/// Kernel and regularizers of one algorithm; empty for MLEM.
#[derive(Debug, Clone, Default)]
pub struct AlgorithmSetup {
    pub kernel: Option<KernelOperator>,
    pub dictionary: Option<DictionaryPack>,
    pub laplacian: Option<LaplacianPack>,
}

impl AlgorithmSetup {
    pub fn regularizers(&self) -> Regularizers<'_> {
        Regularizers {
            dictionary: self.dictionary.as_ref().map(DictionaryPack::prior),
            laplacian: self.laplacian.as_ref(),
        }
    }

    pub fn reconstructor<'a>(
        &'a self,
        model: &'a SystemModel,
        cfg: &ReconConfig,
        data: &'a [f64],
    ) -> Result<Reconstructor<'a>> {
        Ok(Reconstructor::new(model, cfg, self.kernel.as_ref(), self.regularizers(), data)?)
    }

    /// Runs one realization, calling `record` at each record point, and
    /// returns the final image.
    pub fn run(
        &self,
        model: &SystemModel,
        cfg: &ReconConfig,
        data: &[f64],
        mut record: impl FnMut(usize, &[f64]),
    ) -> Result<Vec<f64>> {
        let mut rec = self.reconstructor(model, cfg, data)?;
        for n in 1..=cfg.n_iters {
            rec.step()?;
            if n % cfg.record_every == 0 {
                record(n, &rec.image()?);
            }
        }
        Ok(rec.image()?)
    }

    /// Minimum over record points of the ensemble AMSE curve.
    pub fn ammse(&self, data: &PhantomData, cfg: &ReconConfig) -> Result<(usize, f64)> {
        let f = data.reference.data();
        let curves = data
            .sinograms
            .par_iter()
            .map(|p| {
                let mut curve = Vec::new();
                let mut err = None;
                self.run(&data.model, cfg, p, |n, img| match mse(img, f) {
                    Ok(m) => curve.push((n, m)),
                    Err(e) => err = Some(e),
                })?;
                match err {
                    Some(e) => Err(e.into()),
                    None => Ok(curve),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let o = curves.len() as f64;
        let amse: Vec<(usize, f64)> = (0..curves[0].len())
            .map(|k| (curves[0][k].0, curves.iter().map(|c| c[k].1).sum::<f64>() / o))
            .collect();
        Ok(curve_minimum(&amse).expect("at least one record point"))
    }
}

/// Flags of the `demo` command.
#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub output: PathBuf,
    pub size: usize,
    pub realizations: usize,
    pub iterations: usize,
    pub seed: u64,
    pub sweep: bool,
}

impl DemoOptions {
    pub fn config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::demo(self.size);
        cfg.output = self.output.clone();
        cfg.noise.n_realizations = self.realizations;
        cfg.noise.seed = self.seed;
        cfg.recon.n_iters = self.iterations;
        cfg
    }
}

/// Phantom, build, reconstruct and report in one go.
pub fn demo(opts: &DemoOptions) -> Result<Experiment> {
    let cfg = opts.config();
    cfg.validate()?;
    run_all(cfg, opts.sweep)
}

pub fn run_all(cfg: ExperimentConfig, sweep: bool) -> Result<Experiment> {
    let exp = Experiment::new(cfg);
    exp.phantom()?;
    exp.build()?;
    exp.reconstruct(&exp.cfg.recon.algorithms)?;
    exp.report()?;
    if sweep {
        exp.sweep()?;
    }
    exp.finish()?;
    Ok(exp)
}
