//! Assembly of the kernel, dictionary and graph stages into the inputs of a
//! regularized reconstruction.

use serde::{Deserialize, Serialize};

use crate::dictionary::{
    build_learning_data, ksvd_learn, local_patch_operator, map_with_local, Dictionary, DictionaryMapping, DictionarySpec, PatchOperator,
};
use crate::error::Result;
use crate::graph::{build_laplacian, GraphSpec, LaplacianPack};
use crate::image::Image;
use crate::kernel::{
    build_kernel_operator, build_multi_kernel, factorize_regularized, KernelOperator, KernelSpec, MultiKernelSpec,
};
use crate::linalg::SparseMatrix;
use crate::recon::{DictionaryPrior, Regularizers};

/// Kernel pair `K_Ma = K_a^G` (reconstruction) and `K_Mb = K_b^G` (learning).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSetup {
    pub a: KernelSpec,
    pub b: KernelSpec,
    pub g: usize,
}

impl Default for KernelSetup {
    fn default() -> Self {
        Self {
            a: KernelSpec::gaussian_window(0.5, 21),
            b: KernelSpec::gaussian_window(0.5, 3),
            g: 2,
        }
    }
}

impl KernelSetup {
    pub fn k_ma(&self, priors: &[Image]) -> Result<KernelOperator> {
        build_kernel_operator(priors, &MultiKernelSpec::repeated(self.a, self.g))
    }

    pub fn k_mb(&self, priors: &[Image]) -> Result<SparseMatrix> {
        build_multi_kernel(priors, &MultiKernelSpec::repeated(self.b, self.g))
    }
}

/// `K^g` kept as `g` copies of the factor.
pub fn repeat_kernel(k: &SparseMatrix, g: usize) -> Result<KernelOperator> {
    KernelOperator::from_factors(vec![k.clone(); g])
}

/// Learned atoms `D_b`, their coefficient-space image `D_a` and diagnostics.
#[derive(Debug, Clone)]
pub struct DictionaryPack {
    pub d_b: Dictionary,
    pub d_a: Dictionary,
    pub patches: PatchOperator,
    pub sparsity: usize,
    /// K-SVD objective per round.
    pub objective: Vec<f64>,
    /// Ridge and relative residual of the factorization, when one was needed.
    pub factor_ridge: Option<f64>,
    pub factor_residual: Option<f64>,
    /// Patch-local restriction of `K~` used to map the atoms, when one was needed.
    pub local_operator: Option<Vec<f64>>,
}

impl DictionaryPack {
    pub fn prior(&self) -> DictionaryPrior<'_> {
        DictionaryPrior {
            dictionary: &self.d_a,
            patches: self.patches,
            sparsity: self.sparsity,
        }
    }
}

/// Learns `D_b` on `K_Mb^{-1} X~` and maps it into the coefficient space of `K_Ma`.
pub fn build_dictionary(
    priors: &[Image],
    k_ma: &KernelOperator,
    k_mb: &SparseMatrix,
    spec: &DictionarySpec,
) -> Result<DictionaryPack> {
    spec.validate()?;
    let (w, h) = (priors[0].width(), priors[0].height());
    let op = PatchOperator::new(spec.patch_w, spec.stride, w, h)?;
    let data = build_learning_data(k_mb, priors, &op, spec.n_train, spec.seed)?;
    let learned = ksvd_learn(&data, spec.n_atoms, spec.sparsity, spec.n_iters, spec.seed)?;
    let (d_a, factor_ridge, factor_residual, local_operator) = match spec.mapping {
        DictionaryMapping::Bypass => (learned.dictionary.clone(), None, None, None),
        DictionaryMapping::PatchLocal => {
            let f = factorize_regularized(&k_ma.to_matrix()?, k_mb, None)?;
            log::info!("K~ factor: ridge {:.3e}, residual {:.3e}", f.ridge, f.residual);
            let local = local_patch_operator(&f.k_tilde, &op)?;
            let d_a = map_with_local(&local, &learned.dictionary)?;
            (d_a, Some(f.ridge), Some(f.residual), Some(local))
        }
    };
    Ok(DictionaryPack {
        d_b: learned.dictionary,
        d_a,
        patches: op,
        sparsity: spec.coding_sparsity(),
        objective: learned.objective,
        factor_ridge,
        factor_residual,
        local_operator,
    })
}

/// Everything KREM / MKREM needs besides the data.
#[derive(Debug, Clone)]
pub struct RegularizedSetup {
    pub k_ma: KernelOperator,
    pub dictionary: DictionaryPack,
    pub laplacian: LaplacianPack,
}

impl RegularizedSetup {
    pub fn build(
        priors: &[Image],
        kernels: &KernelSetup,
        dict: &DictionarySpec,
        graph: &GraphSpec,
    ) -> Result<Self> {
        let k_ma = kernels.k_ma(priors)?;
        let k_mb = kernels.k_mb(priors)?;
        let dictionary = build_dictionary(priors, &k_ma, &k_mb, dict)?;
        let laplacian = build_laplacian(priors, graph)?;
        Ok(Self {
            k_ma,
            dictionary,
            laplacian,
        })
    }

    pub fn regularizers(&self) -> Regularizers<'_> {
        Regularizers {
            dictionary: Some(self.dictionary.prior()),
            laplacian: Some(&self.laplacian),
        }
    }
}
