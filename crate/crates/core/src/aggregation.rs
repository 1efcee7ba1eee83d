//! Pooling of per-descriptor embeddings into one global vector: sum pooling
//! and generalized max pooling (GMP).
//!
//! GMP looks for `ξ` with `φ(x)ᵀξ = 1` for every descriptor, relaxed to the
//! ridge problem `min ‖Φᵀξ − 1‖² + λ‖ξ‖²` and solved with conjugate gradients.
//! When there are fewer descriptors than dimensions the equivalent dual form
//! `ξ = Φ(ΦᵀΦ + λI)⁻¹1` is solved instead.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddedSet, EmbeddingKind};
use crate::error::{Error, Result};
use crate::numerics::{cgd_solve, CgdOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub embedding: Option<EmbeddingKind>,
    pub pooling: Option<String>,
    pub lambda: Option<f64>,
    pub normalizations: Vec<String>,
    pub codebook_seed: Option<u64>,
}

/// Aggregated representation of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub psi: DVector<f64>,
    pub k: usize,
    pub component_dim: usize,
    pub provenance: Provenance,
}

impl GlobalDescriptor {
    /// A bare descriptor treated as a single block.
    pub fn from_vector(psi: DVector<f64>) -> Self {
        let d = psi.len();
        Self {
            psi,
            k: 1,
            component_dim: d,
            provenance: Provenance::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmpOptions {
    pub lambda: f64,
    /// Solve one ridge problem per component block.
    pub component_wise: bool,
    pub cgd: CgdOptions,
}

impl Default for GmpOptions {
    fn default() -> Self {
        Self {
            lambda: 1000.0,
            component_wise: false,
            cgd: CgdOptions::default(),
        }
    }
}

impl GmpOptions {
    /// The λ = 1 setting commonly recommended for GMP.
    pub fn unit_lambda() -> Self {
        Self {
            lambda: 1.0,
            ..Self::default()
        }
    }

    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::precondition(format!("gmp lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        self.cgd.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolingKind {
    Sum,
    Gmp(GmpOptions),
}

impl PoolingKind {
    /// Resolves a pooling name as written in configs.
    pub fn from_name(name: &str, gmp: GmpOptions) -> Result<Self> {
        match name {
            "sum" => Ok(PoolingKind::Sum),
            "gmp" => Ok(PoolingKind::Gmp(gmp)),
            other => Err(Error::config(format!("unknown pooling kind '{other}' (expected sum or gmp)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingKind::Sum => "sum",
            PoolingKind::Gmp(_) => "gmp",
        }
    }
}

fn descriptor_for(e: &EmbeddedSet, psi: DVector<f64>, pooling: &str, lambda: Option<f64>) -> GlobalDescriptor {
    GlobalDescriptor {
        psi,
        k: e.k,
        component_dim: e.component_dim,
        provenance: Provenance {
            embedding: Some(e.kind),
            pooling: Some(pooling.to_string()),
            lambda,
            ..Provenance::default()
        },
    }
}

pub fn sum_pool(e: &EmbeddedSet) -> Result<GlobalDescriptor> {
    if e.is_empty() {
        return Err(Error::precondition("cannot pool an empty embedding set"));
    }
    Ok(descriptor_for(e, e.phi.column_sum(), "sum", None))
}

/// Result of one GMP ridge solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GmpSolution {
    pub xi: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Solves `min ‖Φᵀξ − 1‖² + λ‖ξ‖²` for a `D × n` matrix `Φ`.
///
/// All-zero columns only add a constant to the objective and are dropped.
pub fn gmp_solve(phi: &DMatrix<f64>, lambda: f64, cgd: &CgdOptions) -> Result<GmpSolution> {
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite embedding in gmp"));
    }
    let d = phi.nrows();
    let keep: Vec<usize> = (0..phi.ncols()).filter(|&j| phi.column(j).iter().any(|&v| v != 0.0)).collect();
    if keep.is_empty() {
        return Ok(GmpSolution {
            xi: DVector::zeros(d),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let phi = if keep.len() == phi.ncols() {
        phi.clone()
    } else {
        phi.select_columns(&keep)
    };
    let n = phi.ncols();
    let start_scale = 1.0 / (n as f64 + lambda);

    if n < d {
        // Dual: (ΦᵀΦ + λI)α = 1, ξ = Φα.
        let ones = DVector::from_element(n, 1.0);
        let x0 = DVector::from_element(n, start_scale);
        let out = cgd_solve(|v| phi.tr_mul(&(&phi * v)) + v * lambda, &ones, Some(x0), cgd)?;
        Ok(GmpSolution {
            xi: &phi * out.x,
            iterations: out.iterations,
            residual: out.residual,
            converged: out.converged,
        })
    } else {
        // Primal: (ΦΦᵀ + λI)ξ = Φ1.
        let rhs = phi.column_sum();
        let x0 = &rhs * start_scale;
        let out = cgd_solve(|v| &phi * phi.tr_mul(v) + v * lambda, &rhs, Some(x0), cgd)?;
        Ok(GmpSolution {
            xi: out.x,
            iterations: out.iterations,
            residual: out.residual,
            converged: out.converged,
        })
    }
}

/// Generalized max pooling with the target constant fixed to 1.
pub fn gmp_pool(e: &EmbeddedSet, opts: &GmpOptions) -> Result<GlobalDescriptor> {
    if e.is_empty() {
        return Err(Error::precondition("cannot pool an empty embedding set"));
    }
    opts.validate()?;
    let psi = if opts.component_wise && e.k > 1 {
        let cd = e.component_dim;
        let blocks: Vec<Result<GmpSolution>> = (0..e.k)
            .into_par_iter()
            .map(|k| gmp_solve(&e.phi.rows(k * cd, cd).into_owned(), opts.lambda, &opts.cgd))
            .collect();
        let mut psi = DVector::zeros(e.dim());
        for (k, block) in blocks.into_iter().enumerate() {
            let block = block?;
            report_convergence(&block, Some(k));
            psi.rows_mut(k * cd, cd).copy_from(&block.xi);
        }
        psi
    } else {
        let sol = gmp_solve(&e.phi, opts.lambda, &opts.cgd)?;
        report_convergence(&sol, None);
        sol.xi
    };
    Ok(descriptor_for(e, psi, "gmp", Some(opts.lambda)))
}

fn report_convergence(sol: &GmpSolution, block: Option<usize>) {
    if !sol.converged {
        match block {
            Some(k) => warn!(
                "gmp block {k}: cgd stopped after {} iterations with relative residual {:.3e}",
                sol.iterations, sol.residual
            ),
            None => warn!(
                "gmp: cgd stopped after {} iterations with relative residual {:.3e}",
                sol.iterations, sol.residual
            ),
        }
    }
}

pub fn pool(e: &EmbeddedSet, kind: &PoolingKind) -> Result<GlobalDescriptor> {
    match kind {
        PoolingKind::Sum => sum_pool(e),
        PoolingKind::Gmp(opts) => gmp_pool(e, opts),
    }
}
