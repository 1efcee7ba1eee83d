//! Per-descriptor embeddings: VLAD hard-assignment residuals and
//! triangulation embedding, plus the per-cluster (LCS) and global whitening
//! fitted for them.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codebook::{nearest, Codebook};
use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::numerics::{
    fit_whitening, fit_whitening_from_covariance, l2_normalize_mut, EigenFloor, WhiteningMode, WhiteningParams,
    WhiteningTransform,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Vlad,
    Temb,
}

/// Embeddings of one document, one column per descriptor (`D × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    pub phi: DMatrix<f64>,
    /// Number of component blocks.
    pub k: usize,
    pub component_dim: usize,
    pub kind: EmbeddingKind,
}

impl EmbeddedSet {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn len(&self) -> usize {
        self.phi.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.ncols() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcsVariant {
    /// Per-cluster PCA whitening, dimension preserving.
    LcsWhiten,
    /// Per-cluster PCA rotation dropping the largest-variance direction.
    LcsPlusPlus,
}

/// One whitening transform per codebook center, applied to residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcsTransforms {
    pub per_cluster: Vec<WhiteningTransform>,
    pub variant: LcsVariant,
}

impl LcsTransforms {
    pub fn output_dim(&self) -> usize {
        self.per_cluster.first().map_or(0, WhiteningTransform::output_dim)
    }
}

fn check_dims(cb: &Codebook, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != cb.dim() {
        return Err(Error::precondition(format!(
            "descriptors have dimension {}, codebook has {}",
            x.ncols(),
            cb.dim()
        )));
    }
    Ok(())
}

/// Row `i` of `x` as an owned vector (nalgebra storage is column-major).
fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// VLAD embedding: each descriptor's residual to its nearest center, placed
/// in that center's block.
pub fn embed_vlad(
    cb: &Codebook,
    set: &DescriptorSet,
    residual_normalize: bool,
    lcs: Option<&LcsTransforms>,
) -> Result<EmbeddedSet> {
    let x = &set.descriptors;
    check_dims(cb, x)?;
    let k = cb.k();
    let dim = cb.dim();
    if let Some(lcs) = lcs {
        if lcs.per_cluster.len() != k || lcs.per_cluster.iter().any(|t| t.input_dim() != dim) {
            return Err(Error::precondition("lcs transforms do not match the codebook"));
        }
    }
    let block = lcs.map_or(dim, LcsTransforms::output_dim);
    let centers = cb.rows();
    let mut phi = DMatrix::zeros(k * block, x.nrows());
    for t in 0..x.nrows() {
        let xt = row(x, t);
        let (c, _) = nearest(&centers, dim, &xt);
        let mut residual: Vec<f64> = xt.iter().zip(&centers[c * dim..(c + 1) * dim]).map(|(a, m)| a - m).collect();
        if residual_normalize {
            l2_normalize_mut(&mut residual);
        }
        let out = match lcs {
            Some(lcs) => {
                let r = DVector::from_vec(residual);
                lcs.per_cluster[c].apply_vec(&r)?.as_slice().to_vec()
            }
            None => residual,
        };
        phi.view_mut((c * block, t), (block, 1)).copy_from_slice(&out);
    }
    Ok(EmbeddedSet {
        phi,
        k,
        component_dim: block,
        kind: EmbeddingKind::Vlad,
    })
}

/// Unit residuals of `x` to every center, concatenated (`K·D_l`), without any
/// normalization of the full vector. Returns the number of nonzero blocks.
fn temb_raw(centers: &[f64], dim: usize, x: &[f64], out: &mut [f64]) -> usize {
    let mut nonzero = 0;
    for (c, block) in centers.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        for ((o, a), m) in block.iter_mut().zip(x).zip(c) {
            *o = a - m;
        }
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            block.iter_mut().for_each(|v| *v /= norm);
            nonzero += 1;
        }
    }
    nonzero
}

/// Triangulation embedding: normalized residuals to all centers, optionally
/// whitened, then L2-normalized.
pub fn embed_temb(cb: &Codebook, set: &DescriptorSet, whitening: Option<&WhiteningTransform>) -> Result<EmbeddedSet> {
    let x = &set.descriptors;
    check_dims(cb, x)?;
    let k = cb.k();
    let dim = cb.dim();
    let raw_dim = k * dim;
    if let Some(tw) = whitening {
        if tw.input_dim() != raw_dim {
            return Err(Error::precondition(format!(
                "t-emb whitening expects {} inputs, embedding has {raw_dim}",
                tw.input_dim()
            )));
        }
    }
    let centers = cb.rows();
    let out_dim = whitening.map_or(raw_dim, WhiteningTransform::output_dim);
    let mut phi = DMatrix::zeros(out_dim, x.nrows());
    let mut raw = vec![0.0; raw_dim];
    for t in 0..x.nrows() {
        let nonzero = temb_raw(&centers, dim, &row(x, t), &mut raw);
        match whitening {
            Some(tw) => {
                let mut v = tw.apply_vec(&DVector::from_column_slice(&raw))?;
                l2_normalize_mut(v.as_mut_slice());
                phi.column_mut(t).copy_from(&v);
            }
            None => {
                // Unit blocks: the full norm is sqrt(#nonzero blocks).
                let scale = (nonzero.max(1) as f64).sqrt();
                for (dst, v) in phi.column_mut(t).iter_mut().zip(&raw) {
                    *dst = v / scale;
                }
            }
        }
    }
    let (k_out, component_dim) = if whitening.is_some() { (1, out_dim) } else { (k, dim) };
    Ok(EmbeddedSet {
        phi,
        k: k_out,
        component_dim,
        kind: EmbeddingKind::Temb,
    })
}

/// Fits one transform per center on the L2-normalized residuals of the
/// training descriptors assigned to it.
///
/// Clusters with at most `D_l` residuals (singular covariance), or with no
/// variance at all, get an identity transform (for LCS++ the identity minus its first coordinate).
/// The fitted transforms are applied without re-centering, so they act as
/// pure linear maps of the residual.
pub fn fit_lcs(cb: &Codebook, x_train: &DMatrix<f64>, variant: LcsVariant) -> Result<LcsTransforms> {
    check_dims(cb, x_train)?;
    let k = cb.k();
    let dim = cb.dim();
    if variant == LcsVariant::LcsPlusPlus && dim < 2 {
        return Err(Error::precondition("lcs++ needs descriptors of dimension ≥ 2"));
    }
    let centers = cb.rows();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for i in 0..x_train.nrows() {
        let xi = row(x_train, i);
        let (c, _) = nearest(&centers, dim, &xi);
        let mut r: Vec<f64> = xi.iter().zip(&centers[c * dim..(c + 1) * dim]).map(|(a, m)| a - m).collect();
        l2_normalize_mut(&mut r);
        members[c].extend(r);
    }

    let params = match variant {
        LcsVariant::LcsWhiten => WhiteningParams::new(WhiteningMode::PcaWhiten),
        LcsVariant::LcsPlusPlus => WhiteningParams::new(WhiteningMode::PcaRotateOnly).drop_leading(1),
    };
    let mut per_cluster = Vec::with_capacity(k);
    for (c, flat) in members.iter().enumerate() {
        let count = flat.len() / dim;
        let fitted = if count > dim {
            let residuals = DMatrix::from_row_slice(count, dim, flat);
            match fit_whitening(&residuals, params) {
                Ok(mut t) => {
                    t.mean = DVector::zeros(dim);
                    Some(t)
                }
                Err(Error::Numeric(msg)) => {
                    warn!("lcs cluster {c}: {msg}; using identity");
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            warn!("lcs cluster {c} has {count} training residuals; using identity");
            None
        };
        per_cluster.push(fitted.unwrap_or_else(|| lcs_identity(dim, variant)));
    }
    Ok(LcsTransforms { per_cluster, variant })
}

fn lcs_identity(dim: usize, variant: LcsVariant) -> WhiteningTransform {
    match variant {
        LcsVariant::LcsWhiten => WhiteningTransform::identity(dim, WhiteningMode::PcaWhiten),
        LcsVariant::LcsPlusPlus => {
            let mut t = WhiteningTransform::identity(dim, WhiteningMode::PcaRotateOnly);
            t.rotation = t.rotation.rows(1, dim - 1).into_owned();
            t.scale = DVector::from_element(dim - 1, 1.0);
            t.eigenvalues = DVector::from_element(dim - 1, 1.0);
            t.dropped_leading = 1;
            t
        }
    }
}

/// Fits PCA whitening on raw triangulation embeddings of the training
/// descriptors, discarding the `D_l` largest-eigenvalue directions.
pub fn fit_temb_whitening(cb: &Codebook, x_train: &DMatrix<f64>) -> Result<WhiteningTransform> {
    fit_temb_whitening_with(cb, x_train, EigenFloor::default())
}

pub fn fit_temb_whitening_with(cb: &Codebook, x_train: &DMatrix<f64>, eps: EigenFloor) -> Result<WhiteningTransform> {
    check_dims(cb, x_train)?;
    let m = x_train.nrows();
    if m < 2 {
        return Err(Error::precondition(format!("t-emb whitening needs ≥ 2 descriptors, got {m}")));
    }
    let dim = cb.dim();
    let raw_dim = cb.k() * dim;
    let centers = cb.rows();

    // Streamed covariance: Σ φφᵀ and Σ φ in chunks, then center.
    const CHUNK: usize = 256;
    let mut gram = DMatrix::<f64>::zeros(raw_dim, raw_dim);
    let mut sum = DVector::<f64>::zeros(raw_dim);
    let mut raw = vec![0.0; raw_dim];
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let mut chunk = DMatrix::<f64>::zeros(raw_dim, rows);
        for j in 0..rows {
            temb_raw(&centers, dim, &row(x_train, start + j), &mut raw);
            chunk.column_mut(j).copy_from_slice(&raw);
        }
        gram.gemm(1.0, &chunk, &chunk.transpose(), 1.0);
        sum += chunk.column_sum();
        start += rows;
    }
    let mean = sum / m as f64;
    let mut cov = (gram - &mean * mean.transpose() * m as f64) / (m as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;

    let params = WhiteningParams::new(WhiteningMode::PcaWhiten).eps(eps).drop_leading(dim);
    fit_whitening_from_covariance(mean, &cov, params)
}
