//! Shared numerical primitives: covariance eigendecomposition, whitening
//! transforms, a conjugate gradient solver and vector normalization.
//!
//! Everything here works in `f64`. Matrices follow the nalgebra convention
//! used across the crate: data matrices hold one sample per row.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a [`WhiteningTransform`] maps centered data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMode {
    /// Rotate onto the principal axes and scale each axis to unit variance.
    PcaWhiten,
    /// Rotate onto the principal axes without scaling.
    PcaRotateOnly,
    /// PCA whitening followed by the inverse rotation (symmetric transform).
    ZcaWhiten,
}

/// Floor added to every eigenvalue before taking `1/sqrt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EigenFloor {
    Absolute(f64),
    /// Multiple of the largest eigenvalue.
    RelativeToMax(f64),
}

impl Default for EigenFloor {
    fn default() -> Self {
        EigenFloor::RelativeToMax(1e-10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteningParams {
    pub mode: WhiteningMode,
    pub eps: EigenFloor,
    /// Number of largest-eigenvalue directions to discard.
    pub dropped_leading: usize,
    /// Number of smallest-eigenvalue directions to discard.
    pub dropped_trailing: usize,
}

impl WhiteningParams {
    pub fn new(mode: WhiteningMode) -> Self {
        Self {
            mode,
            eps: EigenFloor::default(),
            dropped_leading: 0,
            dropped_trailing: 0,
        }
    }

    pub fn eps(mut self, eps: EigenFloor) -> Self {
        self.eps = eps;
        self
    }

    pub fn drop_leading(mut self, count: usize) -> Self {
        self.dropped_leading = count;
        self
    }

    pub fn drop_trailing(mut self, count: usize) -> Self {
        self.dropped_trailing = count;
        self
    }
}

/// A fitted affine decorrelation `x ↦ scale ⊙ (rotation · (x − mean))`,
/// optionally rotated back for ZCA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// `d_out × d`, rows are the kept eigenvectors in descending eigenvalue order.
    pub rotation: DMatrix<f64>,
    pub scale: DVector<f64>,
    /// Eigenvalues belonging to the kept rows of `rotation`.
    pub eigenvalues: DVector<f64>,
    pub mode: WhiteningMode,
    /// Absolute eigenvalue floor that was used.
    pub eps: f64,
    pub dropped_leading: usize,
    pub dropped_trailing: usize,
}

impl WhiteningTransform {
    /// Transform with identity rotation, zero mean and unit scale.
    pub fn identity(dim: usize, mode: WhiteningMode) -> Self {
        Self {
            mean: DVector::zeros(dim),
            rotation: DMatrix::identity(dim, dim),
            scale: DVector::from_element(dim, 1.0),
            eigenvalues: DVector::from_element(dim, 1.0),
            mode,
            eps: 0.0,
            dropped_leading: 0,
            dropped_trailing: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            WhiteningMode::ZcaWhiten => self.rotation.ncols(),
            _ => self.rotation.nrows(),
        }
    }

    /// The linear part of the transform as an explicit `d_out × d` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_diagonal(&self.scale) * &self.rotation;
        match self.mode {
            WhiteningMode::ZcaWhiten => self.rotation.transpose() * scaled,
            _ => scaled,
        }
    }

    /// Maps one vector.
    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::precondition(format!(
                "whitening expects dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centered = x - &self.mean;
        let projected = (&self.rotation * centered).component_mul(&self.scale);
        Ok(match self.mode {
            WhiteningMode::ZcaWhiten => self.rotation.tr_mul(&projected),
            _ => projected,
        })
    }

    /// Maps every row of `x` (`n × d`) and returns `n × d_out`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::precondition(format!(
                "whitening expects {} columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        // (n × d) · (d × d_out)
        Ok(centered * self.matrix().transpose())
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
///
/// Ties keep their original index order. Each eigenvector is flipped so its
/// largest-magnitude entry is positive (first such entry on ties). Returns the
/// eigenvalues and a matrix whose rows are the eigenvectors.
pub fn sorted_symmetric_eigen(sym: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !sym.is_square() {
        return Err(Error::precondition("eigendecomposition needs a square matrix"));
    }
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite entry in matrix to decompose"));
    }
    let d = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("eigendecomposition produced non-finite values"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (row, &i) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            vectors[(row, j)] = sign * col[j];
        }
    }
    Ok((values, vectors))
}

/// Column means and unbiased (`n − 1`) covariance of the rows of `x`.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::precondition(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite sample in covariance input"));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    // Symmetrize against rounding.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Fits a whitening transform on the rows of `x` (`n × d`).
pub fn fit_whitening(x: &DMatrix<f64>, params: WhiteningParams) -> Result<WhiteningTransform> {
    let d = x.ncols();
    let (mean, cov) = mean_and_covariance(x)?;
    fit_whitening_from_covariance(mean, &cov, params)
        .map_err(|e| annotate(e, &format!("fitting whitening on {}×{d} data", x.nrows())))
}

fn annotate(err: Error, context: &str) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
        Error::Precondition(m) => Error::Precondition(format!("{context}: {m}")),
        other => other,
    }
}

/// Fits a whitening transform from an already accumulated mean and covariance.
pub fn fit_whitening_from_covariance(
    mean: DVector<f64>,
    cov: &DMatrix<f64>,
    params: WhiteningParams,
) -> Result<WhiteningTransform> {
    let d = cov.nrows();
    if mean.len() != d {
        return Err(Error::precondition("mean and covariance dimensions differ"));
    }
    let WhiteningParams {
        mode,
        eps,
        dropped_leading,
        dropped_trailing,
    } = params;
    if mode == WhiteningMode::ZcaWhiten && (dropped_leading > 0 || dropped_trailing > 0) {
        return Err(Error::precondition("zca whitening cannot drop directions"));
    }
    if dropped_leading + dropped_trailing >= d {
        return Err(Error::precondition(format!(
            "cannot drop {dropped_leading}+{dropped_trailing} of {d} directions"
        )));
    }

    let (values, vectors) = sorted_symmetric_eigen(cov)?;
    let largest = values[0].max(0.0);
    let eps = match eps {
        EigenFloor::Absolute(v) => v,
        EigenFloor::RelativeToMax(f) => f * largest,
    };
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::precondition(format!("eigenvalue floor must be finite and ≥ 0, got {eps}")));
    }

    let keep = dropped_leading..d - dropped_trailing;
    let kept_values = DVector::from_iterator(keep.len(), keep.clone().map(|i| values[i].max(0.0)));
    let rotation = vectors.rows(keep.start, keep.len()).into_owned();
    let scale = match mode {
        WhiteningMode::PcaRotateOnly => DVector::from_element(keep.len(), 1.0),
        _ => {
            let mut scale = DVector::zeros(keep.len());
            for (s, &lambda) in scale.iter_mut().zip(kept_values.iter()) {
                let denom = lambda + eps;
                if denom <= 0.0 {
                    return Err(Error::numeric(
                        "zero-variance direction with a zero eigenvalue floor",
                    ));
                }
                *s = 1.0 / denom.sqrt();
            }
            scale
        }
    };
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("whitening scale is not finite"));
    }

    Ok(WhiteningTransform {
        mean,
        rotation,
        scale,
        eigenvalues: kept_values,
        mode,
        eps,
        dropped_leading,
        dropped_trailing,
    })
}

/// PCA whitening that keeps the `components` leading directions, computed
/// from the `n × n` Gram matrix of the centered rows. Suited to `n ≪ d`.
pub fn fit_pca_whitening_gram(x: &DMatrix<f64>, components: usize, eps: EigenFloor) -> Result<WhiteningTransform> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::precondition(format!("whitening needs at least 2 samples, got {n}")));
    }
    if components == 0 || components > d.min(n - 1) {
        return Err(Error::precondition(format!(
            "cannot keep {components} components from {n} samples of dimension {d}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite sample in whitening input"));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let gram = &centered * centered.transpose() / (n as f64 - 1.0);
    let gram = (&gram + gram.transpose()) * 0.5;
    let (values, vectors) = sorted_symmetric_eigen(&gram)?;
    let largest = values[0].max(0.0);
    let eps = match eps {
        EigenFloor::Absolute(v) => v,
        EigenFloor::RelativeToMax(f) => f * largest,
    };
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::precondition(format!("eigenvalue floor must be finite and ≥ 0, got {eps}")));
    }
    let mut rotation = DMatrix::zeros(components, d);
    let mut scale = DVector::zeros(components);
    let mut kept = DVector::zeros(components);
    for i in 0..components {
        let lambda = values[i];
        if lambda <= 0.0 {
            return Err(Error::numeric(format!(
                "data spans fewer than {components} directions"
            )));
        }
        // Covariance eigenvector from the Gram eigenvector.
        let mut v = centered.tr_mul(&vectors.row(i).transpose());
        v /= v.norm();
        let mut pivot = 0;
        for j in 1..d {
            if v[j].abs() > v[pivot].abs() {
                pivot = j;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        rotation.row_mut(i).copy_from(&v.transpose());
        scale[i] = 1.0 / (lambda + eps).sqrt();
        kept[i] = lambda;
    }
    Ok(WhiteningTransform {
        mean,
        rotation,
        scale,
        eigenvalues: kept,
        mode: WhiteningMode::PcaWhiten,
        eps,
        dropped_leading: 0,
        dropped_trailing: d - components,
    })
}

/// Stopping rule for [`cgd_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgdOptions {
    /// Relative residual threshold `‖Ax − b‖ ≤ tol·‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl CgdOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::precondition(format!("cgd tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::precondition("cgd max_iter must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgdOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Final relative residual `‖Ax − b‖ / ‖b‖`.
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for a symmetric positive (semi-)definite operator.
///
/// `apply_a` must compute `A·v`. Starts from `x0` when given, else from zero.
/// Convergence is confirmed on the true residual, not the recurrence.
pub fn cgd_solve<F>(
    apply_a: F,
    b: &DVector<f64>,
    x0: Option<DVector<f64>>,
    opts: &CgdOptions,
) -> Result<CgdOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    opts.validate()?;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite right-hand side"));
    }
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(CgdOutcome {
            x: DVector::zeros(b.len()),
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }

    let mut x = match x0 {
        Some(x0) if x0.len() == b.len() => x0,
        Some(_) => return Err(Error::precondition("cgd start vector has wrong dimension")),
        None => DVector::zeros(b.len()),
    };
    let threshold = opts.tol * b_norm;
    let mut r = b - apply_a(&x);
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut iterations = 0;

    loop {
        if !rr.is_finite() {
            return Err(Error::numeric("cgd residual became non-finite"));
        }
        if rr.sqrt() <= threshold {
            // Recurrence residuals drift; confirm before returning.
            let true_r = b - apply_a(&x);
            let true_norm = true_r.norm();
            if true_norm <= threshold || iterations >= opts.max_iter {
                return Ok(CgdOutcome {
                    x,
                    iterations,
                    residual: true_norm / b_norm,
                    converged: true_norm <= threshold,
                });
            }
            r = true_r;
            p = r.clone();
            rr = r.norm_squared();
        }
        if iterations >= opts.max_iter {
            break;
        }

        let ap = apply_a(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::numeric("cgd curvature became non-finite"));
        }
        if pap <= 0.0 {
            // Direction in the null space: nothing more to gain.
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_next = r.norm_squared();
        p.axpy(1.0, &r, rr_next / rr);
        rr = rr_next;
        iterations += 1;
    }

    let residual = (b - apply_a(&x)).norm() / b_norm;
    if !residual.is_finite() {
        return Err(Error::numeric("cgd produced a non-finite solution"));
    }
    Ok(CgdOutcome {
        x,
        iterations,
        residual,
        converged: residual <= opts.tol,
    })
}

/// Returns `v / ‖v‖₂`, or `v` unchanged when its norm is zero.
pub fn l2_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("cannot normalize a non-finite vector"));
    }
    let mut out = v.clone();
    l2_normalize_mut(out.as_mut_slice());
    Ok(out)
}

/// In-place L2 normalization of a finite slice; zero stays zero.
pub(crate) fn l2_normalize_mut(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}
