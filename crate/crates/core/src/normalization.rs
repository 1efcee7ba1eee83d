//! Post-aggregation normalizations and the chains that sequence them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregation::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::numerics::{
    fit_pca_whitening_gram, fit_whitening, l2_normalize, EigenFloor, WhiteningMode, WhiteningParams, WhiteningTransform,
};

pub const DEFAULT_POWER: f64 = 0.5;

/// Signed power normalization `sign(ψᵢ)·|ψᵢ|^p`.
pub fn power_normalize(psi: &DVector<f64>, p: f64) -> Result<DVector<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::precondition(format!("power exponent must be in (0, 1], got {p}")));
    }
    Ok(psi.map(|v| v.signum() * v.abs().powf(p)))
}

/// L2-normalizes each of the `k` blocks of length `component_dim`.
pub fn intra_normalize(psi: &DVector<f64>, k: usize, component_dim: usize) -> Result<DVector<f64>> {
    if psi.len() != k * component_dim {
        return Err(Error::precondition(format!(
            "vector of length {} is not {k} blocks of {component_dim}",
            psi.len()
        )));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("cannot intra-normalize a non-finite vector"));
    }
    let mut out = psi.clone();
    if component_dim > 0 {
        for block in out.as_mut_slice().chunks_exact_mut(component_dim) {
            crate::numerics::l2_normalize_mut(block);
        }
    }
    Ok(out)
}

/// PCA rotation (no scaling) followed by power normalization.
pub fn rotation_normalize(psi: &DVector<f64>, rot: &WhiteningTransform, p: f64) -> Result<DVector<f64>> {
    if rot.mode != WhiteningMode::PcaRotateOnly {
        return Err(Error::precondition("rotation normalization needs a rotation-only transform"));
    }
    power_normalize(&rot.apply_vec(psi)?, p)
}

/// Rotation for [`rotation_normalize`], fit on training global descriptors.
pub fn fit_rotation(training: &[DVector<f64>]) -> Result<WhiteningTransform> {
    fit_whitening(&stack(training)?, WhiteningParams::new(WhiteningMode::PcaRotateOnly))
}

fn stack(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::precondition("no training vectors"));
    };
    let d = first.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::precondition("training vectors differ in dimension"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// A fitted normalization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum NormStep {
    Power { p: f64 },
    Intra,
    Rotation { transform: WhiteningTransform, p: f64 },
    GlobalPcaWhiten { transform: WhiteningTransform },
    L2,
}

impl NormStep {
    pub fn label(&self) -> String {
        match self {
            NormStep::Power { p } => format!("power({p})"),
            NormStep::Intra => "intra".into(),
            NormStep::Rotation { p, .. } => format!("rotation({p})"),
            NormStep::GlobalPcaWhiten { .. } => "global_pca_whiten".into(),
            NormStep::L2 => "l2".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationChain {
    steps: Vec<NormStep>,
}

impl NormalizationChain {
    pub fn new(steps: Vec<NormStep>) -> Result<Self> {
        let fitted = steps
            .iter()
            .filter(|s| matches!(s, NormStep::Rotation { .. } | NormStep::GlobalPcaWhiten { .. }))
            .count();
        if fitted > 1 {
            return Err(Error::config("a chain may hold at most one rotation or global whitening step"));
        }
        Ok(Self { steps })
    }

    /// Power normalization with `p = 0.5` followed by L2.
    pub fn ssr() -> Self {
        Self {
            steps: vec![NormStep::Power { p: DEFAULT_POWER }, NormStep::L2],
        }
    }

    pub fn steps(&self) -> &[NormStep] {
        &self.steps
    }
}

fn apply_step(step: &NormStep, gd: &GlobalDescriptor) -> Result<GlobalDescriptor> {
    let mut out = gd.clone();
    match step {
        NormStep::Power { p } => out.psi = power_normalize(&gd.psi, *p)?,
        NormStep::Intra => out.psi = intra_normalize(&gd.psi, gd.k, gd.component_dim)?,
        NormStep::L2 => out.psi = l2_normalize(&gd.psi)?,
        NormStep::Rotation { transform, p } => {
            out.psi = rotation_normalize(&gd.psi, transform, *p)?;
            out.k = 1;
            out.component_dim = out.psi.len();
        }
        NormStep::GlobalPcaWhiten { transform } => {
            out.psi = transform.apply_vec(&gd.psi)?;
            out.k = 1;
            out.component_dim = out.psi.len();
        }
    }
    out.provenance.normalizations.push(step.label());
    Ok(out)
}

/// Applies the chain's steps in order, recording each in the provenance.
pub fn apply_chain(chain: &NormalizationChain, gd: &GlobalDescriptor) -> Result<GlobalDescriptor> {
    chain.steps.iter().try_fold(gd.clone(), |acc, step| apply_step(step, &acc))
}

/// An unfitted chain step as declared in a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum StepSpec {
    Power { p: f64 },
    Intra,
    Rotation { p: f64 },
    GlobalPcaWhiten { dropped_trailing: usize },
    L2,
}

impl StepSpec {
    /// Parses `power`, `power:0.3`, `intra`, `rotation`, `rotation:0.5`,
    /// `pca_whiten`, `pca_whiten:16` (trailing dims dropped) or `l2`.
    pub fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        let (name, arg) = match token.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (token, None),
        };
        let float = |a: Option<&str>| -> Result<f64> {
            a.map_or(Ok(DEFAULT_POWER), |s| {
                s.parse().map_err(|_| Error::config(format!("bad number '{s}' in chain step '{token}'")))
            })
        };
        match name {
            "power" | "ssr" => Ok(StepSpec::Power { p: float(arg)? }),
            "intra" => Ok(StepSpec::Intra),
            "rotation" => Ok(StepSpec::Rotation { p: float(arg)? }),
            "pca_whiten" | "global_pca_whiten" => Ok(StepSpec::GlobalPcaWhiten {
                dropped_trailing: arg.map_or(Ok(0), |s| {
                    s.parse().map_err(|_| Error::config(format!("bad count '{s}' in chain step '{token}'")))
                })?,
            }),
            "l2" => Ok(StepSpec::L2),
            other => Err(Error::config(format!("unknown normalization step '{other}'"))),
        }
    }

    pub fn to_token(&self) -> String {
        match self {
            StepSpec::Power { p } => format!("power:{p}"),
            StepSpec::Intra => "intra".into(),
            StepSpec::Rotation { p } => format!("rotation:{p}"),
            StepSpec::GlobalPcaWhiten { dropped_trailing: 0 } => "pca_whiten".into(),
            StepSpec::GlobalPcaWhiten { dropped_trailing } => format!("pca_whiten:{dropped_trailing}"),
            StepSpec::L2 => "l2".into(),
        }
    }

    pub fn needs_fit(&self) -> bool {
        matches!(self, StepSpec::Rotation { .. } | StepSpec::GlobalPcaWhiten { .. })
    }
}

pub fn parse_chain(list: &str) -> Result<Vec<StepSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != "none")
        .map(StepSpec::parse)
        .collect()
}

/// Fits the chain's transforms on training global descriptors. Each fitted
/// step sees the training vectors as transformed by the steps before it.
pub fn fit_chain(specs: &[StepSpec], training: &[GlobalDescriptor]) -> Result<NormalizationChain> {
    let mut current: Vec<GlobalDescriptor> = training.to_vec();
    let mut steps = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let step = match spec {
            StepSpec::Power { p } => NormStep::Power { p: *p },
            StepSpec::Intra => NormStep::Intra,
            StepSpec::L2 => NormStep::L2,
            StepSpec::Rotation { p } => {
                let vectors: Vec<_> = current.iter().map(|g| g.psi.clone()).collect();
                NormStep::Rotation {
                    transform: fit_rotation(&vectors)
                        .map_err(|e| fit_error("rotation normalization", e))?,
                    p: *p,
                }
            }
            StepSpec::GlobalPcaWhiten { dropped_trailing } => {
                let vectors: Vec<_> = current.iter().map(|g| g.psi.clone()).collect();
                let params = WhiteningParams::new(WhiteningMode::PcaWhiten).drop_trailing(*dropped_trailing);
                NormStep::GlobalPcaWhiten {
                    transform: fit_whitening(&stack(&vectors)?, params)
                        .map_err(|e| fit_error("global pca whitening", e))?,
                }
            }
        };
        if specs[i + 1..].iter().any(StepSpec::needs_fit) {
            current = current
                .iter()
                .map(|g| apply_step(&step, g))
                .collect::<Result<_>>()?;
        }
        steps.push(step);
    }
    NormalizationChain::new(steps)
}

fn fit_error(what: &str, e: Error) -> Error {
    match e {
        Error::Precondition(m) => Error::config(format!("{what}: insufficient training data ({m})")),
        other => other,
    }
}

/// Encodings of one run, in document order.
#[derive(Debug, Clone, Copy)]
pub struct RunEncodings<'a> {
    pub doc_ids: &'a [String],
    pub vectors: &'a [DVector<f64>],
}

/// PCA whitening of the per-document concatenation of several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointWhitening {
    pub run_dims: Vec<usize>,
    pub transform: WhiteningTransform,
}

fn check_runs(runs: &[RunEncodings<'_>]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Err(Error::precondition("joint whitening needs at least one run"));
    };
    for (r, run) in runs.iter().enumerate() {
        if run.doc_ids.len() != run.vectors.len() {
            return Err(Error::precondition(format!("run {r}: ids and vectors differ in count")));
        }
        if run.doc_ids != first.doc_ids {
            return Err(Error::precondition(format!("run {r} covers a different document list")));
        }
    }
    Ok(())
}

pub fn concatenate_runs(runs: &[RunEncodings<'_>]) -> Result<Vec<DVector<f64>>> {
    check_runs(runs)?;
    let n = runs[0].doc_ids.len();
    Ok((0..n)
        .map(|i| {
            let parts: Vec<f64> = runs.iter().flat_map(|r| r.vectors[i].iter().copied()).collect();
            DVector::from_vec(parts)
        })
        .collect())
}

pub fn fit_joint_pca_whitening(runs: &[RunEncodings<'_>], eps: EigenFloor) -> Result<JointWhitening> {
    let joined = concatenate_runs(runs)?;
    let run_dims = runs.iter().map(|r| r.vectors.first().map_or(0, |v| v.len())).collect();
    // Only directions spanned by the training documents carry variance.
    let x = stack(&joined)?;
    let components = x.ncols().min(x.nrows().saturating_sub(1));
    let transform = if components == x.ncols() {
        fit_whitening(&x, WhiteningParams::new(WhiteningMode::PcaWhiten).eps(eps))?
    } else {
        fit_pca_whitening_gram(&x, components, eps)?
    };
    Ok(JointWhitening { run_dims, transform })
}

impl JointWhitening {
    /// Concatenates one document's per-run vectors and whitens the result.
    pub fn apply(&self, per_run: &[&DVector<f64>]) -> Result<DVector<f64>> {
        if per_run.len() != self.run_dims.len() || per_run.iter().zip(&self.run_dims).any(|(v, &d)| v.len() != d) {
            return Err(Error::precondition("per-run vectors do not match the joint whitening layout"));
        }
        let joined = DVector::from_vec(per_run.iter().flat_map(|v| v.iter().copied()).collect());
        self.transform.apply_vec(&joined)
    }
}
