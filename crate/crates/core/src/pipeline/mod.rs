//! End-to-end pipeline: fit every learned component on the training split,
//! encode documents, and evaluate retrieval on the test split.

pub mod config;
pub mod manifest;
pub mod report;
pub mod synth;

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{pool, GlobalDescriptor};
use crate::codebook::{train_minibatch_kmeans, Codebook, KMeansParams};
use crate::descriptors::{load_descriptors, normalize_rows, DescriptorSet};
use crate::embedding::{embed_temb, embed_vlad, fit_lcs, fit_temb_whitening, EmbeddingKind, LcsTransforms};
use crate::error::{Error, Result};
use crate::esvm::{select_c, train_exemplars, CSelection, EsvmConfig, NegativePool};
use crate::evaluation::{average_runs, evaluate, MetricsReport, RetrievalRun, Scorer};
use crate::normalization::{apply_chain, fit_chain, fit_joint_pca_whitening, JointWhitening, NormalizationChain, RunEncodings};
use crate::numerics::{fit_whitening, l2_normalize, EigenFloor, WhiteningMode, WhiteningParams, WhiteningTransform};

pub use config::{LocalWhitening, PipelineConfig, ScorerConfig};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, SynthParams};

/// A manifest document with its descriptors loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDocument {
    pub entry: ManifestEntry,
    pub descriptors: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<LoadedDocument>,
    pub dim: usize,
}

/// Loads every manifest document, optionally L2-normalizing each descriptor.
pub fn load_corpus(manifest: &Manifest, l2_descriptors: bool) -> Result<Corpus> {
    let documents: Vec<LoadedDocument> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let path = manifest.resolve(entry);
            let mut descriptors = load_descriptors(&path).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{}: {message}", path.display()),
                },
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                other => other,
            })?;
            if l2_descriptors {
                normalize_rows(&mut descriptors);
            }
            Ok(LoadedDocument {
                entry: entry.clone(),
                descriptors,
            })
        })
        .collect::<Result<_>>()?;
    let mut dim = None;
    for doc in documents.iter().filter(|d| d.descriptors.nrows() > 0) {
        match dim {
            None => dim = Some(doc.descriptors.ncols()),
            Some(d) if d != doc.descriptors.ncols() => {
                return Err(Error::precondition(format!(
                    "document '{}' has dimension {} but others have {d}",
                    doc.entry.doc_id,
                    doc.descriptors.ncols()
                )))
            }
            _ => {}
        }
    }
    let dim = dim.ok_or_else(|| Error::precondition("the corpus contains no descriptors"))?;
    Ok(Corpus { documents, dim })
}

/// Everything learned from the training split for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub seed: u64,
    pub descriptor_dim: usize,
    pub local_whitening: Option<WhiteningTransform>,
    pub codebook: Codebook,
    pub lcs: Option<LcsTransforms>,
    pub temb_whitening: Option<WhiteningTransform>,
    pub chain: NormalizationChain,
    pub esvm: Option<CSelection>,
    /// Documents that contributed to any fit.
    pub training_documents: Vec<String>,
}

impl FittedModels {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Turns precondition failures of a fit into configuration errors naming it.
fn fit_error(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Precondition(m) | Error::Config(m) => Error::Config(format!("{stage}: insufficient training data ({m})")),
        other => other,
    }
}

const SUBSAMPLE_STREAM: u64 = 0x5b5;
const TEMB_STREAM: u64 = 0x7e3b;

fn sample_rows(total: usize, cap: usize, seed: u64, stream: u64) -> Vec<usize> {
    if total <= cap {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = rand::seq::index::sample(&mut rng, total, cap).into_vec();
    picked.sort_unstable();
    picked
}

/// Stacks selected rows (global indices over the concatenated documents).
fn gather_rows(docs: &[&LoadedDocument], rows: &[usize], dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), dim);
    let mut doc = 0;
    let mut start = 0;
    for (i, &r) in rows.iter().enumerate() {
        while r >= start + docs[doc].descriptors.nrows() {
            start += docs[doc].descriptors.nrows();
            doc += 1;
        }
        out.row_mut(i).copy_from(&docs[doc].descriptors.row(r - start));
    }
    out
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    if rows.len() == x.nrows() {
        x.clone()
    } else {
        x.select_rows(rows)
    }
}

/// Fits all learned components for one seed on the training documents.
pub fn fit_models(cfg: &PipelineConfig, corpus: &Corpus, seed: u64) -> Result<FittedModels> {
    cfg.validate()?;
    let train: Vec<&LoadedDocument> = corpus
        .documents
        .iter()
        .filter(|d| d.entry.split == Split::Train && d.descriptors.nrows() > 0)
        .collect();
    if train.is_empty() {
        return Err(Error::config("codebook: insufficient training data (no training descriptors)"));
    }
    let total: usize = train.iter().map(|d| d.descriptors.nrows()).sum();
    let rows = sample_rows(total, cfg.codebook.max_samples, seed, SUBSAMPLE_STREAM);
    let mut x = gather_rows(&train, &rows, corpus.dim);
    info!("seed {seed}: fitting on {} of {total} training descriptors", x.nrows());

    let local_whitening = match cfg.local_whitening {
        LocalWhitening::None => None,
        LocalWhitening::Pca | LocalWhitening::Zca => {
            let mode = if cfg.local_whitening == LocalWhitening::Pca {
                WhiteningMode::PcaWhiten
            } else {
                WhiteningMode::ZcaWhiten
            };
            let t = fit_whitening(&x, WhiteningParams::new(mode)).map_err(fit_error("local whitening"))?;
            x = t.apply(&x)?;
            Some(t)
        }
    };

    let params = KMeansParams {
        k: cfg.embedding.k,
        batch_size: cfg.codebook.batch_size,
        iterations: cfg.codebook_iterations(),
        max_no_improvement: cfg.codebook.max_no_improvement,
        seed,
    };
    let codebook = train_minibatch_kmeans(&x, &params).map_err(fit_error("codebook"))?;

    let lcs = match (cfg.embedding.kind, cfg.embedding.lcs) {
        (EmbeddingKind::Vlad, Some(variant)) => Some(fit_lcs(&codebook, &x, variant).map_err(fit_error("lcs"))?),
        _ => None,
    };
    let temb_whitening = if cfg.embedding.kind == EmbeddingKind::Temb && cfg.embedding.temb_whitening {
        let rows = sample_rows(x.nrows(), cfg.embedding.temb_whitening_samples, seed, TEMB_STREAM);
        let xs = select_rows(&x, &rows);
        Some(fit_temb_whitening(&codebook, &xs).map_err(fit_error("temb whitening"))?)
    } else {
        None
    };

    let mut models = FittedModels {
        seed,
        descriptor_dim: corpus.dim,
        local_whitening,
        codebook,
        lcs,
        temb_whitening,
        chain: NormalizationChain::default(),
        esvm: None,
        training_documents: train.iter().map(|d| d.entry.doc_id.clone()).collect(),
    };

    let needs_training_encodings = cfg.normalization.iter().any(|s| s.needs_fit()) || matches!(cfg.scorer, ScorerConfig::Esvm(_));
    let pooled: Vec<GlobalDescriptor> = if needs_training_encodings {
        train
            .par_iter()
            .map(|d| encode_pooled(cfg, &models, &d.descriptors))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    models.chain = fit_chain(&cfg.normalization, &pooled)?;

    if let ScorerConfig::Esvm(esvm) = &cfg.scorer {
        let vectors: Vec<DVector<f64>> = pooled
            .iter()
            .map(|g| apply_chain(&models.chain, g).map(|g| g.psi))
            .collect::<Result<_>>()?;
        let writers: Vec<String> = train.iter().map(|d| d.entry.writer_id.clone()).collect();
        models.esvm = Some(select_c(&vectors, &writers, esvm).map_err(fit_error("esvm c selection"))?);
    }
    Ok(models)
}

/// Embeds and pools one document's descriptors (no normalization chain).
pub fn encode_pooled(cfg: &PipelineConfig, models: &FittedModels, descriptors: &DMatrix<f64>) -> Result<GlobalDescriptor> {
    let x = match &models.local_whitening {
        Some(t) => t.apply(descriptors)?,
        None => descriptors.clone(),
    };
    let set = DescriptorSet::anonymous(x);
    let embedded = match cfg.embedding.kind {
        EmbeddingKind::Vlad => embed_vlad(&models.codebook, &set, cfg.embedding.residual_normalize, models.lcs.as_ref())?,
        EmbeddingKind::Temb => embed_temb(&models.codebook, &set, models.temb_whitening.as_ref())?,
    };
    let mut global = pool(&embedded, &cfg.pooling)?;
    global.provenance.codebook_seed = Some(models.seed);
    Ok(global)
}

/// Full encoding of one document.
pub fn encode_document(cfg: &PipelineConfig, models: &FittedModels, descriptors: &DMatrix<f64>) -> Result<GlobalDescriptor> {
    apply_chain(&models.chain, &encode_pooled(cfg, models, descriptors)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDocument {
    pub doc_id: String,
    pub writer_id: String,
    pub split: Split,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedCorpus {
    pub seed: u64,
    pub dim: usize,
    pub documents: Vec<EncodedDocument>,
}

impl EncodedCorpus {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.documents.iter().any(|d| d.vector.len() != c.dim) {
            return Err(Error::precondition("encoding dimension does not match the header"));
        }
        Ok(c)
    }

    fn split_parts(&self, split: Split) -> SplitParts {
        let docs: Vec<&EncodedDocument> = self.documents.iter().filter(|d| d.split == split).collect();
        (
            docs.iter().map(|d| d.doc_id.clone()).collect(),
            docs.iter().map(|d| DVector::from_column_slice(&d.vector)).collect(),
            docs.iter().map(|d| d.writer_id.clone()).collect(),
        )
    }
}

/// Encodes every document; documents without descriptors are skipped.
pub fn encode_corpus(cfg: &PipelineConfig, models: &FittedModels, corpus: &Corpus) -> Result<EncodedCorpus> {
    if corpus.dim != models.descriptor_dim {
        return Err(Error::precondition(format!(
            "models expect {}-dimensional descriptors, corpus has {}",
            models.descriptor_dim, corpus.dim
        )));
    }
    let encoded: Vec<Option<EncodedDocument>> = corpus
        .documents
        .par_iter()
        .map(|d| {
            if d.descriptors.nrows() == 0 {
                warn!("document '{}' has no descriptors; skipped", d.entry.doc_id);
                return Ok(None);
            }
            let g = encode_document(cfg, models, &d.descriptors)?;
            Ok(Some(EncodedDocument {
                doc_id: d.entry.doc_id.clone(),
                writer_id: d.entry.writer_id.clone(),
                split: d.entry.split,
                vector: g.psi.as_slice().to_vec(),
            }))
        })
        .collect::<Result<_>>()?;
    let documents: Vec<EncodedDocument> = encoded.into_iter().flatten().collect();
    let dim = documents.first().map_or(0, |d| d.vector.len());
    Ok(EncodedCorpus {
        seed: models.seed,
        dim,
        documents,
    })
}

/// Exemplar models for the test documents, trained against all training
/// encodings with the selected margin parameter.
fn esvm_scorer(
    test_ids: &[String],
    test: &[DVector<f64>],
    train: Vec<DVector<f64>>,
    selection: &CSelection,
    cfg: &EsvmConfig,
) -> Result<Scorer> {
    let pool = NegativePool::new(train)?;
    Ok(Scorer::Esvm(train_exemplars(test_ids, test, &pool, selection.c, &cfg.solver)?))
}

/// Evaluates the test split of an encoded corpus.
pub fn evaluate_encoded(cfg: &PipelineConfig, models: Option<&FittedModels>, encoded: &EncodedCorpus) -> Result<MetricsReport> {
    let (test_ids, test, writers) = encoded.split_parts(Split::Test);
    if test.len() < 2 {
        return Err(Error::Evaluation(format!("need at least 2 test documents, found {}", test.len())));
    }
    let scorer = match &cfg.scorer {
        ScorerConfig::Cosine => Scorer::Cosine,
        ScorerConfig::Esvm(esvm) => {
            let selection = models
                .and_then(|m| m.esvm.as_ref())
                .ok_or_else(|| Error::config("esvm scoring needs fitted models with a selected c"))?;
            let (_, train, _) = encoded.split_parts(Split::Train);
            esvm_scorer(&test_ids, &test, train, selection, esvm)?
        }
    };
    evaluate(&RetrievalRun {
        encodings: test,
        writers,
        scorer,
    })
}

/// Result of a complete multi-seed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Averaged report (a single evaluation for joint whitening).
    pub report: MetricsReport,
    /// `(seed, report)` for every successful per-seed evaluation.
    pub per_run: Vec<(u64, MetricsReport)>,
    pub failed: Vec<(u64, String)>,
    pub models: Vec<FittedModels>,
    pub joint: Option<JointWhitening>,
    pub joint_esvm: Option<CSelection>,
}

fn run_seed(cfg: &PipelineConfig, corpus: &Corpus, seed: u64) -> Result<(FittedModels, EncodedCorpus)> {
    let models = fit_models(cfg, corpus, seed)?;
    let encoded = encode_corpus(cfg, &models, corpus)?;
    Ok((models, encoded))
}

/// Fits, encodes and evaluates for every configured seed.
pub fn run(cfg: &PipelineConfig, manifest: &Manifest) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(manifest, cfg.l2_descriptors)?;
    run_corpus(cfg, &corpus)
}

pub fn run_corpus(cfg: &PipelineConfig, corpus: &Corpus) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.joint_whitening {
        return run_joint(cfg, corpus);
    }
    let results: Vec<Result<(FittedModels, MetricsReport)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (models, encoded) = run_seed(cfg, corpus, seed)?;
            let report = evaluate_encoded(cfg, Some(&models), &encoded)?;
            Ok((models, report))
        })
        .collect();
    let mut per_run = Vec::new();
    let mut models = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (&seed, result) in cfg.seeds.iter().zip(results) {
        match result {
            Ok((m, r)) => {
                per_run.push((seed, r));
                models.push(m);
            }
            Err(e) => {
                warn!("run with seed {seed} failed: {e}");
                failed.push((seed, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    if per_run.is_empty() {
        return Err(first_error.expect("at least one seed"));
    }
    let reports: Vec<MetricsReport> = per_run.iter().map(|(_, r)| r.clone()).collect();
    Ok(RunOutcome {
        report: average_runs(&reports)?,
        per_run,
        failed,
        models,
        joint: None,
        joint_esvm: None,
    })
}

/// Document ids, vectors and writers of one split.
type SplitParts = (Vec<String>, Vec<DVector<f64>>, Vec<String>);

/// Concatenates the per-seed encodings of each document, whitens them with a
/// PCA fitted on the training documents, L2-normalizes, and evaluates once.
fn run_joint(cfg: &PipelineConfig, corpus: &Corpus) -> Result<RunOutcome> {
    let per_seed_cfg = PipelineConfig {
        scorer: ScorerConfig::Cosine,
        ..cfg.clone()
    };
    let results: Vec<(FittedModels, EncodedCorpus)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&per_seed_cfg, corpus, seed))
        .collect::<Result<_>>()?;

    let parts: Vec<[SplitParts; 2]> = results
        .iter()
        .map(|(_, e)| [e.split_parts(Split::Train), e.split_parts(Split::Test)])
        .collect();
    let train_runs: Vec<RunEncodings<'_>> = parts
        .iter()
        .map(|p| RunEncodings {
            doc_ids: &p[0].0,
            vectors: &p[0].1,
        })
        .collect();
    let joint = fit_joint_pca_whitening(&train_runs, EigenFloor::default()).map_err(fit_error("joint whitening"))?;

    let whiten = |split: usize| -> Result<Vec<DVector<f64>>> {
        (0..parts[0][split].1.len())
            .map(|i| {
                let per_run: Vec<&DVector<f64>> = parts.iter().map(|p| &p[split].1[i]).collect();
                l2_normalize(&joint.apply(&per_run)?)
            })
            .collect()
    };
    let train = whiten(0)?;
    let test = whiten(1)?;
    let (train_writers, test_ids, test_writers) = (&parts[0][0].2, &parts[0][1].0, &parts[0][1].2);
    if test.len() < 2 {
        return Err(Error::Evaluation(format!("need at least 2 test documents, found {}", test.len())));
    }

    let (scorer, joint_esvm) = match &cfg.scorer {
        ScorerConfig::Cosine => (Scorer::Cosine, None),
        ScorerConfig::Esvm(esvm) => {
            let selection = select_c(&train, train_writers, esvm).map_err(fit_error("esvm c selection"))?;
            (esvm_scorer(test_ids, &test, train, &selection, esvm)?, Some(selection))
        }
    };
    let report = evaluate(&RetrievalRun {
        encodings: test,
        writers: test_writers.clone(),
        scorer,
    })?;
    Ok(RunOutcome {
        report,
        per_run: Vec::new(),
        failed: Vec::new(),
        models: results.into_iter().map(|(m, _)| m).collect(),
        joint: Some(joint),
        joint_esvm,
    })
}

/// Writes `report.txt`, `config.txt` and one model file per seed into `dir`.
pub fn write_outputs(cfg: &PipelineConfig, outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.txt"), report::render_report(outcome))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    for m in &outcome.models {
        std::fs::write(dir.join(format!("models_seed{}.json", m.seed)), m.to_json()?)?;
    }
    if let Some(j) = &outcome.joint {
        std::fs::write(dir.join("joint_whitening.json"), serde_json::to_string_pretty(j)?)?;
    }
    Ok(())
}
