//! Seeded synthetic corpora: writers are mixtures of perturbed shared atoms.
//!
//! Every writer owns `atoms` prototypes, each a shared base atom plus
//! `writer_spread` times Gaussian noise, and a fixed mixture over them. A
//! document draws its descriptors from the writer's mixture and adds `noise`
//! times Gaussian noise to each one. The first `train_writers` writers form
//! the training split.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptors::{write_descriptor_file, RawDescriptors};
use crate::error::{Error, Result};
use crate::pipeline::manifest::{Manifest, ManifestEntry, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub writers: usize,
    pub docs_per_writer: usize,
    pub descriptors_per_doc: usize,
    pub dim: usize,
    pub atoms: usize,
    pub writer_spread: f64,
    pub noise: f64,
    pub train_writers: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            writers: 20,
            docs_per_writer: 4,
            descriptors_per_doc: 150,
            dim: 16,
            atoms: 8,
            writer_spread: 0.2,
            noise: 0.8,
            train_writers: 10,
            seed: 7,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.writers == 0 || self.docs_per_writer == 0 || self.descriptors_per_doc == 0 || self.dim == 0 || self.atoms == 0
        {
            return Err(Error::config("synthetic corpus sizes must all be ≥ 1"));
        }
        if self.train_writers > self.writers {
            return Err(Error::config("train_writers exceeds writers"));
        }
        if !(self.writer_spread >= 0.0 && self.noise >= 0.0 && self.writer_spread.is_finite() && self.noise.is_finite()) {
            return Err(Error::config("writer_spread and noise must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// One generated document.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDocument {
    pub doc_id: String,
    pub writer_id: String,
    pub split: Split,
    pub descriptors: DMatrix<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Generates the corpus in memory.
pub fn synthesize(params: &SynthParams) -> Result<Vec<SynthDocument>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let base: Vec<DVector<f64>> = (0..params.atoms).map(|_| gaussian(&mut rng, params.dim)).collect();
    let mut docs = Vec::with_capacity(params.writers * params.docs_per_writer);
    for w in 0..params.writers {
        let writer_id = format!("w{w:03}");
        let atoms: Vec<DVector<f64>> = base
            .iter()
            .map(|b| b + gaussian(&mut rng, params.dim) * params.writer_spread)
            .collect();
        let weights: Vec<f64> = (0..params.atoms).map(|_| rng.random_range(0.2..1.0)).collect();
        let mixture = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
        let split = if w < params.train_writers { Split::Train } else { Split::Test };
        for d in 0..params.docs_per_writer {
            let mut x = DMatrix::zeros(params.descriptors_per_doc, params.dim);
            for i in 0..params.descriptors_per_doc {
                let a = mixture.sample(&mut rng);
                let row = &atoms[a] + gaussian(&mut rng, params.dim) * params.noise;
                x.row_mut(i).copy_from(&row.transpose());
            }
            docs.push(SynthDocument {
                doc_id: format!("{writer_id}_d{d}"),
                writer_id: writer_id.clone(),
                split,
                descriptors: x,
            });
        }
    }
    Ok(docs)
}

/// Writes descriptor files under `out_dir/descriptors/` and `out_dir/manifest.tsv`.
pub fn generate_synthetic(params: &SynthParams, out_dir: &Path) -> Result<Manifest> {
    let docs = synthesize(params)?;
    let desc_dir = out_dir.join("descriptors");
    std::fs::create_dir_all(&desc_dir)?;
    let mut entries = Vec::with_capacity(docs.len());
    for doc in docs {
        let rel = Path::new("descriptors").join(format!("{}.wdsc", doc.doc_id));
        write_descriptor_file(&out_dir.join(&rel), &RawDescriptors::from_matrix(&doc.descriptors))?;
        entries.push(ManifestEntry {
            doc_id: doc.doc_id,
            writer_id: doc.writer_id,
            split: doc.split,
            path: rel,
        });
    }
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
