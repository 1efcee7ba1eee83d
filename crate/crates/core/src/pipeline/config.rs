//! Pipeline configuration: flat `key = value` text with dotted keys, named
//! presets, and command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{GmpOptions, PoolingKind};
use crate::embedding::{EmbeddingKind, LcsVariant};
use crate::error::{Error, Result};
use crate::esvm::EsvmConfig;
use crate::normalization::{parse_chain, StepSpec, DEFAULT_POWER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub k: usize,
    pub residual_normalize: bool,
    pub lcs: Option<LcsVariant>,
    pub temb_whitening: bool,
    /// Cap on training descriptors used to fit the T-Emb whitening.
    pub temb_whitening_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub batch_size: usize,
    /// Iteration cap; `None` means 250·K.
    pub iterations: Option<usize>,
    /// Early-stopping patience in iterations; 0 disables it.
    pub max_no_improvement: usize,
    /// Cap on training descriptors sampled for codebook training.
    pub max_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWhitening {
    None,
    Pca,
    Zca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    Cosine,
    Esvm(EsvmConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    pub embedding: EmbeddingConfig,
    pub codebook: CodebookConfig,
    pub pooling: PoolingKind,
    pub normalization: Vec<StepSpec>,
    /// L2-normalize every descriptor when it is loaded.
    pub l2_descriptors: bool,
    pub local_whitening: LocalWhitening,
    pub scorer: ScorerConfig,
    /// Concatenate the runs per document and whiten them jointly.
    pub joint_whitening: bool,
    pub seeds: Vec<u64>,
    pub paths: Paths,
}

pub const PRESETS: &[&str] = &[
    "vlad-baseline",
    "vlad++",
    "vlad-lcs++",
    "temb",
    "temb16",
    "vlad-gmp1",
    "vlad-gmp1000",
    "vlad-esvm",
    "temb-joint",
    "vlad-esvm-joint",
];

fn ssr_chain() -> Vec<StepSpec> {
    vec![StepSpec::Power { p: DEFAULT_POWER }, StepSpec::L2]
}

impl Default for PipelineConfig {
    /// The VLAD baseline: K = 100, sum pooling, power 0.5 then L2, cosine.
    fn default() -> Self {
        Self {
            preset: None,
            embedding: EmbeddingConfig {
                kind: EmbeddingKind::Vlad,
                k: 100,
                residual_normalize: false,
                lcs: None,
                temb_whitening: false,
                temb_whitening_samples: 20_000,
            },
            codebook: CodebookConfig {
                batch_size: 1024,
                iterations: None,
                max_no_improvement: 100,
                max_samples: 500_000,
            },
            pooling: PoolingKind::Sum,
            normalization: ssr_chain(),
            l2_descriptors: true,
            local_whitening: LocalWhitening::None,
            scorer: ScorerConfig::Cosine,
            joint_whitening: false,
            seeds: vec![1],
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            preset: Some(name.to_string()),
            ..Self::default()
        };
        let vlad_plus_plus = |cfg: &mut Self, variant| {
            cfg.embedding.residual_normalize = true;
            cfg.embedding.lcs = Some(variant);
        };
        let temb = |cfg: &mut Self, k| {
            cfg.embedding.kind = EmbeddingKind::Temb;
            cfg.embedding.k = k;
            cfg.embedding.temb_whitening = true;
        };
        match name {
            "vlad-baseline" => {}
            "vlad++" => vlad_plus_plus(&mut cfg, LcsVariant::LcsWhiten),
            "vlad-lcs++" => vlad_plus_plus(&mut cfg, LcsVariant::LcsPlusPlus),
            "temb" => temb(&mut cfg, 100),
            "temb16" => temb(&mut cfg, 16),
            "vlad-gmp1" => cfg.pooling = PoolingKind::Gmp(GmpOptions::unit_lambda()),
            "vlad-gmp1000" => cfg.pooling = PoolingKind::Gmp(GmpOptions::default()),
            "vlad-esvm" => {
                cfg.pooling = PoolingKind::Gmp(GmpOptions::default());
                cfg.scorer = ScorerConfig::Esvm(EsvmConfig::default());
            }
            "temb-joint" => {
                temb(&mut cfg, 100);
                cfg.joint_whitening = true;
                cfg.seeds = (1..=5).collect();
            }
            "vlad-esvm-joint" => {
                cfg.pooling = PoolingKind::Gmp(GmpOptions::default());
                cfg.scorer = ScorerConfig::Esvm(EsvmConfig::default());
                cfg.joint_whitening = true;
                cfg.seeds = (1..=5).collect();
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn runs(&self) -> usize {
        self.seeds.len()
    }

    pub fn codebook_iterations(&self) -> usize {
        self.codebook.iterations.unwrap_or(250 * self.embedding.k)
    }

    /// Builds a config from key/value pairs: the `preset` key first, then kind
    /// switches, then the rest in key order, with `runs`/`seeds` reconciled last.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = match pairs.get("preset") {
            Some(name) => Self::preset(name.trim())?,
            None => Self::default(),
        };
        let mut runs = None;
        let mut seeds = None;
        // Keys that switch a section's kind go before the keys that tune it.
        const SWITCHES: [&str; 3] = ["embedding.kind", "pooling.kind", "scorer"];
        let ordered = SWITCHES
            .iter()
            .filter_map(|k| pairs.get_key_value(*k))
            .chain(pairs.iter().filter(|(k, _)| !SWITCHES.contains(&k.as_str())));
        for (key, value) in ordered {
            let value = value.trim();
            match key.as_str() {
                "preset" => {}
                "runs" => runs = Some(parse_num::<usize>(key, value)?),
                "seeds" => seeds = Some(parse_list::<u64>(key, value)?),
                _ => cfg.set(key, value)?,
            }
        }
        match (runs, seeds) {
            (Some(r), Some(s)) if r != s.len() => {
                return Err(Error::config(format!("runs = {r} but {} seeds given", s.len())))
            }
            (_, Some(s)) => cfg.seeds = s,
            (Some(r), None) => cfg.seeds = (1..=r as u64).collect(),
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config file text.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embedding.kind" => {
                self.embedding.kind = match value {
                    "vlad" => EmbeddingKind::Vlad,
                    "temb" => EmbeddingKind::Temb,
                    _ => return Err(bad_value(key, value, "vlad or temb")),
                }
            }
            "embedding.k" => self.embedding.k = parse_num(key, value)?,
            "embedding.residual_normalize" => self.embedding.residual_normalize = parse_bool(key, value)?,
            "embedding.lcs" => {
                self.embedding.lcs = match value {
                    "none" => None,
                    "whiten" | "lcs_whiten" => Some(LcsVariant::LcsWhiten),
                    "plus_plus" | "lcs++" | "lcs_plus_plus" => Some(LcsVariant::LcsPlusPlus),
                    _ => return Err(bad_value(key, value, "none, whiten or plus_plus")),
                }
            }
            "embedding.temb_whitening" => self.embedding.temb_whitening = parse_bool(key, value)?,
            "embedding.temb_whitening_samples" => self.embedding.temb_whitening_samples = parse_num(key, value)?,
            "codebook.batch_size" => self.codebook.batch_size = parse_num(key, value)?,
            "codebook.iterations" => {
                self.codebook.iterations = match value {
                    "auto" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "codebook.max_samples" => self.codebook.max_samples = parse_num(key, value)?,
            "codebook.max_no_improvement" => self.codebook.max_no_improvement = parse_num(key, value)?,
            "pooling.kind" => {
                let gmp = match &self.pooling {
                    PoolingKind::Gmp(o) => *o,
                    PoolingKind::Sum => GmpOptions::default(),
                };
                self.pooling = PoolingKind::from_name(value, gmp)?;
            }
            "pooling.lambda" | "pooling.component_wise" | "pooling.cgd_tol" | "pooling.cgd_max_iter" => {
                let PoolingKind::Gmp(opts) = &mut self.pooling else {
                    return Err(Error::config(format!("{key} requires pooling.kind = gmp")));
                };
                match key {
                    "pooling.lambda" => opts.lambda = parse_num(key, value)?,
                    "pooling.component_wise" => opts.component_wise = parse_bool(key, value)?,
                    "pooling.cgd_tol" => opts.cgd.tol = parse_num(key, value)?,
                    _ => opts.cgd.max_iter = parse_num(key, value)?,
                }
            }
            "normalization.chain" => self.normalization = parse_chain(value)?,
            "descriptors.l2_normalize" => self.l2_descriptors = parse_bool(key, value)?,
            "local_whitening" => {
                self.local_whitening = match value {
                    "none" => LocalWhitening::None,
                    "pca" => LocalWhitening::Pca,
                    "zca" => LocalWhitening::Zca,
                    _ => return Err(bad_value(key, value, "none, pca or zca")),
                }
            }
            "scorer" => {
                self.scorer = match value {
                    "cosine" => ScorerConfig::Cosine,
                    "esvm" => match &self.scorer {
                        ScorerConfig::Esvm(c) => ScorerConfig::Esvm(c.clone()),
                        ScorerConfig::Cosine => ScorerConfig::Esvm(EsvmConfig::default()),
                    },
                    _ => return Err(bad_value(key, value, "cosine or esvm")),
                }
            }
            "esvm.c_grid" | "esvm.tol" => {
                let ScorerConfig::Esvm(esvm) = &mut self.scorer else {
                    return Err(Error::config(format!("{key} requires scorer = esvm")));
                };
                if key == "esvm.c_grid" {
                    esvm.c_grid = parse_list(key, value)?;
                } else {
                    esvm.solver.tol = parse_num(key, value)?;
                }
            }
            "joint_whitening" => self.joint_whitening = parse_bool(key, value)?,
            "paths.manifest" => self.paths.manifest = Some(PathBuf::from(value)),
            "paths.output" => self.paths.output = Some(PathBuf::from(value)),
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.k == 0 {
            return Err(Error::config("embedding.k must be ≥ 1"));
        }
        if self.codebook.batch_size == 0 || self.codebook_iterations() == 0 || self.codebook.max_samples == 0 {
            return Err(Error::config("codebook batch_size, iterations and max_samples must be ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed/run is required"));
        }
        if self.embedding.kind == EmbeddingKind::Temb && self.embedding.lcs.is_some() {
            return Err(Error::config("lcs applies to vlad embeddings only"));
        }
        if self.embedding.kind == EmbeddingKind::Vlad && self.embedding.temb_whitening {
            return Err(Error::config("embedding.temb_whitening requires embedding.kind = temb"));
        }
        if self.normalization.iter().filter(|s| s.needs_fit()).count() > 1 {
            return Err(Error::config("at most one rotation or pca_whiten step per chain"));
        }
        if let PoolingKind::Gmp(o) = &self.pooling {
            if !(o.lambda >= 0.0 && o.lambda.is_finite()) {
                return Err(Error::config("pooling.lambda must be finite and ≥ 0"));
            }
            if o.cgd.tol.is_nan() || o.cgd.tol <= 0.0 || o.cgd.max_iter == 0 {
                return Err(Error::config("pooling.cgd_tol must be > 0 and cgd_max_iter ≥ 1"));
            }
        }
        if let ScorerConfig::Esvm(e) = &self.scorer {
            e.validate()?;
        }
        for s in &self.normalization {
            if let StepSpec::Power { p } | StepSpec::Rotation { p } = s {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(Error::config(format!("power exponent {p} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Renders the resolved configuration in the flat key-value format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line(
            "embedding.kind",
            match self.embedding.kind {
                EmbeddingKind::Vlad => "vlad".into(),
                EmbeddingKind::Temb => "temb".into(),
            },
        );
        line("embedding.k", self.embedding.k.to_string());
        line("embedding.residual_normalize", self.embedding.residual_normalize.to_string());
        line(
            "embedding.lcs",
            match self.embedding.lcs {
                None => "none".into(),
                Some(LcsVariant::LcsWhiten) => "whiten".into(),
                Some(LcsVariant::LcsPlusPlus) => "plus_plus".into(),
            },
        );
        line("embedding.temb_whitening", self.embedding.temb_whitening.to_string());
        line("embedding.temb_whitening_samples", self.embedding.temb_whitening_samples.to_string());
        line("codebook.batch_size", self.codebook.batch_size.to_string());
        line(
            "codebook.iterations",
            self.codebook.iterations.map_or("auto".into(), |i| i.to_string()),
        );
        line("codebook.max_no_improvement", self.codebook.max_no_improvement.to_string());
        line("codebook.max_samples", self.codebook.max_samples.to_string());
        line("pooling.kind", self.pooling.name().into());
        if let PoolingKind::Gmp(o) = &self.pooling {
            line("pooling.lambda", o.lambda.to_string());
            line("pooling.component_wise", o.component_wise.to_string());
            line("pooling.cgd_tol", o.cgd.tol.to_string());
            line("pooling.cgd_max_iter", o.cgd.max_iter.to_string());
        }
        let chain: Vec<String> = self.normalization.iter().map(StepSpec::to_token).collect();
        line(
            "normalization.chain",
            if chain.is_empty() { "none".into() } else { chain.join(",") },
        );
        line("descriptors.l2_normalize", self.l2_descriptors.to_string());
        line(
            "local_whitening",
            match self.local_whitening {
                LocalWhitening::None => "none".into(),
                LocalWhitening::Pca => "pca".into(),
                LocalWhitening::Zca => "zca".into(),
            },
        );
        match &self.scorer {
            ScorerConfig::Cosine => line("scorer", "cosine".into()),
            ScorerConfig::Esvm(e) => {
                line("scorer", "esvm".into());
                let grid: Vec<String> = e.c_grid.iter().map(|c| c.to_string()).collect();
                line("esvm.c_grid", grid.join(","));
                line("esvm.tol", e.solver.tol.to_string());
            }
        }
        line("joint_whitening", self.joint_whitening.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        line("seeds", seeds.join(","));
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected 'key = value', got '{line}'", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        pairs.insert(k.to_string(), v.trim().to_string());
    }
    Ok(pairs)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(format!("override '{arg}' is not key=value"))),
    }
}

fn bad_value(key: &str, value: &str, expected: &str) -> Error {
    Error::config(format!("{key}: '{value}' is not one of {expected}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}
