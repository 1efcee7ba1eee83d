use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use scriptenc_core::descriptors::read_descriptor_file;
use scriptenc_core::pipeline::config::{parse_override, parse_pairs};
use scriptenc_core::pipeline::report::{parse_report, percent_table, render_report};
use scriptenc_core::pipeline::{
    encode_corpus, evaluate_encoded, fit_models, generate_synthetic, load_corpus, run, write_outputs, EncodedCorpus,
    FittedModels, Manifest, PipelineConfig, RunOutcome, SynthParams,
};

#[derive(Parser)]
#[command(name = "scriptenc", version, about = "Writer retrieval from local handwriting descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset; applied before any other key.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, e.g. `--set embedding.k=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                parse_pairs(&text)?
            }
            None => BTreeMap::new(),
        };
        if let Some(p) = &self.preset {
            pairs.insert("preset".into(), p.clone());
        }
        for o in &self.overrides {
            let (k, v) = parse_override(o)?;
            pairs.insert(k, v);
        }
        Ok(PipelineConfig::from_pairs(&pairs)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        writers: usize,
        #[arg(long, default_value_t = 4)]
        docs_per_writer: usize,
        #[arg(long, default_value_t = 150)]
        descriptors: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        atoms: usize,
        #[arg(long, default_value_t = 0.2)]
        spread: f64,
        #[arg(long, default_value_t = 0.8)]
        noise: f64,
        /// Writers assigned to the training split (default: half).
        #[arg(long)]
        train_writers: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Fit codebook, transforms and chain on the training split.
    Fit {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed to fit (default: the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every manifest document with fitted models.
    Encode {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate retrieval on the test documents of an encodings file.
    Evaluate {
        #[arg(long)]
        encodings: PathBuf,
        /// Required for exemplar SVM scoring.
        #[arg(long)]
        models: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit, encode and evaluate for every configured seed.
    Run {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for the report, resolved config and model files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a descriptor, model, encodings or report file.
    Inspect { path: PathBuf },
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| anyhow!(scriptenc_core::Error::Config("no manifest given (--manifest or paths.manifest)".into())))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn print_outcome(outcome: &RunOutcome) {
    print!("{}", percent_table(&outcome.report));
    for (seed, reason) in &outcome.failed {
        println!("seed {seed} failed: {reason}");
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            writers,
            docs_per_writer,
            descriptors,
            dim,
            atoms,
            spread,
            noise,
            train_writers,
            seed,
        } => {
            let params = SynthParams {
                writers,
                docs_per_writer,
                descriptors_per_doc: descriptors,
                dim,
                atoms,
                writer_spread: spread,
                noise,
                train_writers: train_writers.unwrap_or(writers / 2),
                seed,
            };
            let m = generate_synthetic(&params, &out)?;
            println!("wrote {} documents to {}", m.entries.len(), out.join("manifest.tsv").display());
        }
        Command::Fit {
            manifest,
            cfg,
            seed,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let manifest = load_manifest(&manifest_path(&manifest, &cfg)?)?;
            let corpus = load_corpus(&manifest, cfg.l2_descriptors)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let models = fit_models(&cfg, &corpus, seed)?;
            std::fs::write(&out, models.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            info!("models for seed {seed} written to {}", out.display());
        }
        Command::Encode {
            manifest,
            models,
            cfg,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let manifest = load_manifest(&manifest_path(&manifest, &cfg)?)?;
            let models = FittedModels::from_json(&std::fs::read_to_string(&models)?)?;
            let corpus = load_corpus(&manifest, cfg.l2_descriptors)?;
            let encoded = encode_corpus(&cfg, &models, &corpus)?;
            std::fs::write(&out, encoded.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            println!("encoded {} documents (dimension {})", encoded.documents.len(), encoded.dim);
        }
        Command::Evaluate {
            encodings,
            models,
            cfg,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let encoded = EncodedCorpus::from_json(&std::fs::read_to_string(&encodings)?)?;
            let models = match models {
                Some(p) => Some(FittedModels::from_json(&std::fs::read_to_string(&p)?)?),
                None => None,
            };
            let report = evaluate_encoded(&cfg, models.as_ref(), &encoded)?;
            let outcome = RunOutcome {
                report: report.clone(),
                per_run: vec![(encoded.seed, report)],
                failed: Vec::new(),
                models: Vec::new(),
                joint: None,
                joint_esvm: None,
            };
            if let Some(out) = out {
                std::fs::write(&out, render_report(&outcome))?;
            }
            print_outcome(&outcome);
        }
        Command::Run { manifest, cfg, out } => {
            let cfg = cfg.resolve()?;
            let manifest = load_manifest(&manifest_path(&manifest, &cfg)?)?;
            let outcome = run(&cfg, &manifest)?;
            if let Some(dir) = out.or_else(|| cfg.paths.output.clone()) {
                write_outputs(&cfg, &outcome, &dir)?;
                info!("outputs written to {}", dir.display());
            }
            print_outcome(&outcome);
        }
        Command::Inspect { path } => inspect(&path)?,
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(scriptenc_core::descriptors::MAGIC) {
        let raw = read_descriptor_file(path)?;
        println!("descriptors: {} rows × {} columns", raw.rows, raw.cols);
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| anyhow!("{} is neither a descriptor file nor text", path.display()))?;
    if let Ok(m) = FittedModels::from_json(&text) {
        println!("models: seed {}, descriptor dimension {}", m.seed, m.descriptor_dim);
        println!(
            "  codebook: K = {}, {} iterations, inertia {}",
            m.codebook.k(),
            m.codebook.iterations,
            m.codebook.inertia.map_or("n/a".into(), |v| format!("{v:.6}"))
        );
        println!("  local whitening: {}", m.local_whitening.is_some());
        println!("  lcs: {}", m.lcs.as_ref().map_or("none".into(), |l| format!("{:?}", l.variant)));
        println!("  temb whitening: {}", m.temb_whitening.as_ref().map_or("none".into(), |t| format!("{} dims", t.output_dim())));
        let steps: Vec<String> = m.chain.steps().iter().map(|s| s.label()).collect();
        println!("  normalization: {}", if steps.is_empty() { "none".into() } else { steps.join(" → ") });
        if let Some(e) = &m.esvm {
            println!("  esvm: c = {}", e.c);
        }
        println!("  training documents: {}", m.training_documents.len());
        return Ok(());
    }
    if let Ok(e) = EncodedCorpus::from_json(&text) {
        println!("encodings: seed {}, {} documents, dimension {}", e.seed, e.documents.len(), e.dim);
        return Ok(());
    }
    let values = parse_report(&text)?;
    if values.contains_key("map") {
        for (k, v) in values {
            println!("{k} = {v}");
        }
        return Ok(());
    }
    bail!(scriptenc_core::Error::Format {
        offset: 0,
        message: format!("unrecognized file {}", path.display()),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<scriptenc_core::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
