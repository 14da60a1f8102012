//! The `ctesret` command line: dataset synthesis, training, hashing,
//! indexing, retrieval, evaluation and ablation over one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ctesret::datasynth::{make_benchmark, warp_queries, BenchmarkConfig};
use ctesret::evalmetrics::{Metrics, Protocol, Report};
use ctesret::hashing::{code_stats, HashConfig, HashIndex, HashNet};
use ctesret::model::{FisherMode, ModelConfig, RetrievalModel};
use ctesret::mtpp::{EncoderKind, MtppConfig};
use ctesret::relevance::{FisherVector, ScoreFlags, Scorer, Variant};
use ctesret::retrieval::{
    corpus_vectors, evaluate_exhaustive, evaluate_hashed, exhaustive_retrieve, index_vectors,
    write_results, Coder, HashedRetriever,
};
use ctesret::seq::{read_jsonl, write_jsonl, Dataset, Split};
use ctesret::trainer::{train_hash, train_with, write_trace, HashTrainConfig, TrainConfig};
use ctesret::unwarp::UmnnConfig;

#[derive(Debug, Parser)]
#[command(name = "ctesret", version, about = "Continuous-time event sequence retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialization, training, hashing and pools.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub model: Option<EncoderKind>,
    /// Results kept per query.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Output directory shared by every stage.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    Synth,
    /// Train a relevance model.
    Train,
    /// Train the hash network on self-attention corpus vectors.
    HashTrain,
    /// Build the multi-table hash index.
    Index,
    /// Retrieve the top K corpus sequences for each test query.
    Query {
        /// Score the whole corpus instead of hashed candidates.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Pooled ranking metrics on the test split.
    Evaluate {
        /// Telescopic retrieval through the hash index.
        #[arg(long)]
        hashed: bool,
    },
    /// Metrics for each ablation variant.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::HashTrain => "hash-train",
            Command::Index => "index",
            Command::Query { .. } => "query",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub benchmark: BenchmarkConfig,
    /// Query warp `t -> scale * t + shift`.
    pub warp_scale: f64,
    pub warp_shift: f64,
    /// Dataset directory; defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            warp_scale: 1.5,
            warp_shift: 0.0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub mtpp: MtppConfig,
    pub umnn: UmnnConfig,
    pub gamma: f64,
    pub fisher: FisherMode,
    pub unwarp: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(EncoderKind::CrossAttn, 1);
        Self {
            mtpp: base.mtpp,
            umnn: base.umnn,
            gamma: base.gamma,
            fisher: base.fisher,
            unwarp: base.unwarp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub negatives: usize,
    /// Pool resamplings averaged into the report.
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: 1000,
            runs: 1,
        }
    }
}

/// Every knob of a run. The master `seed` overrides the per-stage seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model_kind: EncoderKind,
    pub k: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub hash: HashConfig,
    pub hash_train: HashTrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_kind: EncoderKind::CrossAttn,
            k: 10,
            out: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            hash: HashConfig::default(),
            hash_train: HashTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = cli.model {
            cfg.model_kind = kind;
        }
        if let Some(k) = cli.k {
            cfg.k = k;
        }
        if let Some(out) = &cli.out {
            cfg.out = out.clone();
        }
        cfg.data.benchmark.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.hash_train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("invalid configuration: k must be at least 1");
        }
        if !(self.data.warp_scale > 0.0) {
            bail!("invalid configuration: warp_scale must be positive");
        }
        if self.eval.runs == 0 {
            bail!("invalid configuration: eval.runs must be at least 1");
        }
        self.train.validate()?;
        ctesret::hashing::check_weights(self.hash.eta)?;
        self.model_config(self.model_kind, 1).validate()?;
        Ok(())
    }

    pub fn model_config(&self, kind: EncoderKind, num_marks: usize) -> ModelConfig {
        let mut c = ModelConfig::new(kind, num_marks);
        c.mtpp = MtppConfig {
            num_marks,
            ..self.model.mtpp.clone()
        };
        c.umnn = self.model.umnn.clone();
        c.gamma = self.model.gamma;
        c.fisher = self.model.fisher;
        c.unwarp = self.model.unwarp;
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
    }

    fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn checkpoint(&self, kind: EncoderKind, unwarp: bool) -> PathBuf {
        let suffix = if unwarp { "" } else { "-nounwarp" };
        self.out.join(format!("model-{kind}{suffix}.json"))
    }

    fn protocol(&self) -> Protocol {
        Protocol {
            negatives: self.eval.negatives,
            seed: self.seed,
        }
    }
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, command: Command, outputs: &[PathBuf]) -> Result<()> {
    let seeds = BTreeMap::from([
        ("master".to_string(), cfg.seed),
        ("benchmark".to_string(), cfg.data.benchmark.seed),
        ("train".to_string(), cfg.train.seed),
        ("hash_train".to_string(), cfg.hash_train.seed),
        ("pool".to_string(), cfg.seed),
    ]);
    let versions = BTreeMap::from([
        ("ctesret".to_string(), ctesret::VERSION.to_string()),
        ("ctesret-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ]);
    let manifest = Manifest {
        command: command.name().to_string(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        seeds,
        versions,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    let path = cfg.out.join(format!("manifest-{}.json", command.name()));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Report values as percentages, the only place they are scaled.
pub fn format_report(label: &str, report: &Report) -> String {
    let m = report.metrics.percent();
    format!(
        "{label}: MAP {:.1}  NDCG@10 {:.1}  NDCG@20 {:.1}  MRR {:.1}  reduction {:.1}%  runs {}",
        m.map, m.ndcg10, m.ndcg20, m.mrr, report.reduction_factor, report.runs
    )
}

/// Caps rayon's global pool at `CTESRET_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CTESRET_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("CTESRET_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("CTESRET_THREADS must be a positive integer, got 0");
        }
        // A pool built earlier in the process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli)?;
    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))?;
    let outputs = match cli.command {
        Command::Synth => synth(&cfg)?,
        Command::Train => train_cmd(&cfg, cfg.model_kind, cfg.model.unwarp)?,
        Command::HashTrain => hash_train(&cfg)?,
        Command::Index => index(&cfg)?,
        Command::Query { exhaustive } => query(&cfg, exhaustive)?,
        Command::Evaluate { hashed } => evaluate_cmd(&cfg, hashed)?,
        Command::Ablate => ablate(&cfg)?,
    };
    write_manifest(&cfg, cli.command, &outputs)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    Dataset::load(&dir).with_context(|| format!("loading dataset from {} (run synth first)", dir.display()))
}

fn load_model(path: &Path) -> Result<RetrievalModel> {
    RetrievalModel::load(path).with_context(|| format!("loading checkpoint {} (run train first)", path.display()))
}

fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = make_benchmark(&cfg.data.benchmark)?;
    let ds = warp_queries(&base, cfg.data.warp_scale, cfg.data.warp_shift)?;
    let dir = cfg.data_dir();
    ds.save(&dir)?;
    println!(
        "synth: {} queries, {} corpus sequences -> {}",
        ds.queries.len(),
        ds.corpus.len(),
        dir.display()
    );
    Ok(vec![dir])
}

fn train_cmd(cfg: &RunConfig, kind: EncoderKind, unwarp: bool) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let mut mc = cfg.model_config(kind, ds.num_marks);
    mc.unwarp = unwarp;
    let model = RetrievalModel::new(mc, ds.time_scale(), cfg.seed)?;
    let out = train_with(model, &ds, &cfg.train, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  val MAP {:.1}",
            r.epoch,
            r.train_loss,
            100.0 * r.val_map
        );
    })?;
    let ckpt = cfg.checkpoint(kind, unwarp);
    out.model.save(&ckpt)?;
    let suffix = if unwarp { "" } else { "-nounwarp" };
    let trace = cfg.out.join(format!("trace-{kind}{suffix}.csv"));
    write_trace(&trace, &out.trace)?;
    println!("train: best epoch {} -> {}", out.best_epoch, ckpt.display());
    Ok(vec![ckpt, trace])
}

fn hash_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let model = load_model(&cfg.checkpoint(EncoderKind::SelfAttn, cfg.model.unwarp))?;
    let vectors = corpus_vectors(&model, &ds.corpus)?;
    let fisher = cfg.out.join("fisher.jsonl");
    write_jsonl(&fisher, &vectors)?;
    let (net, losses) = train_hash(&vectors, &cfg.hash, &cfg.hash_train)?;
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.v.clone()).collect();
    let stats = code_stats(&net, &data)?;
    let path = cfg.out.join("hashnet.json");
    net.save(&path)?;
    println!(
        "hash-train: loss {:.4} -> {:.4}, mean |sum| {:.3}, saturated {:.1}%",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        stats.mean_abs_sum,
        100.0 * stats.saturated_fraction
    );
    Ok(vec![fisher, path])
}

fn index(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let vectors: Vec<FisherVector> =
        read_jsonl(&cfg.out.join("fisher.jsonl")).context("reading fisher.jsonl (run hash-train first)")?;
    let net = HashNet::load(&cfg.out.join("hashnet.json")).context("loading hashnet.json")?;
    let index = index_vectors(Coder::Trained(&net), &vectors, &cfg.hash, cfg.seed)?;
    let path = cfg.out.join("index.json");
    index.save(&path)?;
    println!("index: {} codes in {} tables", index.len(), index.tables.len());
    Ok(vec![path])
}

fn query(cfg: &RunConfig, exhaustive: bool) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let reranker_model = load_model(&cfg.checkpoint(cfg.model_kind, cfg.model.unwarp))?;
    let mut reranker = Scorer::new(&reranker_model, ScoreFlags::FULL);
    reranker.cache_corpus(&ds.corpus)?;
    let test = ds.split_indices(Split::Test);
    let results = if exhaustive {
        test.iter()
            .map(|&q| exhaustive_retrieve(&reranker, &ds.queries[q], &ds.corpus, cfg.k))
            .collect::<ctesret::Result<Vec<_>>>()?
    } else {
        let self_model = load_model(&cfg.checkpoint(EncoderKind::SelfAttn, cfg.model.unwarp))?;
        let hasher = Scorer::new(&self_model, ScoreFlags::FULL);
        let net = HashNet::load(&cfg.out.join("hashnet.json")).context("loading hashnet.json")?;
        let index = HashIndex::load(&cfg.out.join("index.json")).context("loading index.json")?;
        let retriever = HashedRetriever::new(&hasher, &reranker, Coder::Trained(&net), &index, &ds.corpus)?;
        test.iter()
            .map(|&q| retriever.retrieve(&ds.queries[q], cfg.k))
            .collect::<ctesret::Result<Vec<_>>>()?
    };
    let path = cfg.out.join("results.jsonl");
    write_results(&path, &results)?;
    println!(
        "query: {} queries, reduction {:.1}% -> {}",
        results.len(),
        ctesret::retrieval::reduction_factor(&results, ds.corpus.len()),
        path.display()
    );
    Ok(vec![path])
}

fn exhaustive_runs(cfg: &RunConfig, ds: &Dataset, model: &RetrievalModel, flags: ScoreFlags) -> Result<Vec<Metrics>> {
    let mut scorer = Scorer::new(model, flags);
    scorer.cache_corpus(&ds.corpus)?;
    (0..cfg.eval.runs as u64)
        .map(|r| {
            let p = Protocol {
                seed: cfg.seed.wrapping_add(r),
                ..cfg.protocol()
            };
            Ok(evaluate_exhaustive(&scorer, ds, Split::Test, &p)?)
        })
        .collect()
}

fn evaluate_cmd(cfg: &RunConfig, hashed: bool) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let model = load_model(&cfg.checkpoint(cfg.model_kind, cfg.model.unwarp))?;
    let (runs, reduction) = if hashed {
        let self_model = load_model(&cfg.checkpoint(EncoderKind::SelfAttn, cfg.model.unwarp))?;
        let hasher = Scorer::new(&self_model, ScoreFlags::FULL);
        let mut reranker = Scorer::new(&model, ScoreFlags::FULL);
        reranker.cache_corpus(&ds.corpus)?;
        let net = HashNet::load(&cfg.out.join("hashnet.json")).context("loading hashnet.json")?;
        let index = HashIndex::load(&cfg.out.join("index.json")).context("loading index.json")?;
        let retriever = HashedRetriever::new(&hasher, &reranker, Coder::Trained(&net), &index, &ds.corpus)?;
        let mut runs = Vec::new();
        let mut reduction = 0.0;
        for r in 0..cfg.eval.runs as u64 {
            let p = Protocol {
                seed: cfg.seed.wrapping_add(r),
                ..cfg.protocol()
            };
            let (m, red) = evaluate_hashed(&retriever, &ds, Split::Test, &p)?;
            runs.push(m);
            reduction = red;
        }
        (runs, reduction)
    } else {
        (exhaustive_runs(cfg, &ds, &model, ScoreFlags::FULL)?, 0.0)
    };
    let report = Report {
        metrics: Metrics::mean(&runs),
        reduction_factor: reduction,
        runs: runs.len(),
    };
    let path = cfg.out.join("report.json");
    write_json(&path, &report)?;
    let label = if hashed { "hashed" } else { "exhaustive" };
    println!("{}", format_report(&format!("{} {label}", cfg.model_kind), &report));
    Ok(vec![path])
}

/// One ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

fn ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let kind = cfg.model_kind;
    let model = load_model(&cfg.checkpoint(kind, true))?;
    let mut outputs = Vec::new();
    let plain_path = cfg.checkpoint(kind, false);
    if !plain_path.exists() {
        outputs.extend(train_cmd(cfg, kind, false)?);
    }
    let plain = load_model(&plain_path)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let m = if v == Variant::V { &plain } else { &model };
        let runs = exhaustive_runs(cfg, &ds, m, v.flags())?;
        let metrics = Metrics::mean(&runs);
        let report = Report {
            metrics,
            reduction_factor: 0.0,
            runs: runs.len(),
        };
        println!("{}", format_report(&format!("variant ({})", v.label()), &report));
        rows.push(AblationRow {
            variant: v.label().to_string(),
            metrics,
        });
    }
    let path = cfg.out.join("ablation.json");
    write_json(&path, &rows)?;
    outputs.push(path);
    Ok(outputs)
}
