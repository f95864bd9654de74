//! The stages of an experiment, all driven by one TOML config file:
//! collect → cluster → train-experts → train-hypernet → eval.
//!
//! Relative paths in the config are resolved against the config file's
//! directory. Every output is a pure function of the config and seeds, so
//! reruns are byte-identical.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterError, EmbeddingProvider, HashedEmbedding, RemoteEmbedding, RemoteEmbeddingSettings};
use crate::evaluator::{EvalError, Evaluator, Executor, MockExecutor, ProcessExecutor};
use crate::fixtures;
use crate::lora::{self, HyperTrainConfig, LoraError, LoraExpert, Sample, SkillTask, SkillTaskConfig};
use crate::mcts::{run_search, SearchConfig, SearchError};
use crate::policy::{PolicyAgent, PolicyError, PromptTemplates, RemotePolicy, RemoteSettings, ScriptedPolicy};
use crate::trajectory::{self, DatasetError, RecordKind, TrajectoryRecord};
use crate::tree::ProblemSpec;

pub const EXIT_INPUT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_POLICY: i32 = 3;
pub const EXIT_EXECUTOR: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    /// A policy or embedding endpoint failed or broke its contract.
    #[error("{0}")]
    Policy(String),
    #[error("{0}")]
    Executor(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Input(_) | PipelineError::Io { .. } => EXIT_INPUT,
            PipelineError::Policy(_) => EXIT_POLICY,
            PipelineError::Executor(_) => EXIT_EXECUTOR,
            PipelineError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn policy_err(e: PolicyError) -> PipelineError {
    match e {
        PolicyError::Config(m) => PipelineError::Config(m),
        other => PipelineError::Policy(other.to_string()),
    }
}

fn search_err(problem: &str, e: SearchError) -> PipelineError {
    let msg = format!("problem {problem}: {e}");
    match e {
        SearchError::Policy(PolicyError::Config(_)) | SearchError::Config(_) => PipelineError::Config(msg),
        SearchError::Policy(_) => PipelineError::Policy(msg),
        SearchError::Eval(EvalError::Infrastructure(_)) => PipelineError::Executor(msg),
        _ => PipelineError::Input(msg),
    }
}

fn cluster_err(e: ClusterError) -> PipelineError {
    match e {
        ClusterError::Numeric(_) => PipelineError::Numeric(e.to_string()),
        ClusterError::Transport { .. } | ClusterError::Protocol(_) => PipelineError::Policy(e.to_string()),
        ClusterError::Io(source) => PipelineError::Io {
            path: PathBuf::new(),
            source,
        },
        _ => PipelineError::Input(e.to_string()),
    }
}

fn lora_err(e: LoraError) -> PipelineError {
    match e {
        LoraError::Numeric(_) => PipelineError::Numeric(e.to_string()),
        _ => PipelineError::Input(e.to_string()),
    }
}

fn dataset_err(e: DatasetError) -> PipelineError {
    PipelineError::Input(e.to_string())
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AgentSpec {
    /// A script book JSON file.
    Scripted { path: PathBuf },
    /// An OpenAI-compatible endpoint; the token comes from `token_env`.
    Remote {
        #[serde(flatten)]
        settings: RemoteSettings,
        /// Directory with `propose.txt`, `solve.txt`, `summarize.txt`, `refine.txt`.
        #[serde(default)]
        templates: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutorKind {
    Mock,
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSpec {
    pub kind: ExecutorKind,
    /// Run command template for `process`; `{file}` is the program path.
    pub run: Vec<String>,
    pub compile: Option<Vec<String>>,
    pub file_name: String,
    pub cache_dir: Option<PathBuf>,
    pub binary_passed: bool,
    pub workers: usize,
}

impl Default for ExecutorSpec {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Mock,
            run: Vec::new(),
            compile: None,
            file_name: "main.prog".into(),
            cache_dir: None,
            binary_passed: false,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSpec {
    /// Minimum best-solution pass fraction for a path to be kept.
    pub threshold: f64,
}

impl Default for ExtractSpec {
    fn default() -> Self {
        Self { threshold: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    All,
    ProblemToThought,
    ThoughtToSolution,
}

impl Pool {
    fn admits(self, kind: RecordKind) -> bool {
        match self {
            Pool::All => true,
            Pool::ProblemToThought => kind == RecordKind::ProblemToThought,
            Pool::ThoughtToSolution => kind == RecordKind::ThoughtToSolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingSpec {
    Hashed { dim: usize },
    Remote(RemoteEmbeddingSettings),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Which records are clustered; the rest are assigned to the nearest centroid.
    pub pool: Pool,
    pub embedding: EmbeddingSpec,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0,
            max_iters: 100,
            pool: Pool::All,
            embedding: EmbeddingSpec::Hashed { dim: 256 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    /// Skill-task sample file the experts and hypernetwork are trained on.
    pub corpus: PathBuf,
    pub task: SkillTaskConfig,
    pub base_samples: usize,
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_seed: u64,
    pub rank: usize,
    pub expert_steps: usize,
    pub expert_lr: f64,
    pub expert_seed: u64,
    pub hypernet: HyperTrainConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("toy_a.tsv"),
            task: SkillTaskConfig::default(),
            base_samples: 600,
            base_steps: 300,
            base_lr: 0.5,
            base_seed: 11,
            rank: 3,
            expert_steps: 400,
            expert_lr: 0.5,
            expert_seed: 0,
            hypernet: HyperTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub problems: PathBuf,
    pub output_dir: PathBuf,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub executor: ExecutorSpec,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub extract: ExtractSpec,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Pipeline verbs, used to route `--seed` to the stage it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Collect,
    Cluster,
    TrainExperts,
    TrainHypernet,
    Eval,
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(rel)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.agents.is_empty() {
            return bad("at least one agent is required".into());
        }
        for a in &self.agents {
            if let AgentSpec::Scripted { path } = a {
                if !self.resolve(path).is_file() {
                    return bad(format!("script book {} does not exist", self.resolve(path).display()));
                }
            }
        }
        if !self.resolve(&self.problems).is_file() {
            return bad(format!("problems file {} does not exist", self.resolve(&self.problems).display()));
        }
        self.search.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.executor.kind == ExecutorKind::Process && self.executor.run.is_empty() {
            return bad("the process executor needs a `run` command".into());
        }
        if self.executor.workers == 0 {
            return bad("executor.workers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.extract.threshold) {
            return bad("extract.threshold must lie in [0, 1]".into());
        }
        if self.cluster.k == 0 || self.cluster.max_iters == 0 {
            return bad("cluster.k and cluster.max_iters must be positive".into());
        }
        let t = &self.train;
        if t.rank == 0 || t.base_samples == 0 || t.hypernet.batch_size == 0 || t.hypernet.hidden == 0 {
            return bad("train.rank, base_samples, hypernet.batch_size and hypernet.hidden must be positive".into());
        }
        for (name, lr) in [("base_lr", t.base_lr), ("expert_lr", t.expert_lr), ("hypernet.lr", t.hypernet.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("train.{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Applies a `--seed` override to the stage being run.
    pub fn override_seed(&mut self, stage: Stage, seed: u64) {
        match stage {
            Stage::Collect => self.search.seed = seed,
            Stage::Cluster => self.cluster.seed = seed,
            Stage::TrainExperts => self.train.expert_seed = seed,
            Stage::TrainHypernet => self.train.hypernet.seed = seed,
            Stage::Eval => log::warn!("eval has no random draws; --seed ignored"),
        }
    }

    fn agents(&self) -> Result<Vec<Arc<dyn PolicyAgent>>, PipelineError> {
        self.agents
            .iter()
            .map(|spec| -> Result<Arc<dyn PolicyAgent>, PipelineError> {
                Ok(match spec {
                    AgentSpec::Scripted { path } => Arc::new(ScriptedPolicy::load(&self.resolve(path)).map_err(policy_err)?),
                    AgentSpec::Remote { settings, templates } => {
                        let t = match templates {
                            Some(dir) => PromptTemplates::load_dir(&self.resolve(dir)).map_err(policy_err)?,
                            None => PromptTemplates::default(),
                        };
                        let mut settings = settings.clone();
                        settings.seed = settings.seed.or(Some(self.search.seed));
                        Arc::new(RemotePolicy::new(settings, t))
                    }
                })
            })
            .collect()
    }

    fn evaluator(&self) -> Evaluator {
        let spec = &self.executor;
        let executor: Arc<dyn Executor> = match spec.kind {
            ExecutorKind::Mock => Arc::new(MockExecutor::new()),
            ExecutorKind::Process => Arc::new(ProcessExecutor {
                run_template: spec.run.clone(),
                compile_template: spec.compile.clone(),
                file_name: spec.file_name.clone(),
            }),
        };
        let mut ev = Evaluator::new(executor);
        if let Some(dir) = &spec.cache_dir {
            ev = ev.with_cache_dir(self.resolve(dir));
        }
        ev.binary_passed = spec.binary_passed;
        ev.workers = spec.workers;
        ev
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
        Ok(match &self.cluster.embedding {
            EmbeddingSpec::Hashed { dim } if *dim > 0 => Box::new(HashedEmbedding { dim: *dim }),
            EmbeddingSpec::Hashed { .. } => return Err(PipelineError::Config("embedding dim must be positive".into())),
            EmbeddingSpec::Remote(settings) => Box::new(RemoteEmbedding::new(settings.clone())),
        })
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// File-name-safe form of a problem id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

pub fn read_problems(path: &Path) -> Result<Vec<ProblemSpec>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: ProblemSpec = serde_json::from_str(line)
            .map_err(|e| PipelineError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        p.validate()
            .map_err(|e| PipelineError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        problems.push(p);
    }
    if problems.is_empty() {
        return Err(PipelineError::Input(format!("{} contains no problems", path.display())));
    }
    problems.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = problems.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(PipelineError::Input(format!("duplicate problem id `{}`", w[0].id)));
    }
    Ok(problems)
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub id: String,
    pub solved: bool,
    pub best_pass: f64,
    pub rollouts: usize,
    pub exhausted: bool,
    pub tree_nodes: usize,
    pub expanded_nodes: usize,
    pub prunes: u32,
    pub refine_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    /// Mean best-solution pass fraction, in percent.
    pub pr: f64,
    /// Share of problems with a fully passing solution, in percent.
    pub ac: f64,
    pub records: usize,
    pub thought_to_solution: usize,
    pub problems: Vec<ProblemSummary>,
}

/// Runs the search on every problem and writes trees, audit logs, the
/// dataset, refinement pairs and a summary under the output directory.
pub fn cmd_collect(cfg: &PipelineConfig) -> Result<CollectSummary, PipelineError> {
    let problems = read_problems(&cfg.resolve(&cfg.problems))?;
    let agents = cfg.agents()?;
    let evaluator = cfg.evaluator();
    if let Some(dir) = &cfg.executor.cache_dir {
        create_dir(&cfg.resolve(dir))?;
    }
    let outcomes = problems
        .par_iter()
        .map(|p| run_search(p.clone(), &agents, &evaluator, &cfg.search).map_err(|e| search_err(&p.id, e)))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(&cfg.out("trees"))?;
    create_dir(&cfg.out("audit"))?;
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut refinements = String::new();
    let mut summaries = Vec::new();
    for (p, o) in problems.iter().zip(&outcomes) {
        let stem = file_stem(&p.id);
        let tree_path = cfg.out(&format!("trees/{stem}.jsonl"));
        o.tree.save(&tree_path).map_err(|e| PipelineError::Input(e.to_string()))?;
        let audit_path = cfg.out(&format!("audit/{stem}.jsonl"));
        let file = fs::File::create(&audit_path).map_err(io_err(&audit_path))?;
        o.write_audit(BufWriter::new(file)).map_err(io_err(&audit_path))?;

        records.extend(trajectory::extract_pairs(&o.tree, cfg.extract.threshold));
        for pair in trajectory::extract_refinement_pairs(&o.tree) {
            refinements.push_str(&serde_json::to_string(&pair).expect("pairs serialize"));
            refinements.push('\n');
        }
        summaries.push(ProblemSummary {
            id: p.id.clone(),
            solved: o.solved(),
            best_pass: o.best.as_ref().map_or(0.0, |b| b.pass_fraction),
            rollouts: o.rollouts.len(),
            exhausted: o.exhausted,
            tree_nodes: o.tree.len(),
            expanded_nodes: o.stats.expanded_nodes,
            prunes: o.stats.prunes,
            refine_calls: o.stats.refine_calls,
        });
    }
    let dataset = cfg.out("dataset.tsv");
    trajectory::write_dataset(&records, &dataset).map_err(dataset_err)?;
    write_file(&cfg.out("refinements.jsonl"), refinements)?;

    let n = summaries.len() as f64;
    let summary = CollectSummary {
        pr: 100.0 * summaries.iter().map(|s| s.best_pass).sum::<f64>() / n,
        ac: 100.0 * summaries.iter().filter(|s| s.solved).count() as f64 / n,
        records: records.len(),
        thought_to_solution: records.iter().filter(|r| r.kind == RecordKind::ThoughtToSolution).count(),
        problems: summaries,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&cfg.out("collect_summary.json"), json + "\n")?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub records: usize,
    pub pooled: usize,
    pub k: usize,
    pub objective: f64,
    pub iterations: usize,
    pub sizes: Vec<usize>,
}

/// Embeds the pooled records, fits the cluster model and writes cluster
/// indices back into the dataset; records outside the pool get their
/// nearest centroid.
pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<ClusterSummary, PipelineError> {
    let dataset = cfg.out("dataset.tsv");
    if !dataset.is_file() {
        return Err(PipelineError::Input(format!("dataset {} not found; run collect first", dataset.display())));
    }
    let mut records = trajectory::read_dataset(&dataset).map_err(dataset_err)?;
    let embedder = cfg.embedder()?;
    cluster::embed_records(embedder.as_ref(), &mut records).map_err(cluster_err)?;
    let pooled: Vec<Vec<f64>> = records
        .iter()
        .filter(|r| cfg.cluster.pool.admits(r.kind))
        .map(|r| r.embedding.clone().expect("embedded above"))
        .collect();
    if cfg.cluster.k > pooled.len() {
        return Err(PipelineError::Input(format!(
            "K = {} exceeds the {} pooled records",
            cfg.cluster.k,
            pooled.len()
        )));
    }
    let model = cluster::cluster(&pooled, cfg.cluster.k, cfg.cluster.seed, cfg.cluster.max_iters).map_err(cluster_err)?;
    if !model.objective.is_finite() {
        return Err(PipelineError::Numeric("clustering objective is not finite".into()));
    }
    let mut sizes = vec![0; model.k];
    for r in records.iter_mut() {
        let (c, _) = model.assign(r.embedding.as_ref().expect("embedded above")).map_err(cluster_err)?;
        r.cluster = Some(c);
        sizes[c] += 1;
    }
    trajectory::write_dataset(&records, &dataset).map_err(dataset_err)?;
    let model_path = cfg.out("cluster_model.txt");
    model.save(&model_path).map_err(cluster_err)?;
    Ok(ClusterSummary {
        records: records.len(),
        pooled: pooled.len(),
        k: model.k,
        objective: model.objective,
        iterations: model.iterations,
        sizes,
    })
}

// ---------------------------------------------------------------------------
// train-experts / train-hypernet
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub id: usize,
    pub file: String,
    pub source_cluster: usize,
    pub members: usize,
    pub seed: u64,
    pub digest: String,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetEntry {
    pub file: String,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub digest: String,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// `artifacts/manifest.toml`: shapes, ids, seeds and digests of the trained
/// tensors, which live in flat tensor files next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub k: usize,
    pub rank: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub base_file: String,
    pub base_digest: String,
    pub clusters_file: String,
    pub skipped_clusters: Vec<usize>,
    pub experts: Vec<ExpertEntry>,
    pub hypernet: Option<HypernetEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|_| PipelineError::Input(format!("{} not found; run train-experts first", path.display())))?;
        toml::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = toml::to_string(self).map_err(|e| PipelineError::Input(e.to_string()))?;
        write_file(path, text)
    }
}

fn load_corpus(cfg: &PipelineConfig, path: &Path, input_dim: usize) -> Result<Vec<Sample>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!("sample file {} does not exist", path.display())));
    }
    let samples = lora::read_samples(path).map_err(lora_err)?;
    if samples.is_empty() {
        return Err(PipelineError::Input(format!("{} has no samples", path.display())));
    }
    if samples[0].x.len() != input_dim || samples.iter().any(|s| s.label >= cfg.train.task.classes) {
        return Err(PipelineError::Input(format!(
            "{} does not match the configured skill task",
            path.display()
        )));
    }
    Ok(samples)
}

fn check_trend(what: &str, losses: &[f64]) -> Result<(), PipelineError> {
    match (losses.first(), losses.last()) {
        (Some(first), Some(last)) if losses.len() > 1 && last >= first => Err(PipelineError::Numeric(format!(
            "{what} loss did not decrease ({first} → {last})"
        ))),
        _ => Ok(()),
    }
}

fn loss_log(lines: &mut String, what: &str, losses: &[f64]) {
    for (step, loss) in losses.iter().enumerate() {
        if step % 10 == 0 || step + 1 == losses.len() {
            lines.push_str(&format!("{what}\t{step}\t{loss}\n"));
        }
    }
}

/// Trains the frozen base and one expert per cluster of the skill corpus.
///
/// The collected trajectories supply the cluster structure (and must already
/// be clustered); the expert weights are fitted on the synthetic skill task,
/// since text pairs have no cross-entropy target at this scale.
pub fn cmd_train_experts(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let dataset = cfg.out("dataset.tsv");
    if !dataset.is_file() {
        return Err(PipelineError::Input(format!("dataset {} not found; run collect first", dataset.display())));
    }
    let records = trajectory::read_dataset(&dataset).map_err(dataset_err)?;
    if records.is_empty() || records.iter().any(|r| r.cluster.is_none()) {
        return Err(PipelineError::Input("dataset is not clustered; run cluster first".into()));
    }
    let t = &cfg.train;
    let task = SkillTask::new(t.task).map_err(lora_err)?;
    let corpus = load_corpus(cfg, &cfg.resolve(&t.corpus), task.input_dim())?;

    create_dir(&cfg.out("artifacts"))?;
    let mut log_text = String::new();
    let common = task.common_samples(t.base_samples, t.base_seed);
    let (base, base_losses) = lora::train_base(&common, t.task.classes, t.base_steps, t.base_lr).map_err(lora_err)?;
    check_trend("base", &base_losses)?;
    loss_log(&mut log_text, "base", &base_losses);
    lora::save_base(&base, &cfg.out("artifacts/base.bin")).map_err(lora_err)?;

    let xs: Vec<Vec<f64>> = corpus.iter().map(|s| s.x.clone()).collect();
    let model = cluster::cluster(&xs, cfg.cluster.k, cfg.cluster.seed, cfg.cluster.max_iters).map_err(cluster_err)?;
    model.save(&cfg.out("artifacts/clusters.txt")).map_err(cluster_err)?;

    let mut experts = Vec::new();
    let mut skipped = Vec::new();
    for k in 0..model.k {
        let members: Vec<Sample> = corpus
            .iter()
            .zip(&model.assignments)
            .filter(|(_, &c)| c == k)
            .map(|(s, _)| s.clone())
            .collect();
        if members.is_empty() {
            log::warn!("cluster {k} is empty; no expert trained");
            skipped.push(k);
            continue;
        }
        let id = experts.len();
        let seed = t.expert_seed.wrapping_add(k as u64);
        let (mut expert, losses) = lora::train_expert(
            &base,
            &members,
            t.rank,
            t.expert_steps,
            t.expert_lr,
            seed,
            id,
            model.centroids[k].clone(),
        )
        .map_err(lora_err)?;
        expert.source_cluster = k;
        check_trend(&format!("expert {id}"), &losses)?;
        loss_log(&mut log_text, &format!("expert-{id}"), &losses);
        let file = format!("expert-{id}.bin");
        lora::save_expert(&expert, &cfg.out(&format!("artifacts/{file}"))).map_err(lora_err)?;
        experts.push(ExpertEntry {
            id,
            file,
            source_cluster: k,
            members: members.len(),
            seed,
            digest: expert.digest(),
            initial_loss: losses.first().copied().unwrap_or(f64::NAN),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    if base.digest() != lora::load_base(&cfg.out("artifacts/base.bin")).map_err(lora_err)?.digest() {
        return Err(PipelineError::Numeric("base weights changed while training experts".into()));
    }
    let manifest = Manifest {
        k: experts.len(),
        rank: t.rank,
        input_dim: task.input_dim(),
        classes: t.task.classes,
        base_file: "base.bin".into(),
        base_digest: base.digest(),
        clusters_file: "clusters.txt".into(),
        skipped_clusters: skipped,
        experts,
        hypernet: None,
    };
    manifest.save(&cfg.out("artifacts/manifest.toml"))?;
    write_file(&cfg.out("logs/train_experts.log"), log_text)?;
    Ok(manifest)
}

struct Artifacts {
    manifest: Manifest,
    base: lora::ToyBaseModel,
    experts: Vec<LoraExpert>,
}

fn load_artifacts(cfg: &PipelineConfig) -> Result<Artifacts, PipelineError> {
    let manifest = Manifest::load(&cfg.out("artifacts/manifest.toml"))?;
    if manifest.experts.is_empty() {
        return Err(PipelineError::Input("manifest lists no experts".into()));
    }
    let base = lora::load_base(&cfg.out(&format!("artifacts/{}", manifest.base_file))).map_err(lora_err)?;
    if base.digest() != manifest.base_digest {
        return Err(PipelineError::Input("base weights do not match the manifest digest".into()));
    }
    let experts = manifest
        .experts
        .iter()
        .map(|e| {
            let expert = lora::load_expert(&cfg.out(&format!("artifacts/{}", e.file)), e.id, e.source_cluster)
                .map_err(lora_err)?;
            if expert.digest() != e.digest {
                return Err(PipelineError::Input(format!("expert {} does not match the manifest digest", e.id)));
            }
            Ok(expert)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Artifacts {
        manifest,
        base,
        experts,
    })
}

/// Trains the gating hypernetwork with base and experts frozen.
pub fn cmd_train_hypernet(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let Artifacts {
        mut manifest,
        base,
        experts,
    } = load_artifacts(cfg)?;
    let corpus = load_corpus(cfg, &cfg.resolve(&cfg.train.corpus), manifest.input_dim)?;
    let h = &cfg.train.hypernet;
    let (net, curve) = lora::train_hypernet(&base, &experts, &corpus, h).map_err(lora_err)?;
    check_trend("hypernetwork", &curve)?;

    // Freeze contract: nothing but the hypernetwork may have moved.
    if base.digest() != manifest.base_digest
        || experts.iter().zip(&manifest.experts).any(|(e, m)| e.digest() != m.digest)
    {
        return Err(PipelineError::Numeric("frozen weights changed during hypernetwork training".into()));
    }
    let file = "hypernet.bin".to_string();
    lora::save_hypernet(&net, &cfg.out(&format!("artifacts/{file}"))).map_err(lora_err)?;
    let mut log_text = String::new();
    loss_log(&mut log_text, "hypernet-epoch", &curve);
    write_file(&cfg.out("logs/train_hypernet.log"), log_text)?;
    manifest.hypernet = Some(HypernetEntry {
        file,
        hidden: h.hidden,
        steps: h.steps,
        lr: h.lr,
        batch_size: h.batch_size,
        seed: h.seed,
        digest: net.digest(),
        initial_loss: curve[0],
        final_loss: *curve.last().expect("curve has the initial loss"),
    });
    manifest.save(&cfg.out("artifacts/manifest.toml"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `training-corpus`, or `cross-dataset` when evaluated on an override.
    pub label: String,
    pub dataset: String,
    pub samples: usize,
    pub k: usize,
    /// Base, each expert, static average, gated composition.
    pub rows: Vec<lora::ModelScore>,
}

impl EvalSummary {
    pub fn row(&self, model: &str) -> Option<&lora::ModelScore> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{} evaluation on {} ({} samples)\n", self.label, self.dataset, self.samples);
        s.push_str(&format!("{:<16}", "model"));
        for k in 0..self.k {
            s.push_str(&format!(" {:>9}", format!("cluster{k}")));
        }
        s.push_str(&format!(" {:>9}\n", "overall"));
        for row in &self.rows {
            s.push_str(&format!("{:<16}", row.model));
            for acc in &row.per_cluster {
                s.push_str(&format!(" {:>9.1}", 100.0 * acc));
            }
            s.push_str(&format!(" {:>9.1}\n", 100.0 * row.overall));
        }
        s
    }
}

/// Accuracy of every model variant on the training corpus, or on
/// `dataset_override` (a sample file the hypernetwork never saw).
pub fn cmd_eval(cfg: &PipelineConfig, dataset_override: Option<&Path>) -> Result<EvalSummary, PipelineError> {
    let Artifacts {
        manifest,
        base,
        experts,
    } = load_artifacts(cfg)?;
    let entry = manifest
        .hypernet
        .as_ref()
        .ok_or_else(|| PipelineError::Input("no hypernetwork in the manifest; run train-hypernet first".into()))?;
    let net = lora::load_hypernet(&cfg.out(&format!("artifacts/{}", entry.file)), experts.len(), manifest.rank)
        .map_err(lora_err)?;
    if net.digest() != entry.digest {
        return Err(PipelineError::Input("hypernetwork does not match the manifest digest".into()));
    }
    let (label, path) = match dataset_override {
        Some(p) => ("cross-dataset", p.to_path_buf()),
        None => ("training-corpus", cfg.resolve(&cfg.train.corpus)),
    };
    let samples = load_corpus(cfg, &path, manifest.input_dim)?;
    // Group by the nearest expert centroid.
    let clusters = samples
        .iter()
        .map(|s| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, e) in experts.iter().enumerate() {
                let sim = cluster::cosine_similarity(&s.x, &e.centroid).map_err(cluster_err)?;
                if sim > best.1 {
                    best = (k, sim);
                }
            }
            Ok(best.0)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let rows = lora::evaluate(&base, &experts, &net, &samples, &clusters).map_err(lora_err)?;
    let summary = EvalSummary {
        label: label.into(),
        dataset: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        samples: samples.len(),
        k: experts.len(),
        rows,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let name = if dataset_override.is_some() {
        "eval_cross_dataset.json"
    } else {
        "eval_report.json"
    };
    write_file(&cfg.out(name), json + "\n")?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

const DEMO_CONFIG: &str = r#"# Demo experiment: a synthetic 20-problem corpus answered by two scripted
# policies, judged by the in-process mock executor.
problems = "problems.jsonl"
output_dir = "out"

[[agents]]
kind = "scripted"
path = "books/alpha.json"

[[agents]]
kind = "scripted"
path = "books/beta.json"

[executor]
kind = "mock"

[search]
c_explore = 1.0
gamma = 0.9
rollout_budget = 50
max_depth = 8
refine_global_budget = 8
refine_local_budget = 2
value_aggregator = "mean"
puct_value_source = "child"
prune_enabled = true
refine_enabled = true
seed = 0

[extract]
threshold = 1.0

[cluster]
k = 3
seed = 0
max_iters = 100
pool = "all"
embedding = { kind = "hashed", dim = 256 }

[train]
corpus = "toy_a.tsv"
base_samples = 600
base_steps = 300
base_lr = 0.5
base_seed = 11
rank = 3
expert_steps = 400
expert_lr = 0.5
expert_seed = 0

[train.task]
skills = 3
features = 8
classes = 6
perturb_rank = 2
perturb_scale = 2.0
indicator_scale = 4.0
margin = 0.5
seed = __SEED__

[train.hypernet]
hidden = 64
steps = 600
lr = 0.5
batch_size = 32
seed = 0
"#;

/// Number of samples in each generated skill corpus.
pub const DEMO_SAMPLES: usize = 1500;

/// Writes a self-contained demo experiment next to `config_path`: the
/// config, the synthetic problem corpus with its script books, and two
/// disjoint skill corpora (`toy_a.tsv` for training, `toy_b.tsv` for
/// cross-dataset evaluation).
pub fn cmd_init(config_path: &Path, seed: u64) -> Result<(), PipelineError> {
    let dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    create_dir(&dir)?;
    fixtures::synthetic_corpus(seed).write(&dir).map_err(io_err(&dir))?;
    let task_cfg = SkillTaskConfig {
        seed,
        ..SkillTaskConfig::default()
    };
    let task = SkillTask::new(task_cfg).map_err(lora_err)?;
    let salt = seed.wrapping_mul(1000);
    lora::write_samples(&task.sample(DEMO_SAMPLES, salt.wrapping_add(1)), &dir.join("toy_a.tsv")).map_err(lora_err)?;
    lora::write_samples(&task.sample(DEMO_SAMPLES, salt.wrapping_add(2)), &dir.join("toy_b.tsv")).map_err(lora_err)?;
    write_file(config_path, DEMO_CONFIG.replace("__SEED__", &seed.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bdc.toml");
        cmd_init(&path, 0).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        (dir, cfg)
    }

    #[test]
    fn demo_config_parses_with_defaults() {
        let (_dir, cfg) = demo();
        assert_eq!(cfg.agents.len(), 2);
        assert_eq!(cfg.search, SearchConfig::default());
        assert_eq!(cfg.cluster, ClusterSpec::default());
        assert_eq!(cfg.train, TrainSpec::default());
    }

    #[test]
    fn remote_agent_spec_parses() {
        let (dir, _) = demo();
        let text = r#"
            problems = "problems.jsonl"
            output_dir = "out"
            [[agents]]
            kind = "remote"
            policy_id = "gpt"
            capabilities = ["proposer", "solver"]
            base_url = "http://localhost:1/v1"
            model = "m"
            token_env = "API_TOKEN"
        "#;
        let cfg = PipelineConfig::parse(text, dir.path()).unwrap();
        match &cfg.agents[0] {
            AgentSpec::Remote { settings, templates } => {
                assert_eq!(settings.policy_id, "gpt");
                assert_eq!(settings.retries, 3);
                assert!(templates.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_errors_are_config_errors() {
        let (dir, _) = demo();
        let missing = "problems = \"nope.jsonl\"\noutput_dir = \"o\"\n[[agents]]\nkind = \"scripted\"\npath = \"books/alpha.json\"\n";
        let e = PipelineConfig::parse(missing, dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let unknown = "problems = \"problems.jsonl\"\noutput_dir = \"o\"\nbogus = 1\nagents = []\n";
        assert_eq!(PipelineConfig::parse(unknown, dir.path()).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn empty_problems_file_is_rejected() {
        let (dir, cfg) = demo();
        fs::write(dir.path().join("problems.jsonl"), "").unwrap();
        let e = cmd_collect(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_INPUT);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let (_dir, cfg) = demo();
        assert!(matches!(cmd_cluster(&cfg), Err(PipelineError::Input(_))));
        assert!(matches!(cmd_train_hypernet(&cfg), Err(PipelineError::Input(_))));
        assert!(matches!(cmd_eval(&cfg, None), Err(PipelineError::Input(_))));
    }

    #[test]
    fn cluster_rejects_k_above_record_count() {
        let (_dir, mut cfg) = demo();
        cmd_collect(&cfg).unwrap();
        cfg.cluster.k = 10_000;
        assert!(matches!(cmd_cluster(&cfg), Err(PipelineError::Input(_))));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [EXIT_INPUT, EXIT_CONFIG, EXIT_POLICY, EXIT_EXECUTOR, EXIT_NUMERIC];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert!(codes.iter().all(|&c| c != 0));
        assert_eq!(
            search_err("p", SearchError::Eval(EvalError::Infrastructure("spawn".into()))).exit_code(),
            EXIT_EXECUTOR
        );
        assert_eq!(
            search_err(
                "p",
                SearchError::Policy(PolicyError::Transport {
                    policy: "a".into(),
                    attempts: 4,
                    reason: "refused".into()
                })
            )
            .exit_code(),
            EXIT_POLICY
        );
        assert_eq!(lora_err(LoraError::Numeric("nan".into())).exit_code(), EXIT_NUMERIC);
    }
}
