//! Embedding of trajectory pairs and spherical k-means under cosine distance.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::trajectory::TrajectoryRecord;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("embedding endpoint unavailable after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("embedding endpoint protocol error: {0}")]
    Protocol(String),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClusterError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClusterError::Transport { .. })
    }
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Deterministic: the same text always maps to the same vector.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClusterError>;
}

pub fn embed(provider: &dyn EmbeddingProvider, record: &TrajectoryRecord) -> Result<Vec<f64>, ClusterError> {
    if record.context.trim().is_empty() && record.target.trim().is_empty() {
        return Err(ClusterError::Invalid("record has empty context and target".into()));
    }
    let v = provider.embed_text(&record.pair_text())?;
    if v.len() != provider.dim() {
        return Err(ClusterError::Invalid(format!(
            "provider returned {} components, expected {}",
            v.len(),
            provider.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ClusterError::Numeric("embedding has non-finite components".into()));
    }
    Ok(v)
}

/// Fills `embedding` on every record.
pub fn embed_records(provider: &dyn EmbeddingProvider, records: &mut [TrajectoryRecord]) -> Result<(), ClusterError> {
    for r in records.iter_mut() {
        r.embedding = Some(embed(provider, r)?);
    }
    Ok(())
}

/// Hashed token-frequency features: lowercase alphanumeric runs and single
/// punctuation characters, FNV-1a hashed into `dim` buckets, weighted
/// `1 + ln(count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedding {
    pub dim: usize,
}

impl Default for HashedEmbedding {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

impl EmbeddingProvider for HashedEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClusterError> {
        if self.dim == 0 {
            return Err(ClusterError::Invalid("embedding dim must be positive".into()));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(ClusterError::Invalid("text has no tokens".into()));
        }
        let mut counts = vec![0u32; self.dim];
        for t in &tokens {
            counts[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1;
        }
        Ok(counts
            .into_iter()
            .map(|c| if c == 0 { 0.0 } else { 1.0 + f64::from(c).ln() })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbeddingSettings {
    /// Base URL; `/embeddings` is appended.
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_ms() -> u64 {
    60_000
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedding {
    settings: RemoteEmbeddingSettings,
    agent: ureq::Agent,
}

impl RemoteEmbedding {
    pub fn new(settings: RemoteEmbeddingSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { settings, agent }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<serde_json::Value, ClusterError> {
        let url = format!("{}/embeddings", self.settings.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(var) = &self.settings.token_env {
            let token = std::env::var(var)
                .map_err(|_| ClusterError::Invalid(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let transport = |reason: String| ClusterError::Transport { attempts: 1, reason };
        let resp = req.send_json(body).map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClusterError::Protocol(format!("HTTP {status}")));
        }
        resp.into_body()
            .read_json()
            .map_err(|e| ClusterError::Protocol(format!("invalid JSON body: {e}")))
    }
}

impl EmbeddingProvider for RemoteEmbedding {
    fn dim(&self) -> usize {
        self.settings.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClusterError> {
        let body = serde_json::json!({"model": self.settings.model, "input": text});
        let mut attempts = 0;
        let value = loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => break v,
                Err(e) if e.is_retryable() && attempts <= self.settings.retries => {
                    let wait = self.settings.backoff_ms.saturating_mul(1 << (attempts - 1));
                    log::warn!("{e}; retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                }
                Err(ClusterError::Transport { reason, .. }) => {
                    return Err(ClusterError::Transport { attempts, reason });
                }
                Err(e) => return Err(e),
            }
        };
        let v: Vec<f64> = value
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| ClusterError::Protocol("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ClusterError::Protocol("non-numeric component".into())))
            .collect::<Result<_, _>>()?;
        if v.len() != self.settings.dim {
            return Err(ClusterError::Protocol(format!(
                "endpoint returned {} components, expected {}",
                v.len(),
                self.settings.dim
            )));
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn normalize(u: &[f64]) -> Result<Vec<f64>, ClusterError> {
    let n = norm(u);
    if !(n > 0.0 && n.is_finite()) {
        return Err(ClusterError::Numeric(format!("vector norm {n} cannot be normalized")));
    }
    Ok(u.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, ClusterError> {
    if u.len() != v.len() {
        return Err(ClusterError::Invalid(format!("dimension mismatch: {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(ClusterError::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `1 − cos(u, v)`, in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, ClusterError> {
    Ok(1.0 - cosine_similarity(u, v)?)
}

// ---------------------------------------------------------------------------
// Spherical k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    /// Unit-norm rows.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of cosine distances from each point to its centroid.
    pub objective: f64,
    /// Objective after each centroid update.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn validate_points(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ClusterError> {
    let dim = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| ClusterError::Invalid("no vectors to cluster".into()))?;
    if dim == 0 {
        return Err(ClusterError::Invalid("vectors have zero dimension".into()));
    }
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != dim {
                return Err(ClusterError::Invalid(format!("vector {i} has dim {}, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ClusterError::Numeric(format!("vector {i} has non-finite components")));
            }
            normalize(v).map_err(|e| ClusterError::Numeric(format!("vector {i}: {e}")))
        })
        .collect()
}

/// Nearest centroid (lowest index on ties) and its distance; inputs are unit norm.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = 1.0 - dot(point, c).clamp(-1.0, 1.0);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1.powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // Every point coincides with a chosen centroid; any unused index will do.
            let unused: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Spherical k-means with k-means++ seeding under cosine distance.
pub fn cluster(vectors: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel, ClusterError> {
    if k == 0 {
        return Err(ClusterError::Invalid("K must be at least 1".into()));
    }
    if k > vectors.len() {
        return Err(ClusterError::Invalid(format!("K = {k} exceeds the {} points", vectors.len())));
    }
    let points = validate_points(vectors)?;
    let init = seed_centroids(&points, k, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut model = lloyd(&points, init, max_iters)?;
    model.seed = seed;
    Ok(model)
}

/// Spherical k-means from explicit initial centroids.
pub fn cluster_with_init(
    vectors: &[Vec<f64>],
    init: &[Vec<f64>],
    max_iters: usize,
) -> Result<ClusterModel, ClusterError> {
    if init.is_empty() || init.len() > vectors.len() {
        return Err(ClusterError::Invalid(format!(
            "need 1..={} initial centroids, got {}",
            vectors.len(),
            init.len()
        )));
    }
    let points = validate_points(vectors)?;
    let init = init
        .iter()
        .map(|c| {
            if c.len() != points[0].len() {
                return Err(ClusterError::Invalid("initial centroid dimension mismatch".into()));
            }
            normalize(c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    lloyd(&points, init, max_iters)
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> Result<ClusterModel, ClusterError> {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let mut next: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let labels: Vec<usize> = next.iter().map(|&(j, _)| j).collect();
        if labels == assignments {
            converged = true;
            break;
        }
        if iterations == max_iters {
            break;
        }
        repair_empty(points, &mut centroids, &mut next);
        assignments = next.iter().map(|&(j, _)| j).collect();

        for (j, centroid) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; dim];
            for (p, _) in points.iter().zip(&assignments).filter(|(_, &a)| a == j) {
                for (s, x) in sum.iter_mut().zip(p) {
                    *s += x;
                }
            }
            // Antipodal members can cancel out; the old centroid stays then.
            if let Ok(c) = normalize(&sum) {
                *centroid = c;
            }
        }
        let objective: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| 1.0 - dot(p, &centroids[a]).clamp(-1.0, 1.0))
            .sum();
        if let Some(&prev) = history.last() {
            debug_assert!(objective <= prev + 1e-9, "objective rose from {prev} to {objective}");
        }
        history.push(objective);
        iterations += 1;
    }
    if history.is_empty() {
        // max_iters == 0: report the seeding's assignment.
        let next: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        assignments = next.iter().map(|&(j, _)| j).collect();
        history.push(next.iter().map(|&(_, d)| d).sum());
    }
    Ok(ClusterModel {
        k,
        dim,
        seed: 0,
        centroids,
        objective: *history.last().expect("history is non-empty"),
        assignments,
        history,
        iterations,
        converged,
    })
}

/// Gives every empty cluster the point currently farthest from its own
/// centroid, taken from a cluster that has more than one member.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [(usize, f64)]) {
    for j in 0..centroids.len() {
        let mut sizes = vec![0usize; centroids.len()];
        for &(a, _) in labels.iter() {
            sizes[a] += 1;
        }
        if sizes[j] > 0 {
            continue;
        }
        let donor = labels
            .iter()
            .enumerate()
            .filter(|(_, &(a, _))| sizes[a] > 1)
            .fold(None, |best: Option<(usize, f64)>, (i, &(_, d))| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = donor {
            log::debug!("cluster {j} empty; reassigning point {i}");
            labels[i] = (j, 0.0);
            centroids[j] = points[i].clone();
        }
    }
}

impl ClusterModel {
    /// Nearest centroid and the K cosine similarities in centroid order.
    pub fn assign(&self, vector: &[f64]) -> Result<(usize, Vec<f64>), ClusterError> {
        if vector.len() != self.dim {
            return Err(ClusterError::Invalid(format!(
                "vector has dim {}, model has {}",
                vector.len(),
                self.dim
            )));
        }
        let sims = self
            .centroids
            .iter()
            .map(|c| cosine_similarity(vector, c))
            .collect::<Result<Vec<_>, _>>()?;
        let mut best = 0;
        for (j, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = j;
            }
        }
        Ok((best, sims))
    }

    /// Text form: header lines `key value`, then one `centroid j ...` row per
    /// cluster and an `assignments ...` line. Floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(" ");
        writeln!(s, "k {}", self.k).unwrap();
        writeln!(s, "dim {}", self.dim).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "objective {}", self.objective).unwrap();
        writeln!(s, "iterations {}", self.iterations).unwrap();
        writeln!(s, "converged {}", self.converged).unwrap();
        writeln!(s, "history {}", join(&mut self.history.iter().map(f64::to_string))).unwrap();
        for (j, c) in self.centroids.iter().enumerate() {
            writeln!(s, "centroid {j} {}", join(&mut c.iter().map(f64::to_string))).unwrap();
        }
        writeln!(s, "assignments {}", join(&mut self.assignments.iter().map(usize::to_string))).unwrap();
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|(line, reason)| ClusterError::Parse {
            path: path.display().to_string(),
            line,
            reason,
        })
    }

    pub fn from_text(text: &str) -> Result<Self, (usize, String)> {
        fn nums<T: std::str::FromStr>(line: usize, rest: &str) -> Result<Vec<T>, (usize, String)>
        where
            T::Err: std::fmt::Display,
        {
            rest.split_whitespace()
                .map(|x| x.parse::<T>().map_err(|e| (line, format!("bad number `{x}`: {e}"))))
                .collect()
        }
        fn one<T: std::str::FromStr>(line: usize, rest: &str) -> Result<T, (usize, String)>
        where
            T::Err: std::fmt::Display,
        {
            rest.trim().parse().map_err(|e| (line, format!("bad value `{rest}`: {e}")))
        }

        let mut m = ClusterModel {
            k: 0,
            dim: 0,
            seed: 0,
            centroids: Vec::new(),
            assignments: Vec::new(),
            objective: 0.0,
            history: Vec::new(),
            iterations: 0,
            converged: false,
        };
        let mut last = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last = line;
            let (key, rest) = raw.split_once(' ').unwrap_or((raw, ""));
            match key {
                "k" => m.k = one(line, rest)?,
                "dim" => m.dim = one(line, rest)?,
                "seed" => m.seed = one(line, rest)?,
                "objective" => m.objective = one(line, rest)?,
                "iterations" => m.iterations = one(line, rest)?,
                "converged" => m.converged = one(line, rest)?,
                "history" => m.history = nums(line, rest)?,
                "assignments" => m.assignments = nums(line, rest)?,
                "centroid" => {
                    let (j, row) = rest.split_once(' ').unwrap_or((rest, ""));
                    let j: usize = one(line, j)?;
                    if j != m.centroids.len() {
                        return Err((line, format!("centroid {j} out of order")));
                    }
                    let row: Vec<f64> = nums(line, row)?;
                    if row.len() != m.dim {
                        return Err((line, format!("centroid has {} components, expected {}", row.len(), m.dim)));
                    }
                    if norm(&row) == 0.0 {
                        return Err((line, "centroid has zero norm".into()));
                    }
                    m.centroids.push(row);
                }
                other => return Err((line, format!("unknown key `{other}`"))),
            }
        }
        if m.k == 0 || m.centroids.len() != m.k {
            return Err((last, format!("expected {} centroids, found {}", m.k, m.centroids.len())));
        }
        if m.assignments.iter().any(|&a| a >= m.k) {
            return Err((last, "assignment refers to a missing centroid".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::RecordKind;
    use rand_distr::{Distribution, Normal};

    fn unit(v: &[f64]) -> Vec<f64> {
        normalize(v).unwrap()
    }

    fn objective_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let dim = points[0].len();
        let mut total = 0.0;
        for j in 0..k {
            let mut sum = vec![0.0; dim];
            for (p, _) in points.iter().zip(labels).filter(|(_, &l)| l == j) {
                for (s, x) in sum.iter_mut().zip(p) {
                    *s += x;
                }
            }
            let c = unit(&sum);
            for (p, _) in points.iter().zip(labels).filter(|(_, &l)| l == j) {
                total += cosine_distance(p, &c).unwrap();
            }
        }
        total
    }

    /// Adjusted Rand index from the pair-counting contingency table.
    fn ari(a: &[usize], b: &[usize]) -> f64 {
        let ka = a.iter().max().unwrap() + 1;
        let kb = b.iter().max().unwrap() + 1;
        let mut table = vec![vec![0f64; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            table[x][y] += 1.0;
        }
        let c2 = |n: f64| n * (n - 1.0) / 2.0;
        let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
        let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
        let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
        let expected = rows * cols / c2(a.len() as f64);
        let max = (rows + cols) / 2.0;
        (index - expected) / (max - expected)
    }

    /// Three noisy cones around orthogonal axes in 16 dimensions.
    pub(crate) fn planted(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.15).unwrap();
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let mut v: Vec<f64> = (0..16).map(|_| noise.sample(&mut rng)).collect();
            v[c * 5] += 1.0;
            points.push(v);
            truth.push(c);
        }
        (points, truth)
    }

    #[test]
    fn hashed_embedding_is_deterministic_and_sensitive() {
        let e = HashedEmbedding::default();
        let a = e.embed_text("sum the two numbers").unwrap();
        assert_eq!(a, e.embed_text("sum the two numbers").unwrap());
        assert_ne!(a, e.embed_text("sum the three numbers").unwrap());
        assert_eq!(a.len(), 256);
        let rec = |c: &str, t: &str| TrajectoryRecord {
            problem_id: "p".into(),
            kind: RecordKind::ProblemToThought,
            context: c.into(),
            target: t.into(),
            pass_fraction: 1.0,
            embedding: None,
            cluster: None,
        };
        assert!(matches!(embed(&e, &rec("", "")), Err(ClusterError::Invalid(_))));
        assert_eq!(embed(&e, &rec("x", "y")).unwrap().len(), 256);
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -0.4, 1.2];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let u3: Vec<f64> = u.iter().map(|x| 3.0 * x).collect();
        assert!(cosine_distance(&u, &u3).unwrap().abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(ClusterError::Numeric(_))));
    }

    #[test]
    fn four_points_match_brute_force() {
        let points: Vec<Vec<f64>> = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]
            .iter()
            .map(|p| unit(p))
            .collect();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..15 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let obj = objective_of(&points, &labels, 2);
            if obj < best.0 {
                best = (obj, labels);
            }
        }
        let m = cluster(&points, 2, 3, 100).unwrap();
        assert_eq!(m.assignments[0], m.assignments[1]);
        assert_eq!(m.assignments[2], m.assignments[3]);
        assert_ne!(m.assignments[0], m.assignments[2]);
        assert_eq!(best.1[0], best.1[1]);
        assert!((m.objective - best.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let points = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 2.0]];
        let m = cluster(&points, 1, 0, 10).unwrap();
        let units: Vec<Vec<f64>> = points.iter().map(|p| unit(p)).collect();
        let mean = unit(&[units.iter().map(|u| u[0]).sum(), units.iter().map(|u| u[1]).sum()]);
        assert!((m.centroids[0][0] - mean[0]).abs() < 1e-12);
        let expected: f64 = points.iter().map(|p| cosine_distance(p, &mean).unwrap()).sum();
        assert!((m.objective - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicates_trigger_repair() {
        let points = vec![vec![1.0, 2.0]; 5];
        let m = cluster(&points, 2, 11, 50).unwrap();
        assert_eq!(m.centroids.len(), 2);
        for c in &m.centroids {
            assert!((norm(c) - 1.0).abs() < 1e-12);
        }
        assert!(m.assignments.contains(&0) && m.assignments.contains(&1));
    }

    #[test]
    fn k_larger_than_points_is_rejected() {
        assert!(matches!(cluster(&[vec![1.0]], 2, 0, 10), Err(ClusterError::Invalid(_))));
        assert!(matches!(cluster(&[vec![1.0]], 0, 0, 10), Err(ClusterError::Invalid(_))));
    }

    #[test]
    fn planted_cones_are_recovered() {
        let (points, truth) = planted(200, 5);
        let m = cluster(&points, 3, 1, 100).unwrap();
        assert!(m.converged && m.iterations <= 100);
        for w in m.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(ari(&m.assignments, &truth) >= 0.9);
    }

    #[test]
    fn ari_oracle_sanity() {
        assert!((ari(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        // Known value for this pair of labelings.
        assert!((ari(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]) - 0.242_424_242_424_242_4).abs() < 1e-12);
    }

    #[test]
    fn refit_from_own_centroids_is_stable() {
        let (points, _) = planted(90, 8);
        let m = cluster(&points, 3, 2, 100).unwrap();
        let again = cluster_with_init(&points, &m.centroids, 100).unwrap();
        assert_eq!(again.iterations, 1);
        assert_eq!(again.assignments, m.assignments);
    }

    #[test]
    fn assign_reports_similarities() {
        let (points, _) = planted(60, 4);
        let m = cluster(&points, 3, 0, 100).unwrap();
        let (idx, sims) = m.assign(&m.centroids[2]).unwrap();
        assert_eq!(idx, 2);
        assert!((sims[2] - 1.0).abs() < 1e-12);
        for p in &points {
            let (idx, sims) = m.assign(p).unwrap();
            assert_eq!(sims.len(), 3);
            let argmax = (0..3).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
            assert!((sims[argmax] - sims[idx]).abs() < 1e-15);
        }
        assert!(matches!(m.assign(&[1.0]), Err(ClusterError::Invalid(_))));
    }

    #[test]
    fn model_text_roundtrip() {
        let (points, _) = planted(30, 1);
        let m = cluster(&points, 3, 9, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        m.save(&path).unwrap();
        assert_eq!(ClusterModel::load(&path).unwrap(), m);
        fs::write(&path, "k 1\ndim 2\ncentroid 0 0 0\n").unwrap();
        assert!(matches!(ClusterModel::load(&path), Err(ClusterError::Parse { line: 3, .. })));
    }

    #[test]
    fn remote_embedding_via_stub() {
        let ok = r#"{"data":[{"embedding":[0.5,-1.0,2.0]}]}"#.to_string();
        let (url, count) = crate::testutil::stub_server(vec![(503, "{}".into()), (200, ok)]);
        let provider = RemoteEmbedding::new(RemoteEmbeddingSettings {
            base_url: url,
            model: "enc".into(),
            dim: 3,
            token_env: None,
            retries: 3,
            backoff_ms: 1,
            timeout_ms: 5_000,
        });
        assert_eq!(provider.embed_text("x").unwrap(), vec![0.5, -1.0, 2.0]);
        assert_eq!(count.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn remote_embedding_unreachable_is_retryable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let provider = RemoteEmbedding::new(RemoteEmbeddingSettings {
            base_url: format!("http://{addr}"),
            model: "enc".into(),
            dim: 3,
            token_env: None,
            retries: 1,
            backoff_ms: 1,
            timeout_ms: 2_000,
        });
        match provider.embed_text("x") {
            Err(e @ ClusterError::Transport { attempts: 2, .. }) => assert!(e.is_retryable()),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 6..40)
            .prop_filter("nonzero", |ps| ps.iter().all(|p| norm(p) > 1e-3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn objective_never_rises(ps in points(), k in 1usize..5, seed in any::<u64>()) {
            let m = cluster(&ps, k.min(ps.len()), seed, 100).unwrap();
            for w in m.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", m.history);
            }
            for (p, &a) in ps.iter().zip(&m.assignments) {
                if m.converged {
                    let (best, sims) = m.assign(p).unwrap();
                    prop_assert!(sims[best] - sims[a] < 1e-12);
                }
            }
        }

        #[test]
        fn assignments_are_scale_invariant(
            ps in points(),
            scales in prop::collection::vec(0.01f64..100.0, 40),
            seed in any::<u64>(),
        ) {
            let scaled: Vec<Vec<f64>> = ps.iter().zip(&scales)
                .map(|(p, s)| p.iter().map(|x| x * s).collect())
                .collect();
            let a = cluster(&ps, 3, seed, 100).unwrap();
            let b = cluster(&scaled, 3, seed, 100).unwrap();
            prop_assert_eq!(a.assignments, b.assignments);
        }
    }
}
