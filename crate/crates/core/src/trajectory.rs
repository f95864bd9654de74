//! Training pairs extracted from finished search trees, their line-oriented
//! dataset file, and seeded permuted batching.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tree::{SearchTree, STATE_SEPARATOR};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    /// Context is the statement plus thoughts so far, target the next thought.
    ProblemToThought,
    /// Context is the statement plus the full thought chain, target a program.
    ThoughtToSolution,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::ProblemToThought => "problem2thought",
            RecordKind::ThoughtToSolution => "thought2solution",
        })
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "problem2thought" => Ok(RecordKind::ProblemToThought),
            "thought2solution" => Ok(RecordKind::ThoughtToSolution),
            other => Err(format!("unknown record kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub problem_id: String,
    pub kind: RecordKind,
    pub context: String,
    pub target: String,
    pub pass_fraction: f64,
    /// Not persisted in the dataset file.
    pub embedding: Option<Vec<f64>>,
    pub cluster: Option<usize>,
}

impl TrajectoryRecord {
    /// The ⟨context, target⟩ pair as one text, the unit that gets embedded.
    pub fn pair_text(&self) -> String {
        format!("{}{STATE_SEPARATOR}{}", self.context, self.target)
    }
}

/// One p2t record per thought prefix and one t2s record for every surviving
/// root-to-terminal path whose best solution reaches `threshold`.
pub fn extract_pairs(tree: &SearchTree, threshold: f64) -> Vec<TrajectoryRecord> {
    let mut records = Vec::new();
    let statement = &tree.problem.statement;
    for terminal in tree.nodes().iter().filter(|n| n.is_terminal()) {
        let Some(best) = &terminal.best_solution else {
            continue;
        };
        if best.pass_fraction < threshold {
            continue;
        }
        let path = tree.path_to_root(terminal.id).expect("node ids come from the tree");
        if path.iter().any(|n| n.status.is_removed()) {
            continue;
        }
        let mut thoughts: Vec<&str> = path.iter().skip(1).map(|n| n.thought.as_str()).collect();
        if terminal.is_program {
            thoughts.pop();
        }
        let mut context = statement.clone();
        for thought in &thoughts {
            records.push(TrajectoryRecord {
                problem_id: tree.problem.id.clone(),
                kind: RecordKind::ProblemToThought,
                context: context.clone(),
                target: thought.to_string(),
                pass_fraction: best.pass_fraction,
                embedding: None,
                cluster: None,
            });
            context.push_str(STATE_SEPARATOR);
            context.push_str(thought);
        }
        records.push(TrajectoryRecord {
            problem_id: tree.problem.id.clone(),
            kind: RecordKind::ThoughtToSolution,
            context,
            target: best.program.clone(),
            pass_fraction: best.pass_fraction,
            embedding: None,
            cluster: None,
        });
    }
    records
}

/// An ill thought and the replacement refined from it, kept apart from the
/// clean training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPair {
    pub problem_id: String,
    pub context: String,
    pub ill_thought: String,
    pub ill_passrate: Option<f64>,
    pub refined_thought: String,
    pub refined_passrate: Option<f64>,
}

pub fn extract_refinement_pairs(tree: &SearchTree) -> Vec<RefinementPair> {
    tree.nodes()
        .iter()
        .filter_map(|repl| {
            let ill = tree.node(repl.replaces?).ok()?;
            let parent = repl.parent?;
            Some(RefinementPair {
                problem_id: tree.problem.id.clone(),
                context: tree.state_text(parent).ok()?,
                ill_thought: ill.thought.clone(),
                ill_passrate: ill.passrate,
                refined_thought: repl.thought.clone(),
                refined_passrate: repl.passrate,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset file
// ---------------------------------------------------------------------------
//
// One record per line, UTF-8, six tab-separated fields:
//   problem_id  kind  context  target  pass_fraction  cluster
// Text fields escape `\` `\t` `\n` `\r` as `\\` `\t` `\n` `\r`; pass_fraction
// uses the shortest round-trip decimal form; an unassigned cluster is `-`.

fn escape(text: &str, out: &mut String) {
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(field: &str) -> Result<String, String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("invalid escape `\\{other}`")),
            None => return Err("dangling escape at end of field".into()),
        }
    }
    Ok(out)
}

pub fn format_record(r: &TrajectoryRecord) -> String {
    let mut line = String::new();
    escape(&r.problem_id, &mut line);
    line.push('\t');
    line.push_str(&r.kind.to_string());
    line.push('\t');
    escape(&r.context, &mut line);
    line.push('\t');
    escape(&r.target, &mut line);
    line.push('\t');
    line.push_str(&r.pass_fraction.to_string());
    line.push('\t');
    match r.cluster {
        Some(c) => line.push_str(&c.to_string()),
        None => line.push('-'),
    }
    line
}

pub fn parse_record(line: &str) -> Result<TrajectoryRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, found {}", fields.len()));
    }
    let pass_fraction: f64 = fields[4]
        .parse()
        .map_err(|e| format!("bad pass_fraction `{}`: {e}", fields[4]))?;
    if !(0.0..=1.0).contains(&pass_fraction) {
        return Err(format!("pass_fraction {pass_fraction} outside [0, 1]"));
    }
    let cluster = match fields[5] {
        "-" => None,
        c => Some(c.parse().map_err(|e| format!("bad cluster `{c}`: {e}"))?),
    };
    Ok(TrajectoryRecord {
        problem_id: unescape(fields[0])?,
        kind: fields[1].parse()?,
        context: unescape(fields[2])?,
        target: unescape(fields[3])?,
        pass_fraction,
        embedding: None,
        cluster,
    })
}

pub fn write_dataset(records: &[TrajectoryRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", format_record(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let record = parse_record(line).map_err(|reason| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        })?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded uniform permutation of item indices.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// One epoch over `items` in a seeded random order, chunked into batches of
/// `batch_size` (the last batch may be shorter).
pub fn permuted_batches<T>(items: &[T], batch_size: usize, seed: u64) -> impl Iterator<Item = Vec<&T>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order = permutation(items.len(), seed);
    let batches: Vec<Vec<&T>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &items[i]).collect())
        .collect();
    batches.into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{NodeId, NodeStatus, ProblemSpec, SolutionRecord, TestCase};

    fn tree() -> SearchTree {
        let problem = ProblemSpec {
            id: "p".into(),
            statement: "stmt".into(),
            tests: vec![TestCase::new("", "")],
            time_limit_ms: 10,
            memory_limit_mb: 10,
            max_depth: 3,
        };
        SearchTree::create_root(problem).unwrap()
    }

    fn solution(program: &str, pass: f64) -> Option<SolutionRecord> {
        Some(SolutionRecord {
            policy_id: "a".into(),
            program: program.into(),
            pass_fraction: pass,
        })
    }

    fn make_terminal(t: &mut SearchTree, id: NodeId, program: bool, pass: f64) {
        let n = t.node_mut(id).unwrap();
        n.status = NodeStatus::Terminal;
        n.is_program = program;
        n.best_solution = solution(if program { "s" } else { "prog" }, pass);
    }

    #[test]
    fn semantic_terminal_path() {
        let mut t = tree();
        let t1 = t.add_child(NodeId(0), "t1", "a", 0.5).unwrap();
        let term = t.add_child(t1, "s", "a", 0.5).unwrap();
        make_terminal(&mut t, term, true, 1.0);
        let recs = extract_pairs(&t, 1.0);
        assert_eq!(recs.len(), 2);
        assert_eq!(
            (recs[0].kind, recs[0].context.as_str(), recs[0].target.as_str()),
            (RecordKind::ProblemToThought, "stmt", "t1")
        );
        assert_eq!(
            (recs[1].kind, recs[1].context.as_str(), recs[1].target.as_str()),
            (RecordKind::ThoughtToSolution, "stmt\nt1", "s")
        );
    }

    #[test]
    fn threshold_and_status_gates() {
        let mut t = tree();
        let t1 = t.add_child(NodeId(0), "t1", "a", 0.5).unwrap();
        let term = t.add_child(t1, "s", "a", 0.5).unwrap();
        make_terminal(&mut t, term, true, 0.5);
        assert!(extract_pairs(&t, 1.0).is_empty());
        assert_eq!(extract_pairs(&t, 0.5).len(), 2);

        let mut t = tree();
        let bad = t.add_child(NodeId(0), "bad", "a", 0.5).unwrap();
        let leaf = t.add_child(bad, "x", "a", 0.5).unwrap();
        make_terminal(&mut t, leaf, false, 1.0);
        t.mark_ill(bad).unwrap();
        assert!(extract_pairs(&t, 0.0).is_empty());
    }

    #[test]
    fn count_law_for_rule_terminals() {
        let mut t = tree();
        let a = t.add_child(NodeId(0), "a", "p", 0.5).unwrap();
        let b = t.add_child(a, "b", "p", 0.5).unwrap();
        let c = t.add_child(b, "c", "p", 0.5).unwrap();
        make_terminal(&mut t, c, false, 1.0);
        let recs = extract_pairs(&t, 1.0);
        let p2t = recs.iter().filter(|r| r.kind == RecordKind::ProblemToThought).count();
        assert_eq!((p2t, recs.len()), (3, 4));
        assert_eq!(recs[3].context, "stmt\na\nb\nc");
        assert_eq!(recs[3].target, "prog");
    }

    fn record(i: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            problem_id: format!("p{i}"),
            kind: if i.is_multiple_of(2) {
                RecordKind::ProblemToThought
            } else {
                RecordKind::ThoughtToSolution
            },
            context: format!("line one\tand\\tab\nline {i}\r"),
            target: format!("target {i} ü"),
            pass_fraction: (i % 7) as f64 / 7.0,
            embedding: None,
            cluster: if i.is_multiple_of(3) { None } else { Some(i % 3) },
        }
    }

    #[test]
    fn dataset_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..100).map(record).collect();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        write_dataset(&records, &a).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, records);
        write_dataset(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        write_dataset(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let good = format_record(&record(1));
        fs::write(&path, format!("{good}\n{good}\np3\tproblem2thought\tctx\n")).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn batches_cover_each_item_once() {
        let items: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = permuted_batches(&items, 3, 1).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut seen: Vec<usize> = permuted_batches(&items, 3, 1).flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, items);
        let a: Vec<_> = permuted_batches(&items, 4, 9).collect();
        let b: Vec<_> = permuted_batches(&items, 4, 9).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_permute_differently() {
        let items: Vec<usize> = (0..100).collect();
        let orders: Vec<Vec<usize>> = (0..20)
            .map(|seed| permuted_batches(&items, 100, seed).flatten().copied().collect())
            .collect();
        for i in 0..orders.len() {
            for j in i + 1..orders.len() {
                assert_ne!(orders[i], orders[j]);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn record_line_roundtrip(
            pid in "[a-z0-9_]{1,8}",
            ctx in "\\PC*",
            target in "[\\PC\t\n\r\\\\]*",
            pass in 0.0f64..=1.0,
            cluster in proptest::option::of(0usize..16),
        ) {
            let r = TrajectoryRecord {
                problem_id: pid,
                kind: RecordKind::ThoughtToSolution,
                context: ctx,
                target,
                pass_fraction: pass,
                embedding: None,
                cluster,
            };
            let line = format_record(&r);
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(parse_record(&line).unwrap(), r);
        }
    }
}
