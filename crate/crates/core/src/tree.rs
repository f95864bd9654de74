//! Reasoning-tree data model: problems, nodes, statuses and path reconstruction.
//!
//! The tree owns no policy or evaluation logic. Node ids are dense ordinals in
//! creation order, which is what every tie-break in the search relies on.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Separator placed between the statement and each thought of a path.
pub const STATE_SEPARATOR: &str = "\n";

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("invalid problem {id}: {reason}")]
    InvalidProblem { id: String, reason: String },
    #[error("cannot add a child under node {node} with status {status}")]
    Structural { node: NodeId, status: NodeStatus },
    #[error("prior {0} is outside [0, 1]")]
    InvalidPrior(f64),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("tree file {path}, line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Serializes byte strings as UTF-8 text so problem files stay editable.
mod text_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(bytes) {
            Ok(text) => s.serialize_str(text),
            Err(_) => Err(serde::ser::Error::custom("test data must be valid UTF-8")),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    #[serde(with = "text_bytes")]
    pub input: Vec<u8>,
    #[serde(with = "text_bytes")]
    pub expected_output: Vec<u8>,
}

impl TestCase {
    pub fn new(input: impl Into<Vec<u8>>, expected_output: impl Into<Vec<u8>>) -> Self {
        Self {
            input: input.into(),
            expected_output: expected_output.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    pub statement: String,
    pub tests: Vec<TestCase>,
    pub time_limit_ms: u64,
    pub memory_limit_mb: u64,
    pub max_depth: u32,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<(), TreeError> {
        let fail = |reason: &str| {
            Err(TreeError::InvalidProblem {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.tests.is_empty() {
            return fail("no test cases");
        }
        if self.max_depth < 1 {
            return fail("max_depth must be at least 1");
        }
        if self.time_limit_ms == 0 || self.memory_limit_mb == 0 {
            return fail("limits must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Active,
    Terminal,
    Ill,
    Pruned,
    RefinedReplacement,
}

impl NodeStatus {
    /// Statuses that may receive new children.
    pub fn accepts_children(self) -> bool {
        matches!(self, NodeStatus::Active | NodeStatus::RefinedReplacement)
    }

    /// Statuses excluded from selection and trajectory extraction.
    pub fn is_removed(self) -> bool {
        matches!(self, NodeStatus::Ill | NodeStatus::Pruned)
    }
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeStatus::Active => "active",
            NodeStatus::Terminal => "terminal",
            NodeStatus::Ill => "ill",
            NodeStatus::Pruned => "pruned",
            NodeStatus::RefinedReplacement => "refined-replacement",
        };
        f.write_str(s)
    }
}

/// A candidate program produced at a node together with its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub policy_id: String,
    pub program: String,
    pub pass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub status: NodeStatus,
    pub value_q: f64,
    pub visits: u64,
    pub passrate: Option<f64>,
    pub prior: f64,
    pub policy_id: String,
    pub thought: String,
    pub reward: Option<f64>,
    pub refine_count: u32,
    pub depth: u32,
    /// The thought is itself a complete program (semantic terminal).
    pub is_program: bool,
    /// Set on refined replacements: the ill node this one stands in for.
    pub replaces: Option<NodeId>,
    /// Best (earliest, highest pass fraction) solution evaluated at this node.
    pub best_solution: Option<SolutionRecord>,
    #[serde(skip)]
    pub children: Vec<NodeId>,
}

impl SearchNode {
    pub fn is_terminal(&self) -> bool {
        self.status == NodeStatus::Terminal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub problem: ProblemSpec,
    nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn create_root(problem: ProblemSpec) -> Result<Self, TreeError> {
        problem.validate()?;
        let root = SearchNode {
            id: NodeId(0),
            parent: None,
            status: NodeStatus::Active,
            value_q: 0.0,
            visits: 0,
            passrate: None,
            prior: 1.0,
            policy_id: String::new(),
            thought: String::new(),
            reward: None,
            refine_count: 0,
            depth: 0,
            is_program: false,
            replaces: None,
            best_solution: None,
            children: Vec::new(),
        };
        Ok(Self {
            problem,
            nodes: vec![root],
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&SearchNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        Ok(&self.node(id)?.children)
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        thought: impl Into<String>,
        policy_id: impl Into<String>,
        prior: f64,
    ) -> Result<NodeId, TreeError> {
        if !(0.0..=1.0).contains(&prior) {
            return Err(TreeError::InvalidPrior(prior));
        }
        let parent_node = self.node(parent)?;
        if !parent_node.status.accepts_children() {
            return Err(TreeError::Structural {
                node: parent,
                status: parent_node.status,
            });
        }
        let depth = parent_node.depth + 1;
        let id = NodeId(self.nodes.len());
        self.nodes.push(SearchNode {
            id,
            parent: Some(parent),
            status: NodeStatus::Active,
            value_q: 0.0,
            visits: 0,
            passrate: None,
            prior,
            policy_id: policy_id.into(),
            thought: thought.into(),
            reward: None,
            refine_count: 0,
            depth,
            is_program: false,
            replaces: None,
            best_solution: None,
            children: Vec::new(),
        });
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    /// Nodes from the root down to `id`, root first.
    pub fn path_to_root(&self, id: NodeId) -> Result<Vec<&SearchNode>, TreeError> {
        let mut path = Vec::new();
        let mut cursor = Some(id);
        while let Some(current) = cursor {
            let node = self.node(current)?;
            path.push(node);
            cursor = node.parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Thoughts along the path joined by the state separator (root excluded).
    pub fn thought_chain(&self, id: NodeId) -> Result<String, TreeError> {
        let path = self.path_to_root(id)?;
        Ok(path
            .iter()
            .skip(1)
            .map(|n| n.thought.as_str())
            .collect::<Vec<_>>()
            .join(STATE_SEPARATOR))
    }

    /// Full state text S: the statement followed by every thought on the path.
    pub fn state_text(&self, id: NodeId) -> Result<String, TreeError> {
        let chain = self.thought_chain(id)?;
        let mut text = self.problem.statement.clone();
        if !chain.is_empty() {
            text.push_str(STATE_SEPARATOR);
            text.push_str(&chain);
        }
        Ok(text)
    }

    /// Marks `id` and its whole subtree as pruned; returns how many nodes changed.
    pub fn mark_pruned(&mut self, id: NodeId) -> Result<usize, TreeError> {
        self.node(id)?;
        let mut stack = vec![id];
        let mut count = 0;
        while let Some(current) = stack.pop() {
            let node = &mut self.nodes[current.0];
            if node.status != NodeStatus::Pruned {
                node.status = NodeStatus::Pruned;
                count += 1;
            }
            stack.extend(node.children.iter().copied());
        }
        Ok(count)
    }

    /// Marks `id` ill and every descendant pruned; returns how many nodes changed.
    pub fn mark_ill(&mut self, id: NodeId) -> Result<usize, TreeError> {
        let mut count = 0;
        let children = self.node(id)?.children.clone();
        for child in children {
            count += self.mark_pruned(child)?;
        }
        let node = self.node_mut(id)?;
        if node.status != NodeStatus::Ill {
            node.status = NodeStatus::Ill;
            count += 1;
        }
        Ok(count)
    }

    /// Writes one JSON record per node, in id order.
    pub fn write_records<W: Write>(&self, mut out: W) -> Result<(), TreeError> {
        writeln!(out, "{}", serde_json::to_string(&self.problem).map_err(io_err)?)?;
        for node in &self.nodes {
            writeln!(out, "{}", serde_json::to_string(node).map_err(io_err)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_records(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let parse_err = |line: usize, reason: String| TreeError::Parse {
            path: path.display().to_string(),
            line,
            reason,
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing problem header".into()))??;
        let problem: ProblemSpec =
            serde_json::from_str(&header).map_err(|e| parse_err(1, e.to_string()))?;
        let mut nodes: Vec<SearchNode> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let node: SearchNode =
                serde_json::from_str(&line?).map_err(|e| parse_err(line_no, e.to_string()))?;
            if node.id.0 != nodes.len() {
                return Err(parse_err(line_no, format!("node id {} out of order", node.id)));
            }
            match node.parent {
                Some(p) if p.0 >= nodes.len() => {
                    return Err(parse_err(line_no, format!("parent {p} not yet defined")));
                }
                None if !nodes.is_empty() => {
                    return Err(parse_err(line_no, "second root".into()));
                }
                _ => {}
            }
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(parse_err(1, "tree has no root".into()));
        }
        for i in 1..nodes.len() {
            let parent = nodes[i].parent.expect("checked above");
            nodes[parent.0].children.push(NodeId(i));
        }
        Ok(Self { problem, nodes })
    }
}

fn io_err(e: serde_json::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn problem(tests: usize) -> ProblemSpec {
        ProblemSpec {
            id: "p0".into(),
            statement: "Add two numbers.".into(),
            tests: (0..tests)
                .map(|i| TestCase::new(format!("{i} {i}"), format!("{}", 2 * i)))
                .collect(),
            time_limit_ms: 1000,
            memory_limit_mb: 64,
            max_depth: 4,
        }
    }

    #[test]
    fn root_creation() {
        let tree = SearchTree::create_root(problem(2)).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.root(), NodeId(0));
        let root = tree.node(tree.root()).unwrap();
        assert_eq!(root.thought, "");
        assert_eq!(root.visits, 0);
        assert_eq!(root.value_q, 0.0);
        assert_eq!(tree, SearchTree::create_root(problem(2)).unwrap());
    }

    #[test]
    fn empty_tests_rejected() {
        assert!(matches!(
            SearchTree::create_root(problem(0)),
            Err(TreeError::InvalidProblem { .. })
        ));
    }

    #[test]
    fn children_get_sequential_ids() {
        let mut tree = SearchTree::create_root(problem(1)).unwrap();
        let ids: Vec<_> = (0..3)
            .map(|i| tree.add_child(NodeId(0), format!("t{i}"), "a", 0.5).unwrap())
            .collect();
        assert_eq!(ids, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(tree.node(NodeId(1)).unwrap().parent, Some(NodeId(0)));
    }

    #[test]
    fn add_under_pruned_fails() {
        let mut tree = SearchTree::create_root(problem(1)).unwrap();
        let c = tree.add_child(NodeId(0), "t", "a", 0.5).unwrap();
        tree.mark_pruned(c).unwrap();
        assert!(matches!(
            tree.add_child(c, "u", "a", 0.5),
            Err(TreeError::Structural { .. })
        ));
        assert!(matches!(
            tree.add_child(NodeId(0), "u", "a", 1.5),
            Err(TreeError::InvalidPrior(_))
        ));
    }

    #[test]
    fn paths_and_state_text() {
        let mut tree = SearchTree::create_root(problem(1)).unwrap();
        let a = tree.add_child(NodeId(0), "a", "p", 0.5).unwrap();
        let b = tree.add_child(a, "b", "p", 0.5).unwrap();
        let c = tree.add_child(b, "c", "p", 0.5).unwrap();
        assert_eq!(tree.path_to_root(NodeId(0)).unwrap().len(), 1);
        assert_eq!(tree.path_to_root(c).unwrap().len(), 4);
        assert_eq!(tree.thought_chain(c).unwrap(), "a\nb\nc");
        assert_eq!(tree.state_text(c).unwrap(), "Add two numbers.\na\nb\nc");
        assert_eq!(tree.state_text(NodeId(0)).unwrap(), "Add two numbers.");
        assert!(matches!(
            tree.path_to_root(NodeId(9)),
            Err(TreeError::UnknownNode(_))
        ));
    }

    #[test]
    fn pruning_counts_subtree_once() {
        let mut tree = SearchTree::create_root(problem(1)).unwrap();
        let a = tree.add_child(NodeId(0), "a", "p", 0.5).unwrap();
        let leaf = tree.add_child(NodeId(0), "leaf", "p", 0.5).unwrap();
        tree.add_child(a, "x", "p", 0.5).unwrap();
        tree.add_child(a, "y", "p", 0.5).unwrap();
        tree.node_mut(NodeId(0)).unwrap().visits = 7;
        tree.node_mut(NodeId(0)).unwrap().value_q = 0.25;
        assert_eq!(tree.mark_pruned(leaf).unwrap(), 1);
        assert_eq!(tree.mark_pruned(a).unwrap(), 3);
        assert_eq!(tree.mark_pruned(a).unwrap(), 0);
        let root = tree.node(NodeId(0)).unwrap();
        assert_eq!((root.visits, root.value_q), (7, 0.25));
    }

    #[test]
    fn save_load_roundtrip() {
        let mut tree = SearchTree::create_root(problem(2)).unwrap();
        let a = tree.add_child(NodeId(0), "a\tb\n\"q\"", "p", 0.5).unwrap();
        tree.add_child(a, "c", "r", 0.25).unwrap();
        tree.mark_ill(a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.jsonl");
        tree.save(&path).unwrap();
        let back = SearchTree::load(&path).unwrap();
        assert_eq!(back, tree);
        let path2 = dir.path().join("tree2.jsonl");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn random_edits_keep_a_rooted_tree(ops in proptest::collection::vec((any::<bool>(), 0usize..64), 1..60)) {
            let mut tree = SearchTree::create_root(tests::problem(1)).unwrap();
            let mut replay = SearchTree::create_root(tests::problem(1)).unwrap();
            for (prune, pick) in &ops {
                for t in [&mut tree, &mut replay] {
                    let target = NodeId(pick % t.len());
                    if *prune {
                        t.mark_pruned(target).unwrap();
                    } else {
                        let _ = t.add_child(target, format!("t{pick}"), "p", 0.5);
                    }
                }
            }
            for node in tree.nodes() {
                let path = tree.path_to_root(node.id).unwrap();
                prop_assert_eq!(path[0].id, tree.root());
                prop_assert!(path.len() <= tree.len());
                if node.status == NodeStatus::Pruned {
                    for c in &node.children {
                        prop_assert_eq!(tree.node(*c).unwrap().status, NodeStatus::Pruned);
                    }
                }
            }
            let mut a = Vec::new();
            let mut b = Vec::new();
            tree.write_records(&mut a).unwrap();
            replay.write_records(&mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
