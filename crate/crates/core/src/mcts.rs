//! Multi-policy Monte-Carlo tree search over reasoning thoughts.
//!
//! Each rollout selects a leaf with P-UCB, expands it with one thought per
//! proposer policy, simulates every new child by having all solver policies
//! write programs and scoring them, prunes children whose passrate drops
//! below their parent's, optionally refines the pruned ones, and backs the
//! resulting value up to the root.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::evaluator::{mean, EvalError, EvalReport, Evaluator};
use crate::policy::{self, Capability, PolicyAgent, PolicyError, StateContext};
use crate::tree::{NodeId, NodeStatus, ProblemSpec, SearchNode, SearchTree, SolutionRecord, TreeError};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("search exhausted: every path from the root is pruned")]
    Exhausted,
    #[error("no policy proposed a thought at node {0}; marked terminal")]
    ExpansionEmpty(NodeId),
    #[error("invalid search state: {0}")]
    State(String),
    #[error("invalid search configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueAggregator {
    Mean,
    Max,
}

/// Which value P-UCB adds to the exploration term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PuctValueSource {
    /// The child's own running value (standard P-UCB).
    Child,
    /// The parent's value for every sibling, as the formula is literally written.
    ParentLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub c_explore: f64,
    pub gamma: f64,
    pub rollout_budget: u32,
    pub max_depth: u32,
    pub refine_global_budget: u32,
    pub refine_local_budget: u32,
    pub value_aggregator: ValueAggregator,
    pub puct_value_source: PuctValueSource,
    pub prune_enabled: bool,
    pub refine_enabled: bool,
    /// Forwarded to remote policies; scripted search has no random draws.
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            c_explore: 1.0,
            gamma: 0.9,
            rollout_budget: 50,
            max_depth: 8,
            refine_global_budget: 8,
            refine_local_budget: 2,
            value_aggregator: ValueAggregator::Mean,
            puct_value_source: PuctValueSource::Child,
            prune_enabled: true,
            refine_enabled: true,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.c_explore > 0.0 && self.c_explore.is_finite()) {
            return Err(SearchError::Config(format!("c_explore must be positive, got {}", self.c_explore)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SearchError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.max_depth < 1 {
            return Err(SearchError::Config("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Audit record of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub rollout: u32,
    /// Node the rollout's value was backed up from.
    pub terminal_node: NodeId,
    pub reward: f64,
    pub solutions: Vec<SolutionRecord>,
    pub pruned_this_rollout: Vec<NodeId>,
    pub refined_this_rollout: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Nodes created by expansion (refined replacements excluded).
    pub expanded_nodes: usize,
    pub backups: u64,
    pub prunes: u32,
    pub refine_calls: u32,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<SolutionRecord>,
    pub tree: SearchTree,
    pub rollouts: Vec<RolloutResult>,
    /// The search stopped early because every path was pruned.
    pub exhausted: bool,
    pub stats: SearchStats,
}

impl SearchOutcome {
    pub fn solved(&self) -> bool {
        self.best.as_ref().is_some_and(|b| b.pass_fraction >= 1.0)
    }

    pub fn write_audit<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rollouts {
            writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pure operations
// ---------------------------------------------------------------------------

/// P-UCB: `V + c · P(a|S) · sqrt(ln N(S)) / (1 + N(S_c))`.
///
/// Unvisited children use their prior as `V` under the child value source.
pub fn puct_score(child: &SearchNode, parent: &SearchNode, cfg: &SearchConfig) -> f64 {
    let value = match cfg.puct_value_source {
        PuctValueSource::Child if child.visits == 0 => child.prior,
        PuctValueSource::Child => child.value_q,
        PuctValueSource::ParentLiteral => parent.value_q,
    };
    let parent_visits = parent.visits.max(1) as f64;
    value + cfg.c_explore * child.prior * parent_visits.ln().sqrt() / (1.0 + child.visits as f64)
}

/// A non-terminal node whose expanded children are all removed or exhausted.
fn is_exhausted(tree: &SearchTree, id: NodeId) -> bool {
    let node = &tree.nodes()[id.0];
    if node.status.is_removed() {
        return true;
    }
    if node.is_terminal() || node.children.is_empty() {
        return false;
    }
    node.children.iter().all(|c| is_exhausted(tree, *c))
}

/// Descends from the root by argmax P-UCB over live children (ties go to the
/// smaller node id) until reaching a terminal or an unexpanded node.
pub fn select(tree: &SearchTree, cfg: &SearchConfig) -> Result<NodeId, SearchError> {
    let mut current = tree.root();
    if is_exhausted(tree, current) {
        return Err(SearchError::Exhausted);
    }
    loop {
        let node = tree.node(current)?;
        if node.is_terminal() || node.children.is_empty() {
            return Ok(current);
        }
        let mut best: Option<(NodeId, f64)> = None;
        for &child_id in &node.children {
            if is_exhausted(tree, child_id) {
                continue;
            }
            let score = puct_score(tree.node(child_id)?, node, cfg);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((child_id, score));
            }
        }
        match best {
            Some((id, _)) => current = id,
            None => return Err(SearchError::Exhausted),
        }
    }
}

/// `Q(S) = r_T` at terminals, `γ · PR(S)` elsewhere.
pub fn node_value(node: &SearchNode, cfg: &SearchConfig) -> Result<f64, SearchError> {
    if node.is_terminal() {
        node.reward
            .ok_or_else(|| SearchError::State(format!("terminal node {} has no reward", node.id)))
    } else {
        node.passrate
            .map(|pr| cfg.gamma * pr)
            .ok_or_else(|| SearchError::State(format!("node {} has not been simulated", node.id)))
    }
}

/// Adds one visit to `from` and every ancestor and folds `value` into their
/// running values with the configured aggregator.
pub fn backup(tree: &mut SearchTree, from: NodeId, value: f64, cfg: &SearchConfig) -> Result<(), SearchError> {
    let mut cursor = Some(from);
    while let Some(id) = cursor {
        let node = tree.node_mut(id)?;
        node.visits += 1;
        node.value_q = match cfg.value_aggregator {
            ValueAggregator::Mean => node.value_q + (value - node.value_q) / node.visits as f64,
            ValueAggregator::Max => node.value_q.max(value),
        };
        cursor = node.parent;
    }
    Ok(())
}

/// A child is ill when its passrate falls below its parent's.
pub fn check_ill(parent: &SearchNode, child: &SearchNode) -> Result<bool, SearchError> {
    match (parent.passrate, child.passrate) {
        (Some(p), Some(c)) => Ok(c < p),
        _ => Err(SearchError::State(format!(
            "passrate missing on node {} or {}",
            parent.id, child.id
        ))),
    }
}

/// Marks `ill` as ill (its subtree pruned) and backs a zero reward up from its
/// parent. Returns false, doing nothing, if the node was already removed.
pub fn prune(tree: &mut SearchTree, ill: NodeId, cfg: &SearchConfig) -> Result<bool, SearchError> {
    let node = tree.node(ill)?;
    if node.status.is_removed() {
        return Ok(false);
    }
    let parent = node
        .parent
        .ok_or_else(|| SearchError::State("the root cannot be pruned".into()))?;
    tree.mark_ill(ill)?;
    backup(tree, parent, 0.0, cfg)?;
    Ok(true)
}

/// Surviving parent-child pairs whose passrates decrease.
pub fn monotonicity_violations(tree: &SearchTree) -> Vec<(NodeId, NodeId)> {
    let nodes = tree.nodes();
    nodes
        .iter()
        .filter(|n| !n.status.is_removed())
        .filter_map(|child| {
            let parent = &nodes[child.parent?.0];
            match (parent.passrate, child.passrate) {
                (Some(p), Some(c)) if !parent.status.is_removed() && c < p => Some((parent.id, child.id)),
                _ => None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

pub struct SearchEngine<'a> {
    tree: SearchTree,
    agents: &'a [Arc<dyn PolicyAgent>],
    evaluator: &'a Evaluator,
    cfg: SearchConfig,
    max_depth: u32,
    stats: SearchStats,
    best: Option<SolutionRecord>,
    /// Per-node evaluation reports, input for failure summaries.
    reports: HashMap<NodeId, Vec<EvalReport>>,
    rollout_solutions: Vec<SolutionRecord>,
}

impl<'a> SearchEngine<'a> {
    pub fn new(
        problem: ProblemSpec,
        agents: &'a [Arc<dyn PolicyAgent>],
        evaluator: &'a Evaluator,
        cfg: SearchConfig,
    ) -> Result<Self, SearchError> {
        cfg.validate()?;
        let has = |c: Capability| agents.iter().any(|a| a.capabilities().has(c));
        if !has(Capability::Proposer) || !has(Capability::Solver) {
            return Err(SearchError::Config(
                "need at least one proposer and one solver policy".into(),
            ));
        }
        let mut ids: Vec<&str> = agents.iter().map(|a| a.policy_id()).collect();
        ids.sort_unstable();
        let distinct = ids.len();
        ids.dedup();
        if ids.len() != distinct {
            return Err(SearchError::Config("policy ids must be unique".into()));
        }
        if cfg.refine_enabled && ids.len() < 2 {
            return Err(SearchError::Config(
                "refinement needs at least two distinct policies".into(),
            ));
        }
        if let Some(a) = agents.iter().find(|a| a.capabilities().is_empty()) {
            return Err(SearchError::Config(format!("policy {} declares no capability", a.policy_id())));
        }
        let max_depth = cfg.max_depth.min(problem.max_depth);
        Ok(Self {
            tree: SearchTree::create_root(problem)?,
            agents,
            evaluator,
            cfg,
            max_depth,
            stats: SearchStats::default(),
            best: None,
            reports: HashMap::new(),
            rollout_solutions: Vec::new(),
        })
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn stats(&self) -> &SearchStats {
        &self.stats
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    fn backup(&mut self, from: NodeId, value: f64) -> Result<(), SearchError> {
        backup(&mut self.tree, from, value, &self.cfg)?;
        self.stats.backups += 1;
        Ok(())
    }

    fn prune(&mut self, ill: NodeId) -> Result<bool, SearchError> {
        let done = prune(&mut self.tree, ill, &self.cfg)?;
        if done {
            self.stats.backups += 1;
            self.stats.prunes += 1;
        }
        Ok(done)
    }

    /// Creates a child and classifies it as a semantic or depth terminal.
    fn attach(
        &mut self,
        parent: NodeId,
        proposal: &policy::ThoughtProposal,
        policy_id: &str,
    ) -> Result<NodeId, SearchError> {
        let id = self.tree.add_child(parent, proposal.text.clone(), policy_id, proposal.prior)?;
        let max_depth = self.max_depth;
        let node = self.tree.node_mut(id)?;
        if proposal.is_terminal_marker {
            node.status = NodeStatus::Terminal;
            node.is_program = true;
        } else if node.depth >= max_depth {
            node.status = NodeStatus::Terminal;
        }
        Ok(id)
    }

    fn mark_rule_terminal(&mut self, id: NodeId) -> Result<(), SearchError> {
        let node = self.tree.node_mut(id)?;
        node.status = NodeStatus::Terminal;
        if node.reward.is_none() {
            node.reward = node.passrate;
        }
        Ok(())
    }

    /// One child per proposer policy, in policy order.
    pub fn expand(&mut self, leaf: NodeId) -> Result<Vec<NodeId>, SearchError> {
        let node = self.tree.node(leaf)?;
        if node.is_terminal() || !node.status.accepts_children() {
            return Err(SearchError::State(format!(
                "cannot expand node {leaf} with status {}",
                node.status
            )));
        }
        if node.depth >= self.max_depth {
            self.mark_rule_terminal(leaf)?;
            return Ok(Vec::new());
        }
        let state = self.tree.state_text(leaf)?;
        let ctx = StateContext {
            statement: &self.tree.problem.statement,
            state: &state,
        };
        let mut proposals = Vec::new();
        for agent in self.agents {
            if agent.capabilities().has(Capability::Proposer) {
                if let Some(p) = policy::propose_thoughts(agent.as_ref(), &ctx, 1)?.into_iter().next() {
                    proposals.push((agent.policy_id().to_string(), p));
                }
            }
        }
        if proposals.is_empty() {
            self.mark_rule_terminal(leaf)?;
            return Err(SearchError::ExpansionEmpty(leaf));
        }
        let mut children = Vec::with_capacity(proposals.len());
        for (policy_id, p) in &proposals {
            children.push(self.attach(leaf, p, policy_id)?);
        }
        self.stats.expanded_nodes += children.len();
        Ok(children)
    }

    fn record_solution(&mut self, record: SolutionRecord) {
        if self
            .best
            .as_ref()
            .is_none_or(|b| record.pass_fraction > b.pass_fraction)
        {
            self.best = Some(record.clone());
        }
        self.rollout_solutions.push(record);
    }

    /// Computes and freezes PR(S) for `id`. Semantic terminals are scored as
    /// their own program; every other node gets one program per solver.
    pub fn simulate(&mut self, id: NodeId) -> Result<f64, SearchError> {
        let node = self.tree.node(id)?;
        if node.status.is_removed() {
            return Err(SearchError::State(format!("cannot simulate removed node {id}")));
        }
        if let Some(pr) = node.passrate {
            return Ok(pr);
        }
        let problem = &self.tree.problem;
        let mut scored: Vec<(SolutionRecord, EvalReport)> = Vec::new();
        if node.is_program {
            let (score, report) = self.evaluator.passed(&node.thought, problem)?;
            scored.push((
                SolutionRecord {
                    policy_id: node.policy_id.clone(),
                    program: node.thought.clone(),
                    pass_fraction: score,
                },
                report,
            ));
        } else {
            let state = self.tree.state_text(id)?;
            let ctx = StateContext {
                statement: &problem.statement,
                state: &state,
            };
            let evaluator = self.evaluator;
            let solvers: Vec<&Arc<dyn PolicyAgent>> = self
                .agents
                .iter()
                .filter(|a| a.capabilities().has(Capability::Solver))
                .collect();
            let results: Vec<Result<(SolutionRecord, EvalReport), SearchError>> = std::thread::scope(|s| {
                let handles: Vec<_> = solvers
                    .iter()
                    .map(|agent| {
                        let ctx = &ctx;
                        s.spawn(move || {
                            let program = policy::generate_solution(agent.as_ref(), ctx)?;
                            let (score, report) = evaluator.passed(&program, problem)?;
                            Ok((
                                SolutionRecord {
                                    policy_id: agent.policy_id().to_string(),
                                    program,
                                    pass_fraction: score,
                                },
                                report,
                            ))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("solver thread panicked"))
                    .collect()
            });
            for r in results {
                scored.push(r?);
            }
            scored.sort_by(|a, b| a.0.policy_id.cmp(&b.0.policy_id));
        }
        let passrate = mean(scored.iter().map(|(s, _)| s.pass_fraction));
        let mut best_here: Option<SolutionRecord> = None;
        let mut reports = Vec::with_capacity(scored.len());
        for (record, report) in scored {
            if best_here
                .as_ref()
                .is_none_or(|b| record.pass_fraction > b.pass_fraction)
            {
                best_here = Some(record.clone());
            }
            reports.push(report);
            self.record_solution(record);
        }
        let node = self.tree.node_mut(id)?;
        node.passrate = Some(passrate);
        node.best_solution = best_here;
        if node.is_terminal() {
            node.reward = Some(passrate);
        }
        self.reports.insert(id, reports);
        Ok(passrate)
    }

    /// Summarize-then-refine for an ill node. Returns the replacement node,
    /// or `None` when refinement is disabled, out of budget or has no
    /// eligible summarizer/refiner.
    pub fn refine(&mut self, ill: NodeId) -> Result<Option<NodeId>, SearchError> {
        if !self.cfg.refine_enabled || self.stats.refine_calls >= self.cfg.refine_global_budget {
            return Ok(None);
        }
        let ill_node = self.tree.node(ill)?.clone();
        if ill_node.refine_count >= self.cfg.refine_local_budget {
            return Ok(None);
        }
        let parent = ill_node
            .parent
            .ok_or_else(|| SearchError::State("the root cannot be refined".into()))?;
        let proposer = ill_node.policy_id.as_str();
        let summarizer = self
            .agents
            .iter()
            .find(|a| a.capabilities().has(Capability::Summarizer) && a.policy_id() != proposer);
        let refiner = self
            .agents
            .iter()
            .find(|a| a.capabilities().has(Capability::Refiner) && a.policy_id() == proposer);
        let (Some(summarizer), Some(refiner)) = (summarizer, refiner) else {
            return Ok(None);
        };
        self.stats.refine_calls += 1;

        let ill_q = ill_node
            .passrate
            .map_or(0.0, |pr| if ill_node.is_terminal() { pr } else { self.cfg.gamma * pr });
        let block_analysis = self
            .reports
            .get(&ill)
            .and_then(|rs| {
                rs.iter().fold(None::<&EvalReport>, |best, r| match best {
                    Some(b) if b.pass_fraction >= r.pass_fraction => Some(b),
                    _ => Some(r),
                })
            })
            .cloned()
            .unwrap_or_default();
        let statement = self.tree.problem.statement.clone();
        let ill_state = self.tree.state_text(ill)?;
        let summary = policy::summarize_failure(
            summarizer.as_ref(),
            proposer,
            &StateContext {
                statement: &statement,
                state: &ill_state,
            },
            ill_q,
            &block_analysis,
        )?;
        let parent_state = self.tree.state_text(parent)?;
        let proposal = policy::refine_thought(
            refiner.as_ref(),
            proposer,
            &StateContext {
                statement: &statement,
                state: &parent_state,
            },
            ill_q,
            &summary,
        )?;

        let replacement = self.attach(parent, &proposal, proposer)?;
        {
            let node = self.tree.node_mut(replacement)?;
            if node.status == NodeStatus::Active {
                node.status = NodeStatus::RefinedReplacement;
            }
            node.replaces = Some(ill);
            node.refine_count = ill_node.refine_count + 1;
        }
        self.simulate(replacement)?;
        let still_ill = check_ill(self.tree.node(parent)?, self.tree.node(replacement)?)?;
        if !still_ill {
            let value = node_value(self.tree.node(replacement)?, &self.cfg)?;
            self.backup(replacement, value)?;
        }
        Ok(Some(replacement))
    }

    /// Prune/refine pass over freshly simulated nodes. Replacements that turn
    /// out ill themselves go through the same pass.
    fn screen(
        &mut self,
        parent: NodeId,
        fresh: &[NodeId],
        pruned: &mut Vec<NodeId>,
        refined: &mut Vec<(NodeId, NodeId)>,
    ) -> Result<(), SearchError> {
        if !self.cfg.prune_enabled {
            return Ok(());
        }
        let mut queue: std::collections::VecDeque<NodeId> = fresh.iter().copied().collect();
        while let Some(id) = queue.pop_front() {
            if !check_ill(self.tree.node(parent)?, self.tree.node(id)?)? {
                continue;
            }
            if self.prune(id)? {
                pruned.push(id);
            }
            if let Some(replacement) = self.refine(id)? {
                refined.push((id, replacement));
                queue.push_back(replacement);
            }
        }
        Ok(())
    }

    pub fn rollout(&mut self, index: u32) -> Result<RolloutResult, SearchError> {
        self.rollout_solutions.clear();
        let leaf = select(&self.tree, &self.cfg)?;
        if self.tree.node(leaf)?.passrate.is_none() {
            self.simulate(leaf)?;
        }
        let mut pruned = Vec::new();
        let mut refined = Vec::new();

        let (from, reward) = if self.tree.node(leaf)?.is_terminal() {
            let v = node_value(self.tree.node(leaf)?, &self.cfg)?;
            self.backup(leaf, v)?;
            (leaf, v)
        } else {
            match self.expand(leaf) {
                Err(SearchError::ExpansionEmpty(_)) => {
                    let v = node_value(self.tree.node(leaf)?, &self.cfg)?;
                    self.backup(leaf, v)?;
                    (leaf, v)
                }
                Err(e) => return Err(e),
                Ok(children) if children.is_empty() => {
                    let v = node_value(self.tree.node(leaf)?, &self.cfg)?;
                    self.backup(leaf, v)?;
                    (leaf, v)
                }
                Ok(children) => {
                    for &c in &children {
                        self.simulate(c)?;
                    }
                    self.screen(leaf, &children, &mut pruned, &mut refined)?;
                    let mut best: Option<(NodeId, f64)> = None;
                    for &c in &children {
                        let node = self.tree.node(c)?;
                        if node.status.is_removed() {
                            continue;
                        }
                        let v = node_value(node, &self.cfg)?;
                        if best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((c, v));
                        }
                    }
                    match best {
                        Some((c, v)) => {
                            self.backup(c, v)?;
                            (c, v)
                        }
                        // Every child was pruned; the prune backups already
                        // carried the zero rewards.
                        None => (leaf, 0.0),
                    }
                }
            }
        };
        Ok(RolloutResult {
            rollout: index,
            terminal_node: from,
            reward,
            solutions: std::mem::take(&mut self.rollout_solutions),
            pruned_this_rollout: pruned,
            refined_this_rollout: refined,
        })
    }

    pub fn run(mut self) -> Result<SearchOutcome, SearchError> {
        let mut rollouts = Vec::new();
        let mut exhausted = false;
        for i in 0..self.cfg.rollout_budget {
            match self.rollout(i) {
                Ok(r) => rollouts.push(r),
                Err(SearchError::Exhausted) => {
                    exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(SearchOutcome {
            best: self.best,
            tree: self.tree,
            rollouts,
            exhausted,
            stats: self.stats,
        })
    }
}

/// Runs `cfg.rollout_budget` rollouts and returns the best solution seen
/// anywhere in the tree (ties go to the earliest).
pub fn run_search(
    problem: ProblemSpec,
    agents: &[Arc<dyn PolicyAgent>],
    evaluator: &Evaluator,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    SearchEngine::new(problem, agents, evaluator, cfg.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::MockExecutor;
    use crate::policy::{Capabilities, ScriptBook, ScriptedPolicy, ThoughtProposal};
    use crate::tree::TestCase;

    fn cfg() -> SearchConfig {
        SearchConfig::default()
    }

    fn node(id: usize, prior: f64, visits: u64, q: f64) -> SearchNode {
        let mut tree = SearchTree::create_root(problem(2)).unwrap();
        let mut n = tree.node_mut(NodeId(0)).unwrap().clone();
        n.id = NodeId(id);
        n.prior = prior;
        n.visits = visits;
        n.value_q = q;
        n
    }

    fn problem(max_depth: u32) -> ProblemSpec {
        ProblemSpec {
            id: "p".into(),
            statement: "S".into(),
            tests: vec![TestCase::new("1 2", "3"), TestCase::new("2 3", "5")],
            time_limit_ms: 100,
            memory_limit_mb: 64,
            max_depth,
        }
    }

    #[test]
    fn puct_formula_cases() {
        let parent = node(0, 1.0, 16, 0.1);
        let child = node(1, 0.25, 3, 0.5);
        let expected = 0.5 + 0.25 * (16f64).ln().sqrt() / 4.0;
        assert!((puct_score(&child, &parent, &cfg()) - expected).abs() < 1e-15);
        // Frozen from a 40-digit evaluation of the formula.
        assert!((expected - 0.604_069_326_394_712_2).abs() < 1e-15);
        let zero_prior = node(1, 0.0, 3, 0.5);
        assert_eq!(puct_score(&zero_prior, &parent, &cfg()), 0.5);
        let single_visit = node(0, 1.0, 1, 0.0);
        assert_eq!(puct_score(&child, &single_visit, &cfg()), 0.5);
        let literal = SearchConfig {
            puct_value_source: PuctValueSource::ParentLiteral,
            ..cfg()
        };
        assert_eq!(puct_score(&zero_prior, &parent, &literal), 0.1);
    }

    fn tree_with_children(specs: &[(f64, u64, f64)]) -> SearchTree {
        let mut tree = SearchTree::create_root(problem(4)).unwrap();
        tree.node_mut(NodeId(0)).unwrap().visits = 6;
        for (i, (prior, visits, q)) in specs.iter().enumerate() {
            let id = tree.add_child(NodeId(0), format!("c{i}"), "a", *prior).unwrap();
            let n = tree.node_mut(id).unwrap();
            n.visits = *visits;
            n.value_q = *q;
        }
        tree
    }

    #[test]
    fn select_prefers_less_visited_on_equal_value() {
        let tree = tree_with_children(&[(0.5, 5, 0.4), (0.5, 1, 0.4)]);
        assert_eq!(select(&tree, &cfg()).unwrap(), NodeId(2));
    }

    #[test]
    fn select_skips_pruned_and_breaks_ties_by_id() {
        let mut tree = tree_with_children(&[(0.9, 1, 0.9), (0.1, 1, 0.1)]);
        tree.mark_pruned(NodeId(1)).unwrap();
        assert_eq!(select(&tree, &cfg()).unwrap(), NodeId(2));
        let tree = tree_with_children(&[(0.5, 2, 0.3), (0.5, 2, 0.3)]);
        assert_eq!(select(&tree, &cfg()).unwrap(), NodeId(1));
        let mut tree = tree_with_children(&[(0.5, 2, 0.3)]);
        tree.mark_ill(NodeId(1)).unwrap();
        assert!(matches!(select(&tree, &cfg()), Err(SearchError::Exhausted)));
    }

    #[test]
    fn node_values() {
        let mut n = node(1, 0.5, 0, 0.0);
        n.status = NodeStatus::Terminal;
        n.reward = Some(1.0);
        assert_eq!(node_value(&n, &cfg()).unwrap(), 1.0);
        let mut m = node(2, 0.5, 0, 0.0);
        m.passrate = Some(0.5);
        assert!((node_value(&m, &cfg()).unwrap() - 0.45).abs() < 1e-15);
        m.passrate = Some(0.0);
        assert_eq!(node_value(&m, &cfg()).unwrap(), 0.0);
        m.passrate = None;
        assert!(matches!(node_value(&m, &cfg()), Err(SearchError::State(_))));
    }

    fn chain() -> SearchTree {
        let mut tree = SearchTree::create_root(problem(4)).unwrap();
        let a = tree.add_child(NodeId(0), "a", "p", 0.5).unwrap();
        tree.add_child(a, "b", "p", 0.5).unwrap();
        tree
    }

    #[test]
    fn backup_mean_and_max() {
        let mut tree = chain();
        backup(&mut tree, NodeId(2), 1.0, &cfg()).unwrap();
        for n in tree.nodes() {
            assert_eq!((n.visits, n.value_q), (1, 1.0));
        }
        backup(&mut tree, NodeId(2), 0.0, &cfg()).unwrap();
        for n in tree.nodes() {
            assert_eq!((n.visits, n.value_q), (2, 0.5));
        }
        let max = SearchConfig {
            value_aggregator: ValueAggregator::Max,
            ..cfg()
        };
        let mut tree = chain();
        backup(&mut tree, NodeId(2), 0.3, &max).unwrap();
        backup(&mut tree, NodeId(2), 0.7, &max).unwrap();
        assert_eq!(tree.node(NodeId(0)).unwrap().value_q, 0.7);
    }

    #[test]
    fn ill_checks() {
        let mut p = node(0, 1.0, 0, 0.0);
        let mut c = node(1, 1.0, 0, 0.0);
        for (pp, cp, ill) in [(0.6, 0.4, true), (0.5, 0.5, false), (0.2, 0.9, false)] {
            p.passrate = Some(pp);
            c.passrate = Some(cp);
            assert_eq!(check_ill(&p, &c).unwrap(), ill);
        }
        c.passrate = None;
        assert!(check_ill(&p, &c).is_err());
    }

    #[test]
    fn prune_backs_up_zero_once() {
        let mut tree = SearchTree::create_root(problem(4)).unwrap();
        let c = tree.add_child(NodeId(0), "bad", "p", 0.5).unwrap();
        backup(&mut tree, NodeId(0), 0.8, &cfg()).unwrap();
        assert!(prune(&mut tree, c, &cfg()).unwrap());
        let root = tree.node(NodeId(0)).unwrap();
        assert_eq!(root.visits, 2);
        assert!((root.value_q - 0.4).abs() < 1e-15);
        assert_eq!(tree.node(c).unwrap().status, NodeStatus::Ill);
        assert!(!prune(&mut tree, c, &cfg()).unwrap());
        assert_eq!(tree.node(NodeId(0)).unwrap().visits, 2);
    }

    /// Depth-2 fixture: policy `a` proposes the right plan, `b` a wrong one.
    fn fixture() -> (Vec<Arc<dyn PolicyAgent>>, ProblemSpec) {
        let p = problem(2);
        let good = "S\nplan: add";
        let bad = "S\nplan: multiply";
        let mut a = ScriptBook::new("a", Capabilities::all());
        let mut b = ScriptBook::new("b", Capabilities::all());
        a.proposals.insert("S".into(), vec![ThoughtProposal::new("plan: add", 0.5)]);
        b.proposals.insert("S".into(), vec![ThoughtProposal::new("plan: multiply", 0.5)]);
        a.solutions.insert("S".into(), "case 1 2 => 3".into());
        b.solutions.insert("S".into(), "case 1 2 => 3".into());
        let fixed = "S\nplan: add the two numbers";
        for (state, prog) in [(good, "sum"), (bad, "product"), (fixed, "sum")] {
            a.proposals.insert(state.into(), vec![ThoughtProposal::new("detail: loop", 0.5)]);
            b.proposals.insert(state.into(), vec![ThoughtProposal::new("detail: fold", 0.5)]);
            a.solutions.insert(state.into(), prog.into());
            b.solutions.insert(state.into(), prog.into());
            for leaf in ["detail: loop", "detail: fold"] {
                let s = format!("{state}\n{leaf}");
                a.solutions.insert(s.clone(), prog.into());
                b.solutions.insert(s, prog.into());
            }
        }
        a.summaries.insert(bad.into(), "multiplying is wrong, the task adds".into());
        b.summaries.insert(bad.into(), "multiplying is wrong, the task adds".into());
        b.refinements.insert(
            "multiplying is wrong, the task adds".into(),
            ThoughtProposal::new("plan: add the two numbers", 0.5),
        );
        let agents: Vec<Arc<dyn PolicyAgent>> = vec![
            Arc::new(ScriptedPolicy::from_book(a).unwrap()),
            Arc::new(ScriptedPolicy::from_book(b).unwrap()),
        ];
        (agents, p)
    }

    fn evaluator() -> Evaluator {
        Evaluator::new(Arc::new(MockExecutor::new()))
    }

    #[test]
    fn expand_one_child_per_proposer() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let mut engine = SearchEngine::new(p, &agents, &ev, cfg()).unwrap();
        let kids = engine.expand(NodeId(0)).unwrap();
        assert_eq!(kids, vec![NodeId(1), NodeId(2)]);
        let ids: Vec<_> = kids
            .iter()
            .map(|k| engine.tree().node(*k).unwrap().policy_id.clone())
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn expand_at_depth_limit_marks_terminal() {
        let (agents, mut p) = fixture();
        p.max_depth = 1;
        let ev = evaluator();
        let mut engine = SearchEngine::new(p, &agents, &ev, cfg()).unwrap();
        let kids = engine.expand(NodeId(0)).unwrap();
        assert!(kids.iter().all(|k| engine.tree().node(*k).unwrap().is_terminal()));
        let n = engine.tree.node_mut(kids[0]).unwrap();
        n.status = NodeStatus::Active;
        assert!(engine.expand(kids[0]).unwrap().is_empty());
        assert!(engine.tree().node(kids[0]).unwrap().is_terminal());
    }

    #[test]
    fn simulate_means_and_freezes() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let mut engine = SearchEngine::new(p, &agents, &ev, cfg()).unwrap();
        assert_eq!(engine.simulate(NodeId(0)).unwrap(), 0.5);
        let kids = engine.expand(NodeId(0)).unwrap();
        assert_eq!(engine.simulate(kids[0]).unwrap(), 1.0);
        assert_eq!(engine.simulate(kids[1]).unwrap(), 0.0);
        // Frozen: a second call does not touch the agents.
        let solutions_before = engine.rollout_solutions.len();
        assert_eq!(engine.simulate(kids[0]).unwrap(), 1.0);
        assert_eq!(engine.rollout_solutions.len(), solutions_before);
    }

    #[test]
    fn simulate_semantic_terminal_scores_itself() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let mut engine = SearchEngine::new(p, &agents, &ev, cfg()).unwrap();
        let id = engine
            .attach(NodeId(0), &ThoughtProposal::terminal("case 1 2 => 3", 0.5), "a")
            .unwrap();
        assert_eq!(engine.simulate(id).unwrap(), 0.5);
        let node = engine.tree().node(id).unwrap();
        assert_eq!(node.reward, Some(0.5));
        assert_eq!(node_value(node, &cfg()).unwrap(), 0.5);
    }

    #[test]
    fn refine_replaces_ill_node() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let out = run_search(p, &agents, &ev, &cfg()).unwrap();
        let ill = out.tree.nodes().iter().find(|n| n.status == NodeStatus::Ill).unwrap();
        assert_eq!(ill.thought, "plan: multiply");
        let repl = out
            .tree
            .nodes()
            .iter()
            .find(|n| n.replaces == Some(ill.id))
            .unwrap();
        assert_eq!(repl.passrate, Some(1.0));
        assert_eq!(repl.status, NodeStatus::RefinedReplacement);
        assert!(repl.visits >= 1);
        assert_eq!(out.stats.refine_calls, 1);
        assert!(out.solved());
    }

    #[test]
    fn refine_budgets_gate() {
        let (agents, p) = fixture();
        let ev = evaluator();
        for c in [
            SearchConfig { refine_local_budget: 0, ..cfg() },
            SearchConfig { refine_global_budget: 0, ..cfg() },
            SearchConfig { refine_enabled: false, ..cfg() },
        ] {
            let out = run_search(p.clone(), &agents, &ev, &c).unwrap();
            assert_eq!(out.stats.refine_calls, 0);
            assert!(out.tree.nodes().iter().all(|n| n.replaces.is_none()));
        }
    }

    #[test]
    fn prune_disabled_never_prunes() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let c = SearchConfig { prune_enabled: false, ..cfg() };
        let out = run_search(p, &agents, &ev, &c).unwrap();
        assert!(out.rollouts.iter().all(|r| r.pruned_this_rollout.is_empty()));
        assert!(out.tree.nodes().iter().all(|n| !n.status.is_removed()));
    }

    #[test]
    fn zero_budget_returns_nothing() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let c = SearchConfig { rollout_budget: 0, ..cfg() };
        let out = run_search(p, &agents, &ev, &c).unwrap();
        assert!(out.best.is_none());
        assert!(out.rollouts.is_empty());
        assert_eq!(out.tree.len(), 1);
    }

    #[test]
    fn root_visits_count_every_backup() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let out = run_search(p, &agents, &ev, &cfg()).unwrap();
        assert_eq!(out.tree.node(NodeId(0)).unwrap().visits, out.stats.backups);
        assert!(monotonicity_violations(&out.tree).is_empty());
        for n in out.tree.nodes() {
            assert!((0.0..=1.0).contains(&n.value_q));
        }
    }

    #[test]
    fn config_checks() {
        let (agents, p) = fixture();
        let ev = evaluator();
        let bad_gamma = SearchConfig { gamma: 0.0, ..cfg() };
        assert!(matches!(
            run_search(p.clone(), &agents, &ev, &bad_gamma),
            Err(SearchError::Config(_))
        ));
        assert!(matches!(
            run_search(p.clone(), &agents[..1], &ev, &cfg()),
            Err(SearchError::Config(_))
        ));
        let no_refine = SearchConfig { refine_enabled: false, ..cfg() };
        assert!(run_search(p, &agents[..1], &ev, &no_refine).is_ok());
    }

    #[test]
    fn script_gap_surfaces_as_policy_error() {
        let (_, p) = fixture();
        let book = ScriptBook::new("a", Capabilities::all());
        let agents: Vec<Arc<dyn PolicyAgent>> = vec![Arc::new(ScriptedPolicy::from_book(book).unwrap())];
        let ev = evaluator();
        let c = SearchConfig { refine_enabled: false, ..cfg() };
        assert!(matches!(
            run_search(p, &agents, &ev, &c),
            Err(SearchError::Policy(PolicyError::ScriptGap { .. }))
        ));
    }
}
