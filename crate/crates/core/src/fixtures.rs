//! Deterministic scripted corpora for the mock executor.
//!
//! A [`World`] says what each policy does on any state. [`compile_books`]
//! walks every state the search can reach (proposals up to the depth limit,
//! plus refinement replacements up to a chain length) and records the
//! answers as script books, so scripted runs never hit a gap.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::policy::{Capabilities, PolicyAgent, PolicyError, ScriptBook, ScriptedPolicy, ThoughtProposal};
use crate::tree::{ProblemSpec, TestCase, STATE_SEPARATOR};

pub trait World {
    fn policies(&self) -> Vec<String>;
    fn propose(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<ThoughtProposal>;
    fn solve(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> String;
    /// `None` when the state is never expected to be ill.
    fn summarize(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<String>;
    fn refine(&self, policy: usize, problem: &ProblemSpec, summary: &str) -> Option<ThoughtProposal>;
}

fn state_text(problem: &ProblemSpec, thoughts: &[String]) -> String {
    let mut s = problem.statement.clone();
    for t in thoughts {
        s.push_str(STATE_SEPARATOR);
        s.push_str(t);
    }
    s
}

struct Compiler<'a> {
    world: &'a dyn World,
    books: Vec<ScriptBook>,
    max_chain: u32,
    seen: HashSet<(String, usize, u32)>,
}

impl Compiler<'_> {
    fn explore(&mut self, problem: &ProblemSpec, thoughts: &[String]) {
        let state = state_text(problem, thoughts);
        for p in 0..self.books.len() {
            let program = self.world.solve(p, problem, thoughts);
            self.books[p].solutions.insert(state.clone(), program);
        }
        if thoughts.len() as u32 >= problem.max_depth {
            return;
        }
        for p in 0..self.books.len() {
            let Some(proposal) = self.world.propose(p, problem, thoughts) else {
                continue;
            };
            self.books[p].proposals.insert(state.clone(), vec![proposal.clone()]);
            let mut child = thoughts.to_vec();
            child.push(proposal.text);
            self.visit(problem, child, p, 0, proposal.is_terminal_marker);
        }
    }

    fn visit(&mut self, problem: &ProblemSpec, thoughts: Vec<String>, proposer: usize, chain: u32, is_program: bool) {
        let state = state_text(problem, &thoughts);
        if !self.seen.insert((state.clone(), proposer, chain)) {
            return;
        }
        if !is_program {
            self.explore(problem, &thoughts);
        }
        if chain >= self.max_chain {
            return;
        }
        for q in (0..self.books.len()).filter(|&q| q != proposer) {
            let Some(summary) = self.world.summarize(q, problem, &thoughts) else {
                continue;
            };
            self.books[q].summaries.insert(state.clone(), summary.clone());
            let Some(r) = self.world.refine(proposer, problem, &summary) else {
                continue;
            };
            self.books[proposer].refinements.insert(summary, r.clone());
            let mut replacement = thoughts[..thoughts.len() - 1].to_vec();
            replacement.push(r.text);
            self.visit(problem, replacement, proposer, chain + 1, r.is_terminal_marker);
        }
    }
}

/// Script books (one per world policy, all capabilities) covering every
/// reachable state of every problem.
pub fn compile_books(world: &dyn World, problems: &[ProblemSpec], max_refine_chain: u32) -> Vec<ScriptBook> {
    let mut c = Compiler {
        world,
        books: world
            .policies()
            .into_iter()
            .map(|id| ScriptBook::new(id, Capabilities::all()))
            .collect(),
        max_chain: max_refine_chain,
        seen: HashSet::new(),
    };
    for problem in problems {
        c.explore(problem, &[]);
    }
    c.books
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub problems: Vec<ProblemSpec>,
    pub books: Vec<ScriptBook>,
}

impl Corpus {
    pub fn agents(&self) -> Result<Vec<Arc<dyn PolicyAgent>>, PolicyError> {
        self.books
            .iter()
            .map(|b| Ok(Arc::new(ScriptedPolicy::from_book(b.clone())?) as Arc<dyn PolicyAgent>))
            .collect()
    }

    /// Writes `problems.jsonl` and `books/<policy>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir.join("books"))?;
        write_problems(&self.problems, &dir.join("problems.jsonl"))?;
        for b in &self.books {
            b.save(&dir.join("books").join(format!("{}.json", b.policy_id)))
                .map_err(std::io::Error::other)?;
        }
        Ok(())
    }
}

/// One problem per line as JSON.
pub fn write_problems(problems: &[ProblemSpec], path: &Path) -> std::io::Result<()> {
    let mut text = String::new();
    for p in problems {
        text.push_str(&serde_json::to_string(p).expect("problems serialize"));
        text.push('\n');
    }
    fs::write(path, text)
}

// ---------------------------------------------------------------------------
// Planted corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Sum,
    Product,
    Max,
    Min,
    Count,
    Sort,
    Reverse,
    Add(i64),
    Mul(i64),
    Zero,
}

impl Op {
    fn program(self) -> String {
        match self {
            Op::Sum => "sum".into(),
            Op::Product => "product".into(),
            Op::Max => "max".into(),
            Op::Min => "min".into(),
            Op::Count => "count".into(),
            Op::Sort => "sort".into(),
            Op::Reverse => "reverse".into(),
            Op::Add(k) => format!("add {k}"),
            Op::Mul(k) => format!("mul {k}"),
            Op::Zero => "const 0".into(),
        }
    }

    fn describe(self) -> String {
        match self {
            Op::Sum => "add up all the numbers".into(),
            Op::Product => "multiply all the numbers together".into(),
            Op::Max => "report the largest number".into(),
            Op::Min => "report the smallest number".into(),
            Op::Count => "count how many numbers there are".into(),
            Op::Sort => "sort the numbers in ascending order".into(),
            Op::Reverse => "print the numbers in reverse order".into(),
            Op::Add(k) => format!("add {k} to every number"),
            Op::Mul(k) => format!("multiply every number by {k}"),
            Op::Zero => "print zero".into(),
        }
    }

    /// A plausible misreading that fails every test of the generated inputs.
    fn misreading(self) -> Op {
        match self {
            Op::Sum => Op::Product,
            Op::Product => Op::Sum,
            Op::Max => Op::Min,
            Op::Min => Op::Max,
            Op::Count => Op::Sum,
            Op::Sort => Op::Reverse,
            Op::Reverse => Op::Sort,
            Op::Add(k) => Op::Mul(k),
            Op::Mul(k) => Op::Add(k),
            Op::Zero => Op::Sum,
        }
    }

    fn apply(self, xs: &[i64]) -> String {
        let join = |v: Vec<i64>| v.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
        match self {
            Op::Sum => xs.iter().sum::<i64>().to_string(),
            Op::Product => xs.iter().product::<i64>().to_string(),
            Op::Max => xs.iter().max().expect("non-empty").to_string(),
            Op::Min => xs.iter().min().expect("non-empty").to_string(),
            Op::Count => xs.len().to_string(),
            Op::Sort => {
                let mut v = xs.to_vec();
                v.sort();
                join(v)
            }
            Op::Reverse => join(xs.iter().rev().copied().collect()),
            Op::Add(k) => join(xs.iter().map(|x| x + k).collect()),
            Op::Mul(k) => join(xs.iter().map(|x| x * k).collect()),
            Op::Zero => "0".into(),
        }
    }
}

/// Integers in 2..=9, three to five of them, distinct and not monotone.
fn test_input(rng: &mut ChaCha8Rng) -> Vec<i64> {
    let len = rng.random_range(3..=5);
    let mut pool: Vec<i64> = (2..=9).collect();
    loop {
        pool.shuffle(rng);
        let xs = pool[..len].to_vec();
        let ascending = xs.windows(2).all(|w| w[0] < w[1]);
        let descending = xs.windows(2).all(|w| w[0] > w[1]);
        if !ascending && !descending {
            return xs;
        }
    }
}

#[derive(Debug, Clone)]
struct PlantedTask {
    op: Op,
    wrong: [Op; 2],
    tests: Vec<(String, String)>,
    /// Index of the policy that proposes the correct plan; `None` when both
    /// misread the task and only refinement reaches the correct plan.
    correct_policy: Option<usize>,
}

/// Policies `alpha` and `beta` over list-processing problems. At depth 1 one
/// policy proposes the right plan and the other a planted misreading (or
/// both misread, for refine-only tasks). Solutions follow the plan in the
/// state; the root solution passes only the first test, so a misread plan
/// is always ill.
#[derive(Debug, Clone)]
pub struct PlantedWorld {
    tasks: Vec<(String, PlantedTask)>,
}

const REVISED: &str = " (revised after feedback)";

impl PlantedWorld {
    fn task(&self, problem: &ProblemSpec) -> &PlantedTask {
        &self
            .tasks
            .iter()
            .find(|(id, _)| *id == problem.id)
            .expect("problem belongs to this world")
            .1
    }

    fn plan_text(op: Op) -> String {
        format!("plan: {}", op.describe())
    }

    /// The operation named by the plan thought of the state, if any.
    fn planned(&self, task: &PlantedTask, thoughts: &[String]) -> Option<Op> {
        let plan = thoughts.first()?;
        if plan.ends_with(REVISED) || *plan == Self::plan_text(task.op) {
            return Some(task.op);
        }
        task.wrong.iter().copied().find(|w| *plan == Self::plan_text(*w))
    }
}

impl World for PlantedWorld {
    fn policies(&self) -> Vec<String> {
        vec!["alpha".into(), "beta".into()]
    }

    fn propose(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<ThoughtProposal> {
        let task = self.task(problem);
        let prior = if policy == 0 { 0.6 } else { 0.4 };
        Some(match thoughts.len() {
            0 => match task.correct_policy {
                Some(p) if p == policy => ThoughtProposal::new(Self::plan_text(task.op), prior),
                Some(_) => ThoughtProposal::new(Self::plan_text(task.wrong[0]), prior),
                None => ThoughtProposal::new(Self::plan_text(task.wrong[policy]), prior),
            },
            1 if policy == 0 => {
                let op = self.planned(task, thoughts).expect("depth-1 states carry a plan");
                ThoughtProposal::terminal(op.program(), prior)
            }
            1 => ThoughtProposal::new("check: inputs hold between three and five integers", prior),
            _ if policy == 0 => ThoughtProposal::new("detail: read every integer on the line", prior),
            _ => ThoughtProposal::new("detail: print the answer on one line", prior),
        })
    }

    fn solve(&self, _policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> String {
        let task = self.task(problem);
        match self.planned(task, thoughts) {
            Some(op) => op.program(),
            None => {
                let (input, output) = &task.tests[0];
                format!("case {input} => {output}")
            }
        }
    }

    fn summarize(&self, _policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<String> {
        let task = self.task(problem);
        let op = self.planned(task, thoughts)?;
        (thoughts.len() == 1 && op != task.op).then(|| {
            format!(
                "summary: planning to {} fails every test; the expected outputs match: {}",
                op.describe(),
                task.op.describe()
            )
        })
    }

    fn refine(&self, _policy: usize, problem: &ProblemSpec, summary: &str) -> Option<ThoughtProposal> {
        let task = self.task(problem);
        summary
            .ends_with(&task.op.describe())
            .then(|| ThoughtProposal::new(format!("{}{REVISED}", Self::plan_text(task.op)), 0.5))
    }
}

fn op_for(i: usize, rng: &mut ChaCha8Rng) -> Op {
    match i % 9 {
        0 => Op::Sum,
        1 => Op::Product,
        2 => Op::Max,
        3 => Op::Min,
        4 => Op::Count,
        5 => Op::Sort,
        6 => Op::Reverse,
        7 => Op::Add(rng.random_range(3..=9)),
        _ => Op::Mul(rng.random_range(3..=9)),
    }
}

fn planted_problem(id: String, op: Op, rng: &mut ChaCha8Rng) -> (ProblemSpec, Vec<(String, String)>) {
    let tests: Vec<(String, String)> = (0..3)
        .map(|_| {
            let xs = test_input(rng);
            let input = xs.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
            (input, op.apply(&xs))
        })
        .collect();
    let problem = ProblemSpec {
        statement: format!("Problem {id}: read integers from one line and {}.", op.describe()),
        id,
        tests: tests.iter().map(|(i, o)| TestCase::new(i.as_str(), o.as_str())).collect(),
        time_limit_ms: 1000,
        memory_limit_mb: 64,
        max_depth: 3,
    };
    (problem, tests)
}

fn build_planted(prefix: &str, count: usize, seed: u64, refine_only: bool) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    let mut tasks = Vec::new();
    for i in 0..count {
        let op = op_for(i, &mut rng);
        let (problem, tests) = planted_problem(format!("{prefix}-{i:02}"), op, &mut rng);
        let task = PlantedTask {
            op,
            wrong: [op.misreading(), Op::Zero],
            tests,
            correct_policy: if refine_only { None } else { Some(i % 2) },
        };
        tasks.push((problem.id.clone(), task));
        problems.push(problem);
    }
    let world = PlantedWorld { tasks };
    let books = compile_books(&world, &problems, 2);
    Corpus { problems, books }
}

/// Twenty problems, each with one correct and one planted wrong plan.
pub fn synthetic_corpus(seed: u64) -> Corpus {
    build_planted("syn", 20, seed, false)
}

/// Problems where both policies misread the task; only a refinement of an
/// ill plan reaches the correct one.
pub fn refine_only_corpus(count: usize, seed: u64) -> Corpus {
    build_planted("ref", count, seed, true)
}

// ---------------------------------------------------------------------------
// Random corpus
// ---------------------------------------------------------------------------

/// Hash-driven behaviour: every answer is a pure function of the seed,
/// policy and key text, so books stay consistent however a state is reached.
#[derive(Debug, Clone)]
pub struct RandomWorld {
    seed: u64,
    policies: usize,
    tests: usize,
}

impl RandomWorld {
    fn draw(&self, policy: usize, tag: &str, key: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((policy as u64).to_le_bytes());
        h.update(tag.as_bytes());
        h.update([0]);
        h.update(key.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    /// A lookup table answering the subset of tests selected by `mask`.
    fn table(&self, mask: u64) -> String {
        let lines: Vec<String> = (0..self.tests)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| format!("case q{i} => a{i}"))
            .collect();
        if lines.is_empty() {
            "const ?".into()
        } else {
            lines.join("\n")
        }
    }

    fn prior(h: u64) -> f64 {
        ((h >> 40) % 1000 + 1) as f64 / 1000.0
    }
}

impl World for RandomWorld {
    fn policies(&self) -> Vec<String> {
        (0..self.policies).map(|p| format!("p{p}")).collect()
    }

    fn propose(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<ThoughtProposal> {
        let h = self.draw(policy, "propose", &state_text(problem, thoughts));
        if h.is_multiple_of(7) {
            Some(ThoughtProposal::terminal(self.table(h >> 8), Self::prior(h)))
        } else {
            Some(ThoughtProposal::new(format!("t{:08x}", h >> 32), Self::prior(h)))
        }
    }

    fn solve(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> String {
        self.table(self.draw(policy, "solve", &state_text(problem, thoughts)))
    }

    fn summarize(&self, policy: usize, problem: &ProblemSpec, thoughts: &[String]) -> Option<String> {
        let h = self.draw(policy, "summarize", &state_text(problem, thoughts));
        Some(format!("s{h:016x}"))
    }

    fn refine(&self, policy: usize, _problem: &ProblemSpec, summary: &str) -> Option<ThoughtProposal> {
        let h = self.draw(policy, "refine", summary);
        if h.is_multiple_of(5) {
            Some(ThoughtProposal::terminal(self.table(h >> 8), Self::prior(h)))
        } else {
            Some(ThoughtProposal::new(format!("r{:08x}", h >> 32), Self::prior(h)))
        }
    }
}

/// One to three problems answered by two or three hash-driven policies.
pub fn random_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tests = rng.random_range(2..=5);
    let world = RandomWorld {
        seed,
        policies: rng.random_range(2..=3),
        tests,
    };
    let problems: Vec<ProblemSpec> = (0..rng.random_range(1..=3))
        .map(|i| ProblemSpec {
            id: format!("rnd-{seed}-{i}"),
            statement: format!("Random problem {i} of corpus {seed}"),
            tests: (0..tests).map(|t| TestCase::new(format!("q{t}"), format!("a{t}"))).collect(),
            time_limit_ms: 100,
            memory_limit_mb: 16,
            max_depth: rng.random_range(2..=3),
        })
        .collect();
    let books = compile_books(&world, &problems, 2);
    Corpus { problems, books }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{Evaluator, MockExecutor};
    use crate::mcts::{run_search, SearchConfig};

    fn evaluator() -> Evaluator {
        Evaluator::new(Arc::new(MockExecutor::new()))
    }

    #[test]
    fn root_solution_passes_one_test_in_three() {
        let corpus = synthetic_corpus(0);
        assert_eq!(corpus.problems.len(), 20);
        let ev = evaluator();
        for p in &corpus.problems {
            let root = &corpus.books[0].solutions[&p.statement];
            assert!((ev.score(&ev.report(root, p).unwrap()) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correct_and_wrong_plans_split_cleanly() {
        let corpus = synthetic_corpus(3);
        let ev = evaluator();
        for p in &corpus.problems {
            let mut scores = Vec::new();
            for book in &corpus.books {
                let plan = &book.proposals[&p.statement][0].text;
                let state = format!("{}\n{plan}", p.statement);
                scores.push(ev.score(&ev.report(&book.solutions[&state], p).unwrap()));
            }
            scores.sort_by(f64::total_cmp);
            assert_eq!(scores, vec![0.0, 1.0], "{}", p.id);
        }
    }

    #[test]
    fn books_cover_every_search_query() {
        // Seed 45 has two policies proposing the same text, which needs
        // separate summaries per proposer.
        for corpus in [synthetic_corpus(1), refine_only_corpus(4, 2), random_corpus(5), random_corpus(45)] {
            let agents = corpus.agents().unwrap();
            let ev = evaluator();
            for p in &corpus.problems {
                for prune in [false, true] {
                    let cfg = SearchConfig {
                        prune_enabled: prune,
                        ..SearchConfig::default()
                    };
                    run_search(p.clone(), &agents, &ev, &cfg).unwrap();
                }
            }
        }
    }

    #[test]
    fn corpora_are_seeded() {
        assert_eq!(synthetic_corpus(4), synthetic_corpus(4));
        assert_ne!(synthetic_corpus(4).problems, synthetic_corpus(5).problems);
        assert_eq!(random_corpus(9), random_corpus(9));
    }

    #[test]
    fn corpus_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = refine_only_corpus(2, 0);
        corpus.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("problems.jsonl")).unwrap();
        let back: Vec<ProblemSpec> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, corpus.problems);
        let book = ScriptBook::load(&dir.path().join("books/alpha.json")).unwrap();
        assert_eq!(book, corpus.books[0]);
    }
}
