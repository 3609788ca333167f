//! PUCT tree search over reasoning blocks.
//!
//! The search loop is generic over [`SearchProblem`], so synthetic trees can
//! be searched with the same code that searches policy rollouts.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::metrics::exact_match;
use crate::env::oracle::{oracle_judge, Preference};
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::{LabError, Result};
use crate::policy::rollout::{block_log_prob, extend_rollout, sample_block, RolloutConfig};
use crate::policy::{parse_block, PolicyModel, PolicyParams, Trajectory};
use crate::prm::PreferencePair;
use crate::scalar::Scalar;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub c_puct: f64,
    /// Expansion width.
    pub k: usize,
    pub max_depth: usize,
    pub n_simulations: usize,
    pub gamma: f64,
    pub tau_exp: f64,
    /// Temperature of simulation rollouts.
    pub sim_temperature: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            c_puct: 2.5,
            k: 5,
            max_depth: 10,
            n_simulations: 200,
            gamma: 0.99,
            tau_exp: 1.5,
            sim_temperature: 1.0,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_puct > 0.0) {
            return Err(LabError::Config("mcts.c_puct must be > 0".into()));
        }
        if self.k < 2 {
            return Err(LabError::Config("mcts.k must be >= 2".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LabError::Config("mcts.gamma must lie in (0, 1]".into()));
        }
        if !(self.tau_exp > 0.0) || self.max_depth == 0 {
            return Err(LabError::Config(
                "mcts.tau_exp must be > 0 and mcts.max_depth >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate produced by expansion.
#[derive(Debug, Clone)]
pub struct Candidate<S, A> {
    pub action: A,
    pub prior: f64,
    pub state: S,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    /// Binary correctness.
    pub v: f64,
    /// Depth of the final step.
    pub terminal_step: usize,
    pub rollout: Option<Arc<Trajectory>>,
}

pub trait SearchProblem {
    type State: Clone;
    type Action: Clone + PartialEq;

    fn expand<R: Rng>(
        &self,
        state: &Self::State,
        depth: usize,
        rng: &mut R,
    ) -> Result<Vec<Candidate<Self::State, Self::Action>>>;

    fn simulate<R: Rng>(
        &self,
        state: &Self::State,
        depth: usize,
        terminal: bool,
        rng: &mut R,
    ) -> Result<SimulationResult>;
}

#[derive(Debug, Clone)]
pub struct TreeNode<S, A> {
    pub id: usize,
    pub parent: Option<usize>,
    /// Action on the edge from the parent.
    pub action: Option<A>,
    pub state: S,
    pub children: Vec<usize>,
    pub expanded: bool,
    pub prior: f64,
    /// Edge statistics `N(parent, action)` and `Q(parent, action)`.
    pub visits: u64,
    pub q: f64,
    pub depth: usize,
    pub terminal: bool,
    pub terminal_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchTree<S, A> {
    pub nodes: Vec<TreeNode<S, A>>,
}

impl<S, A> SearchTree<S, A> {
    pub fn new(root: S, terminal: bool) -> Self {
        Self {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                action: None,
                state: root,
                children: Vec::new(),
                expanded: false,
                prior: 1.0,
                visits: 0,
                q: 0.0,
                depth: 0,
                terminal,
                terminal_value: None,
            }],
        }
    }

    pub fn root(&self) -> &TreeNode<S, A> {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &TreeNode<S, A> {
        &self.nodes[id]
    }

    pub fn root_visits(&self) -> u64 {
        self.nodes[0].children.iter().map(|&c| self.nodes[c].visits).sum()
    }

    /// PUCT score of every child of `id`.
    pub fn puct_scores(&self, id: usize, c_puct: f64) -> Vec<f64> {
        let node = &self.nodes[id];
        let total: u64 = node.children.iter().map(|&c| self.nodes[c].visits).sum();
        let sqrt_total = (total as f64).sqrt();
        node.children
            .iter()
            .map(|&c| {
                let ch = &self.nodes[c];
                ch.q + c_puct * ch.prior * sqrt_total / (1.0 + ch.visits as f64)
            })
            .collect()
    }

    /// Child maximizing `Q + c·p·√ΣN / (1 + N)`; ties go to the higher prior,
    /// then the earlier child.
    pub fn puct_select(&self, id: usize, c_puct: f64) -> Result<usize> {
        let node = &self.nodes[id];
        if node.children.is_empty() {
            return Err(LabError::Unexpanded(id));
        }
        let scores = self.puct_scores(id, c_puct);
        let mut best = 0;
        for i in 1..scores.len() {
            let (s, b) = (scores[i], scores[best]);
            let pi = self.nodes[node.children[i]].prior;
            let pb = self.nodes[node.children[best]].prior;
            if s > b || (s == b && pi > pb) {
                best = i;
            }
        }
        Ok(node.children[best])
    }

    /// Applies the discounted update to every edge on `path` (root first).
    pub fn backpropagate(&mut self, path: &[usize], result: &SimulationResult, gamma: f64) {
        for &id in path {
            let n = &mut self.nodes[id];
            if n.parent.is_none() {
                continue;
            }
            let ret = discounted_return(result, n.depth, gamma);
            n.q = q_update(n.q, n.visits, ret);
            n.visits += 1;
        }
    }

    fn attach(&mut self, parent: usize, cands: Vec<Candidate<S, A>>) {
        let depth = self.nodes[parent].depth + 1;
        for c in cands {
            let id = self.nodes.len();
            self.nodes.push(TreeNode {
                id,
                parent: Some(parent),
                action: Some(c.action),
                state: c.state,
                children: Vec::new(),
                expanded: false,
                prior: c.prior,
                visits: 0,
                q: 0.0,
                depth,
                terminal: c.terminal,
                terminal_value: None,
            });
            self.nodes[parent].children.push(id);
        }
        self.nodes[parent].expanded = true;
    }
}

/// `γ^(T - t) · v` for an edge entering depth `t`.
pub fn discounted_return(result: &SimulationResult, t: usize, gamma: f64) -> f64 {
    let lag = result.terminal_step.saturating_sub(t);
    gamma.powi(lag as i32) * result.v
}

/// Running mean update `(Q·N + g) / (N + 1)`.
pub fn q_update(q: f64, n: u64, g: f64) -> f64 {
    (q * n as f64 + g) / (n as f64 + 1.0)
}

fn expand_node<P: SearchProblem, R: Rng>(
    problem: &P,
    tree: &mut SearchTree<P::State, P::Action>,
    id: usize,
    rng: &mut R,
) -> Result<()> {
    let node = &tree.nodes[id];
    if node.terminal {
        return Err(LabError::TerminalNode(id));
    }
    let cands = problem.expand(&node.state, node.depth, rng)?;
    tree.attach(id, cands);
    Ok(())
}

/// Runs `n_simulations` rounds of select, expand, simulate, backpropagate.
/// The root is expanded before the first round.
pub fn run_search<P: SearchProblem, R: Rng>(
    problem: &P,
    root: P::State,
    cfg: &MctsConfig,
    rng: &mut R,
) -> Result<SearchTree<P::State, P::Action>> {
    cfg.validate()?;
    let mut tree = SearchTree::new(root, false);
    expand_node(problem, &mut tree, 0, rng)?;
    if tree.nodes[0].children.is_empty() {
        return Ok(tree);
    }
    let mut path = Vec::with_capacity(cfg.max_depth + 1);
    for _ in 0..cfg.n_simulations {
        path.clear();
        let mut id = 0;
        loop {
            let node = &tree.nodes[id];
            if node.terminal || node.depth >= cfg.max_depth {
                break;
            }
            if !node.expanded {
                expand_node(problem, &mut tree, id, rng)?;
                if tree.nodes[id].children.is_empty() {
                    break;
                }
                id = tree.puct_select(id, cfg.c_puct)?;
                path.push(id);
                break;
            }
            if node.children.is_empty() {
                break;
            }
            id = tree.puct_select(id, cfg.c_puct)?;
            path.push(id);
        }
        let node = &tree.nodes[id];
        let result = if let Some(v) = node.terminal_value {
            SimulationResult {
                v,
                terminal_step: node.depth,
                rollout: None,
            }
        } else {
            problem.simulate(&node.state, node.depth, node.terminal, rng)?
        };
        if tree.nodes[id].terminal {
            tree.nodes[id].terminal_value = Some(result.v);
        }
        tree.backpropagate(&path, &result, cfg.gamma);
    }
    Ok(tree)
}

/// Sibling pair of child node ids under a shared parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiblingPair {
    pub parent: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// Judges every pair of children of every node with at least two children.
pub fn extract_sibling_pairs<S, A, J>(tree: &SearchTree<S, A>, mut judge: J) -> Vec<SiblingPair>
where
    J: FnMut(&S, &A, &A) -> Preference,
{
    let mut out = Vec::new();
    for node in &tree.nodes {
        let ch = &node.children;
        for i in 0..ch.len() {
            for j in i + 1..ch.len() {
                let (a, b) = (&tree.nodes[ch[i]], &tree.nodes[ch[j]]);
                let (Some(aa), Some(ba)) = (&a.action, &b.action) else {
                    continue;
                };
                match judge(&node.state, aa, ba) {
                    Preference::First => out.push(SiblingPair {
                        parent: node.id,
                        chosen: a.id,
                        rejected: b.id,
                    }),
                    Preference::Second => out.push(SiblingPair {
                        parent: node.id,
                        chosen: b.id,
                        rejected: a.id,
                    }),
                    Preference::Tie => {}
                }
            }
        }
    }
    out
}

/// Search over blocks sampled from a policy snapshot.
pub struct PolicySearch<'a, T> {
    pub model: &'a PolicyModel,
    pub params: &'a PolicyParams<T>,
    pub world: &'a World,
    pub cfg: MctsConfig,
    pub k_docs: usize,
}

impl<T: Scalar> SearchProblem for PolicySearch<'_, T> {
    type State = Trajectory;
    type Action = Vec<Token>;

    fn expand<R: Rng>(
        &self,
        state: &Trajectory,
        _depth: usize,
        rng: &mut R,
    ) -> Result<Vec<Candidate<Trajectory, Vec<Token>>>> {
        let mut blocks: Vec<Vec<Token>> = Vec::with_capacity(self.cfg.k);
        for _ in 0..self.cfg.k {
            let (b, _) = sample_block(
                self.model,
                self.params,
                &state.query,
                &state.steps,
                self.cfg.tau_exp,
                rng,
            )?;
            if !blocks.contains(&b) {
                blocks.push(b);
            }
        }
        let logps = blocks
            .iter()
            .map(|b| block_log_prob(self.model, self.params, &state.query, &state.steps, b).map(|x| x.as_f64()))
            .collect::<Result<Vec<f64>>>()?;
        let mx = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logps.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(blocks
            .into_iter()
            .zip(w)
            .map(|(b, wi)| {
                let mut child = state.clone();
                child.push_block(self.world, &b, self.k_docs);
                let terminal = child.terminal;
                Candidate {
                    action: b,
                    prior: wi / z,
                    state: child,
                    terminal,
                }
            })
            .collect())
    }

    fn simulate<R: Rng>(
        &self,
        state: &Trajectory,
        _depth: usize,
        _terminal: bool,
        rng: &mut R,
    ) -> Result<SimulationResult> {
        let mut traj = state.clone();
        let mut logp: Vec<T> = Vec::new();
        let cfg = RolloutConfig {
            max_steps: self.cfg.max_depth,
            k_docs: self.k_docs,
            temperature: self.cfg.sim_temperature,
        };
        extend_rollout(self.model, self.params, self.world, &mut traj, &mut logp, &cfg, rng)?;
        let v = match &traj.answer {
            Some(a) if exact_match(a, &traj.query.gold_answer) => 1.0,
            _ => 0.0,
        };
        Ok(SimulationResult {
            v,
            terminal_step: traj.num_blocks(),
            rollout: Some(Arc::new(traj)),
        })
    }
}

pub type PolicyTree = SearchTree<Trajectory, Vec<Token>>;

/// Searches from the empty history of `query`.
pub fn search_query<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    query: Arc<QueryInstance>,
    cfg: &MctsConfig,
    k_docs: usize,
    rng: &mut R,
) -> Result<PolicyTree> {
    let problem = PolicySearch {
        model,
        params,
        world,
        cfg: *cfg,
        k_docs,
    };
    run_search(&problem, Trajectory::new(query), cfg, rng)
}

/// Sibling pairs of a policy tree labelled by the rule judge.
pub fn policy_sibling_pairs(world: &World, tree: &PolicyTree, tree_id: u64) -> Vec<PreferencePair> {
    let vocab = world.vocab();
    let judge = |s: &Trajectory, a: &Vec<Token>, b: &Vec<Token>| {
        let view = crate::policy::StateView {
            query: &s.query,
            steps: &s.steps,
            partial: &[],
        };
        oracle_judge(&vocab, &view, &parse_block(&vocab, a), &parse_block(&vocab, b))
    };
    extract_sibling_pairs(tree, judge)
        .into_iter()
        .map(|p| {
            let parent = &tree.nodes[p.parent].state;
            let block = |id: usize| parse_block(&vocab, tree.nodes[id].action.as_ref().unwrap());
            PreferencePair {
                context: crate::policy::State {
                    query: Arc::clone(&parent.query),
                    steps: parent.steps.clone(),
                    partial: Vec::new(),
                },
                chosen: block(p.chosen),
                rejected: block(p.rejected),
                tree_id,
                node_id: p.parent,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct NodeRecord<'a> {
    tree: u64,
    node: usize,
    parent: Option<usize>,
    depth: usize,
    tokens: &'a [Token],
    prior: f64,
    n: u64,
    q: f64,
    terminal: bool,
}

/// One line per node: id, parent, step tokens, N, Q, prior.
pub fn write_tree<W: Write>(tree: &PolicyTree, tree_id: u64, mut w: W) -> Result<()> {
    for n in &tree.nodes {
        let rec = NodeRecord {
            tree: tree_id,
            node: n.id,
            parent: n.parent,
            depth: n.depth,
            tokens: n.action.as_deref().unwrap_or(&[]),
            prior: n.prior,
            n: n.visits,
            q: n.q,
            terminal: n.terminal,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
