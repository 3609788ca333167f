#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steplab::env::metrics::token_f1;
use steplab::env::oracle::oracle_trajectory;
use steplab::env::query::{gen_query, gen_query_set, QueryInstance};
use steplab::env::world::{gen_world, World, WorldConfig};
use steplab::eval::evaluate;
use steplab::gradcheck::{check, FlatParams};
use steplab::harness::ablation::{beta_label, prepare_seed};
use steplab::harness::{run_ablations, run_pipeline, AblationReport, ExperimentConfig, Lab, Variant};
use steplab::mcts::{
    discounted_return, q_update, run_search, search_query, Candidate, MctsConfig, SearchProblem, SearchTree,
    SimulationResult, TreeNode,
};
use steplab::policy::rollout::{replay_log_probs, rollout, visit_policy_tokens, RolloutConfig};
use steplab::policy::{PolicyModel, Provenance, State, Step, StepKind, Trajectory};
use steplab::prm::{
    ranking_loss, ranking_loss_from_margin, ranking_loss_grad, PreferencePair, PrmFeaturizer, PrmParams,
};
use steplab::rft::{filter_dual, sample_candidates, RetainedPair};
use steplab::rl::{
    build_advantages, clipped_loss, clipped_loss_grad, env_log_probs, group_sample, normalize_group, outcome_reward,
    step_reward, surrogate_term, GroupTrajectory, LossOptions, RewardBundle, StepScope, TrajectoryAdvantage,
};
use steplab::sft::{build_sft_dataset, sft_loss, sft_loss_grad, SftExample};
use steplab::vocab::{EntityId, Marker};
use steplab::{Params, Result};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

/// Outcome of one check, with a one-line explanation.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn small_world() -> (World, PolicyModel) {
    let w = gen_world(
        &WorldConfig {
            num_entities: 30,
            num_relations: 4,
            max_hops: 3,
            ..Default::default()
        },
        9,
    )
    .unwrap();
    let m = PolicyModel::new(w.vocab(), 3, true);
    (w, m)
}

pub fn random_query<R: Rng>(w: &World, rng: &mut R) -> Arc<QueryInstance> {
    let hops = rng.gen_range(1..=w.config.max_hops);
    Arc::new(gen_query(w, hops, rng).unwrap())
}

pub fn random_params<R: Rng>(m: &PolicyModel, scale: f64, rng: &mut R) -> Params {
    let mut p = m.init_params::<f64>();
    for i in 0..p.len() {
        *p.get_mut(i) = rng.gen_range(-scale..scale);
    }
    p
}

/// Up to `nonzero` coordinates where `grad` is nonzero plus up to `zero`
/// where it vanishes.
pub fn pick_coords<P: FlatParams, R: Rng>(grad: &P, nonzero: usize, zero: usize, rng: &mut R) -> Vec<usize> {
    let (nz, z): (Vec<usize>, Vec<usize>) = (0..grad.flat_len()).partition(|&i| grad.flat_get(i) != 0.0);
    let mut out: Vec<usize> = sample(rng, nz.len(), nonzero.min(nz.len()))
        .into_iter()
        .map(|k| nz[k])
        .collect();
    out.extend(sample(rng, z.len(), zero.min(z.len())).into_iter().map(|k| z[k]));
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------- formulas

pub struct Case {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

fn case(name: &'static str, got: f64, want: f64) -> Case {
    Case { name, got, want }
}

fn tree_with_children(children: &[(f64, u64, f64)]) -> SearchTree<(), usize> {
    let mut t = SearchTree::new((), false);
    for (i, &(prior, visits, q)) in children.iter().enumerate() {
        let id = t.nodes.len();
        t.nodes.push(TreeNode {
            id,
            parent: Some(0),
            action: Some(i),
            state: (),
            children: Vec::new(),
            expanded: false,
            prior,
            visits,
            q,
            depth: 1,
            terminal: false,
            terminal_value: None,
        });
        t.nodes[0].children.push(id);
    }
    t.nodes[0].expanded = true;
    t
}

fn sim(v: f64, terminal_step: usize) -> SimulationResult {
    SimulationResult {
        v,
        terminal_step,
        rollout: None,
    }
}

/// Every hand-evaluated example for the scoring, search, verifier, reward,
/// normalization and surrogate formulas.
pub fn formula_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let barack = 1u32;
    let obama = 2u32;
    out.push(case("f1 identical", token_f1(&[barack, obama], &[barack, obama]), 1.0));
    out.push(case("f1 partial", token_f1(&[obama], &[barack, obama]), 2.0 / 3.0));
    out.push(case("f1 disjoint", token_f1(&[3u32], &[4u32]), 0.0));

    let t = tree_with_children(&[(0.6, 1, 1.0), (0.4, 0, 0.0)]);
    let s = t.puct_scores(0, 2.5);
    out.push(case("puct a1 score", s[0], 1.75));
    out.push(case("puct a2 score", s[1], 1.0));
    out.push(case(
        "puct picks a1",
        (t.puct_select(0, 2.5).unwrap() == 1) as u8 as f64,
        1.0,
    ));
    let t = tree_with_children(&[(0.6, 0, 0.0), (0.4, 0, 0.0)]);
    out.push(case(
        "puct tie picks higher prior",
        (t.puct_select(0, 2.5).unwrap() == 1) as u8 as f64,
        1.0,
    ));
    let t = tree_with_children(&[(0.6, 1, 0.2), (0.4, 0, 0.0)]);
    let s = t.puct_scores(0, 2.5);
    out.push(case("puct low-q a1 score", s[0], 0.95));
    out.push(case("puct low-q a2 score", s[1], 1.0));
    out.push(case(
        "puct picks a2",
        (t.puct_select(0, 2.5).unwrap() == 2) as u8 as f64,
        1.0,
    ));

    out.push(case(
        "q update lag 2",
        q_update(0.0, 0, discounted_return(&sim(1.0, 2), 0, 0.99)),
        0.9801,
    ));
    out.push(case(
        "q update success",
        q_update(0.5, 1, discounted_return(&sim(1.0, 3), 3, 0.99)),
        0.75,
    ));
    out.push(case(
        "q update failure",
        q_update(0.5, 1, discounted_return(&sim(0.0, 3), 3, 0.99)),
        0.25,
    ));
    let mut t = tree_with_children(&[(1.0, 0, 0.0)]);
    t.backpropagate(&[1], &sim(1.0, 3), 0.99);
    out.push(case("backprop q", t.nodes[1].q, 0.9801));
    out.push(case("backprop n", t.nodes[1].visits as f64, 1.0));

    out.push(case("ranking equal scores", ranking_loss_from_margin(0.0), 2f64.ln()));
    out.push(case(
        "ranking margin 2",
        ranking_loss_from_margin(2.0),
        (1.0 + (-2f64).exp()).ln(),
    ));
    out.push(case(
        "ranking margin -2",
        ranking_loss_from_margin(-2.0),
        (1.0 + 2f64.exp()).ln(),
    ));
    out.push(case(
        "ranking margin 2 value",
        ranking_loss_from_margin(2.0),
        0.126_928_011_042_973,
    ));
    for d in [0.5, 2.0, 7.0] {
        out.push(case(
            "ranking antisymmetry",
            ranking_loss_from_margin(-d),
            ranking_loss_from_margin(d) + d,
        ));
    }

    out.push(case("warmup loss two tokens", warmup_hand_example(), 3.0 * 2f64.ln()));

    let (w, _) = small_world();
    let v = w.vocab();
    let q = Arc::new(gen_query(&w, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
    let oracle = oracle_trajectory(&w, &q);
    let mut prm = PrmParams::<f64>::zeros(PrmFeaturizer::new(v, 3));
    prm.bias = 0.4;
    let ctx = oracle.context(0);
    let good = oracle.block_steps(0);
    let mut broken = good.to_vec();
    broken[0].tokens.pop();
    broken[0].provenance.pop();
    out.push(case("step reward valid", step_reward(&prm, &v, &ctx, good, 0.2), 0.6));
    out.push(case(
        "step reward invalid",
        step_reward(&prm, &v, &ctx, &broken, 0.2),
        0.4,
    ));
    out.push(case(
        "step reward nu1 zero",
        step_reward(&prm, &v, &ctx, good, 0.0),
        0.4,
    ));

    out.push(case("outcome exact valid", outcome_reward(&v, &oracle, 0.5), 1.5));
    let last = oracle.num_blocks() - 1;
    let answer_only = Trajectory::from_steps(Arc::clone(&q), oracle.block_steps(last).to_vec());
    out.push(case(
        "outcome skipping retrieval",
        outcome_reward(&v, &answer_only, 0.5),
        1.0,
    ));
    let gold = q.gold_answer[0];
    let wrong = (0..w.config.num_entities)
        .map(|e| v.entity(EntityId(e)))
        .find(|&t| t != gold)
        .unwrap();
    let wrong_answer = Trajectory::from_steps(
        Arc::clone(&q),
        vec![Step::policy(
            StepKind::Answer,
            vec![Marker::AnswerOpen.token(), wrong, Marker::AnswerClose.token()],
        )],
    );
    out.push(case(
        "outcome wrong invalid",
        outcome_reward(&v, &wrong_answer, 0.5),
        0.0,
    ));

    for (name, input, want) in [
        ("normalize 1001", vec![1.0, 0.0, 0.0, 1.0], vec![1.0, -1.0, -1.0, 1.0]),
        ("normalize constant", vec![0.7; 4], vec![0.0; 4]),
        ("normalize pair", vec![1.0, 0.0], vec![1.0, -1.0]),
    ] {
        let got = normalize_group(&input, 1e-6).unwrap();
        for (g, w) in got.iter().zip(&want) {
            out.push(case(name, *g, *w));
        }
    }
    let adv = TrajectoryAdvantage {
        a_out: 1.0,
        a_proc: vec![-0.5],
        token_block: vec![0],
    };
    out.push(case("total advantage", adv.a_total(0, 0.3), 0.85));
    out.push(case("total advantage beta zero", adv.a_total(0, 0.0), 1.0));

    out.push(case("surrogate identity ratio", -surrogate_term(1.0, 2.0, 0.2), -2.0));
    out.push(case("surrogate clipped high", -surrogate_term(1.5, 1.0, 0.2), -1.2));
    out.push(case("surrogate clipped low", -surrogate_term(0.5, -1.0, 0.2), 0.8));
    out
}

/// A two-entity world where a control token and a normal token each have
/// probability one half; the weighted loss with weight 2 is `3 ln 2`.
fn warmup_hand_example() -> f64 {
    let w = gen_world(
        &WorldConfig {
            num_entities: 2,
            num_relations: 1,
            num_distractors: 0,
            max_hops: 1,
            fact_density: 0.0,
            planted_chains: 1,
        },
        0,
    )
    .unwrap();
    let v = w.vocab();
    let m = PolicyModel::new(v, 1, true);
    let q = Arc::new(gen_query(&w, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
    let mut p = m.init_params::<f64>();
    p.bias[Marker::SubanswerOpen.token().0 as usize] = 3f64.ln();
    let ex = SftExample::new(
        &v,
        State::new(q),
        vec![Marker::SubanswerOpen.token(), v.entity(EntityId(0))],
    );
    sft_loss(&m, &p, &[ex], 2.0).unwrap()
}

pub fn formulas() -> Verdict {
    let cases = formula_cases();
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| !((c.got - c.want).abs() <= 1e-9))
        .map(|c| format!("{} got {} want {}", c.name, c.got, c.want))
        .collect();
    Verdict::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} cases within 1e-9", cases.len())
        } else {
            bad.join("; ")
        },
    )
}

// --------------------------------------------------------------- gradients

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub instances: usize,
    pub worst: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn verdict(&self, name: &str) -> Verdict {
        Verdict::new(
            self.instances >= 100 && self.worst < GRAD_TOL,
            format!(
                "{name}: {} instances, {} coordinates, worst relative error {:.2e}",
                self.instances, self.coords, self.worst
            ),
        )
    }
}

fn random_context<R: Rng>(w: &World, m: &PolicyModel, rng: &mut R) -> (State, steplab::vocab::Token) {
    loop {
        let p = random_params(m, 1.0, rng);
        let q = random_query(w, rng);
        let cfg = RolloutConfig {
            max_steps: 6,
            ..Default::default()
        };
        let t = rollout(m, &p, w, q, &cfg, rng).unwrap().trajectory;
        let n = t.policy_token_count();
        if n == 0 {
            continue;
        }
        let pick = rng.gen_range(0..n);
        let mut k = 0;
        let mut found = None;
        visit_policy_tokens(&t, |_, view, tok| {
            if k == pick {
                found = Some((
                    State {
                        query: Arc::new(view.query.clone()),
                        steps: view.steps.to_vec(),
                        partial: view.partial.to_vec(),
                    },
                    tok,
                ));
            }
            k += 1;
            Ok(())
        })
        .unwrap();
        return found.unwrap();
    }
}

pub fn log_prob_gradients(instances: usize, seed: u64) -> GradReport {
    let (w, m) = small_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..instances {
        let (state, tok) = random_context(&w, &m, &mut rng);
        let p = random_params(&m, 1.0, &mut rng);
        let view = state.view();
        let g = m.log_prob_grad(&p, &view, tok).unwrap();
        let cs = pick_coords(&g, 60, 10, &mut rng);
        coords += cs.len();
        let err = check(&p, &g, &cs, FD_STEP, |x| m.log_prob(x, &view, tok).unwrap());
        worst = worst.max(err);
    }
    GradReport {
        instances,
        worst,
        coords,
    }
}

pub fn warmup_loss_gradients(instances: usize, seed: u64) -> GradReport {
    let (w, m) = small_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..instances {
        let qs: Vec<_> = (0..2).map(|_| random_query(&w, &mut rng)).collect();
        let data = build_sft_dataset(&w, &qs, 3);
        let n = rng.gen_range(1..=4.min(data.len()));
        let batch: Vec<SftExample> = sample(&mut rng, data.len(), n)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let lambda = rng.gen_range(0.5..3.0);
        let p = random_params(&m, 0.5, &mut rng);
        let (l, g) = sft_loss_grad(&m, &p, &batch, lambda).unwrap();
        let direct = sft_loss(&m, &p, &batch, lambda).unwrap();
        worst = worst.max((l - direct).abs());
        let cs = pick_coords(&g, 60, 10, &mut rng);
        coords += cs.len();
        let err = check(&p, &g, &cs, FD_STEP, |x| sft_loss(&m, x, &batch, lambda).unwrap());
        worst = worst.max(err);
    }
    GradReport {
        instances,
        worst,
        coords,
    }
}

fn prm_flat(p: &PrmParams<f64>) -> Vec<f64> {
    let mut v = p.weights.clone();
    v.push(p.bias);
    v
}

fn prm_from_flat(base: &PrmParams<f64>, v: &[f64]) -> PrmParams<f64> {
    let mut p = base.clone();
    let n = p.weights.len();
    p.weights.copy_from_slice(&v[..n]);
    p.bias = v[n];
    p
}

pub fn ranking_loss_gradients(instances: usize, seed: u64) -> GradReport {
    let (w, _) = small_world();
    let f = PrmFeaturizer::new(w.vocab(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..instances {
        let q = random_query(&w, &mut rng);
        let t = oracle_trajectory(&w, &q);
        let b = rng.gen_range(0..t.num_blocks());
        let other = (b + rng.gen_range(1..t.num_blocks())) % t.num_blocks();
        let pair = PreferencePair {
            context: t.context_state(b),
            chosen: t.block_steps(b).to_vec(),
            rejected: t.block_steps(other).to_vec(),
            tree_id: 0,
            node_id: 0,
        };
        let mut base = PrmParams::<f64>::zeros(f);
        for x in base.weights.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        base.bias = rng.gen_range(-1.0..1.0);
        let (l, g) = ranking_loss_grad(&base, &pair);
        worst = worst.max((l - ranking_loss(&base, &pair)).abs());
        let x0 = prm_flat(&base);
        let gf = prm_flat(&g);
        let cs = pick_coords(&gf, 60, 10, &mut rng);
        coords += cs.len();
        let err = check(&x0, &gf, &cs, FD_STEP, |x| {
            ranking_loss(&prm_from_flat(&base, x), &pair)
        });
        worst = worst.max(err);
    }
    GradReport {
        instances,
        worst,
        coords,
    }
}

/// A sampled group with random rewards, its advantages and the loss options.
pub struct ClipInstance {
    pub model: PolicyModel,
    pub old: Params,
    pub group: Vec<GroupTrajectory>,
    pub adv: steplab::rl::AdvantageTable,
    pub opts: LossOptions,
}

pub fn clip_instance<R: Rng>(w: &World, m: &PolicyModel, with_env: bool, rng: &mut R) -> ClipInstance {
    let old = random_params(m, 0.7, rng);
    let q = random_query(w, rng);
    let cfg = RolloutConfig {
        max_steps: 7,
        ..Default::default()
    };
    let g = rng.gen_range(2..=5);
    let group = group_sample(m, &old, w, &q, g, &cfg, with_env, rng).unwrap();
    let rewards: Vec<RewardBundle> = group
        .iter()
        .map(|t| RewardBundle {
            step: (0..t.trajectory.num_blocks())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            outcome: rng.gen_range(0.0..1.5),
        })
        .collect();
    let trajs: Vec<Trajectory> = group.iter().map(|t| t.trajectory.clone()).collect();
    let beta = rng.gen_range(0.0..1.0);
    let adv = build_advantages(&trajs, &rewards, beta, 1e-6, StepScope::Pooled).unwrap();
    ClipInstance {
        model: *m,
        old,
        group,
        adv,
        opts: LossOptions {
            epsilon: 0.2,
            include_env_tokens: with_env,
        },
    }
}

/// Ratios of every scored token under `params`.
pub fn ratios(inst: &ClipInstance, params: &Params) -> Vec<f64> {
    let mut out = Vec::new();
    for g in &inst.group {
        let lp = replay_log_probs(&inst.model, params, &g.trajectory).unwrap();
        out.extend(lp.iter().zip(&g.old_logp).map(|(a, b)| (a - b).exp()));
        if inst.opts.include_env_tokens {
            let lp = env_log_probs(&inst.model, params, &g.trajectory).unwrap();
            out.extend(lp.iter().zip(&g.env_old_logp).map(|(a, b)| (a - b).exp()));
        }
    }
    out
}

pub fn clipped_loss_gradients(instances: usize, seed: u64) -> (GradReport, usize) {
    let (w, m) = small_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut clipped = 0;
    let mut done = 0;
    while done < instances {
        let inst = clip_instance(&w, &m, done % 2 == 1, &mut rng);
        let first = &inst.group[0].trajectory;
        if inst.group.iter().all(|g| g.trajectory.steps == first.steps) {
            continue;
        }
        let mut theta = inst.old.clone();
        for i in 0..theta.len() {
            *theta.get_mut(i) += rng.gen_range(-0.2..0.2);
        }
        let eps = inst.opts.epsilon;
        let rho = ratios(&inst, &theta);
        if rho
            .iter()
            .any(|r| (r - (1.0 - eps)).abs() < 1e-4 || (r - (1.0 + eps)).abs() < 1e-4)
        {
            continue;
        }
        clipped += rho.iter().filter(|r| (**r - 1.0).abs() > eps).count();
        let (l, g) = clipped_loss_grad(&m, &theta, &inst.group, &inst.adv, inst.opts).unwrap();
        if (0..g.flat_len()).all(|i| g.flat_get(i).abs() < 1e-12) {
            continue;
        }
        worst = worst.max((l - clipped_loss(&m, &theta, &inst.group, &inst.adv, inst.opts).unwrap()).abs());
        let cs = pick_coords(&g, 60, 10, &mut rng);
        coords += cs.len();
        let err = check(&theta, &g, &cs, FD_STEP, |x| {
            clipped_loss(&m, x, &inst.group, &inst.adv, inst.opts).unwrap()
        });
        worst = worst.max(err);
        done += 1;
    }
    (
        GradReport {
            instances,
            worst,
            coords,
        },
        clipped,
    )
}

pub fn gradients() -> Verdict {
    let reports = [
        ("warmup", warmup_loss_gradients(100, 11)),
        ("ranking", ranking_loss_gradients(100, 12)),
        ("log-prob", log_prob_gradients(100, 13)),
        ("clipped", clipped_loss_gradients(100, 14).0),
    ];
    let verdicts: Vec<Verdict> = reports.iter().map(|(n, r)| r.verdict(n)).collect();
    Verdict::new(
        verdicts.iter().all(|v| v.pass),
        verdicts
            .iter()
            .map(|v| v.detail.as_str())
            .collect::<Vec<_>>()
            .join("; "),
    )
}

// -------------------------------------------------------------------- mcts

/// A synthetic search problem over index paths. Branching, priors,
/// terminality and simulation outcomes are hashes of the path, or draws from
/// the search rng when `stochastic` is set.
#[derive(Debug, Clone, Copy)]
pub struct ToyProblem {
    pub seed: u64,
    pub depth: usize,
    pub branching: usize,
    pub stochastic: bool,
}

impl ToyProblem {
    fn hash(&self, path: &[usize], salt: &str) -> u64 {
        let idx = path
            .iter()
            .fold(1u64, |a, &x| a.wrapping_mul(31).wrapping_add(x as u64 + 1));
        steplab::seeds::derive_seed(self.seed, salt, idx)
    }
}

impl SearchProblem for ToyProblem {
    type State = Vec<usize>;
    type Action = usize;

    fn expand<R: Rng>(
        &self,
        state: &Vec<usize>,
        depth: usize,
        rng: &mut R,
    ) -> Result<Vec<Candidate<Vec<usize>, usize>>> {
        let b = if self.stochastic {
            rng.gen_range(1..=self.branching)
        } else {
            1 + (self.hash(state, "branch") % self.branching as u64) as usize
        };
        let weights: Vec<f64> = (0..b)
            .map(|i| {
                let mut p = state.clone();
                p.push(i);
                1.0 + (self.hash(&p, "prior") % 7) as f64
            })
            .collect();
        let total: f64 = weights.iter().sum();
        Ok((0..b)
            .map(|i| {
                let mut s = state.clone();
                s.push(i);
                let terminal = depth + 1 >= self.depth || self.hash(&s, "stop").is_multiple_of(4);
                Candidate {
                    action: i,
                    prior: weights[i] / total,
                    state: s,
                    terminal,
                }
            })
            .collect())
    }

    fn simulate<R: Rng>(
        &self,
        state: &Vec<usize>,
        depth: usize,
        terminal: bool,
        rng: &mut R,
    ) -> Result<SimulationResult> {
        let v = if self.stochastic {
            rng.gen_bool(0.5)
        } else {
            self.hash(state, "value").is_multiple_of(2)
        };
        let extra = if terminal {
            0
        } else {
            (self.hash(state, "length") % 3) as usize
        };
        Ok(SimulationResult {
            v: v as u8 as f64,
            terminal_step: depth + extra,
            rollout: None,
        })
    }
}

struct RefNode {
    state: Vec<usize>,
    prior: f64,
    depth: usize,
    terminal: bool,
    expanded: bool,
    children: Vec<RefNode>,
    n: u64,
    q: f64,
    cached: Option<f64>,
}

impl RefNode {
    fn leaf(state: Vec<usize>, prior: f64, depth: usize, terminal: bool) -> Self {
        Self {
            state,
            prior,
            depth,
            terminal,
            expanded: false,
            children: Vec::new(),
            n: 0,
            q: 0.0,
            cached: None,
        }
    }
}

struct Reference<'a> {
    problem: &'a ToyProblem,
    cfg: &'a MctsConfig,
    rng: ChaCha8Rng,
}

impl Reference<'_> {
    fn expand(&mut self, node: &mut RefNode) {
        let cands = self.problem.expand(&node.state, node.depth, &mut self.rng).unwrap();
        node.children = cands
            .into_iter()
            .map(|c| RefNode::leaf(c.state, c.prior, node.depth + 1, c.terminal))
            .collect();
        node.expanded = true;
    }

    fn select(&self, node: &RefNode) -> usize {
        let total: u64 = node.children.iter().map(|c| c.n).sum();
        let root = (total as f64).sqrt();
        let score = |c: &RefNode| c.q + self.cfg.c_puct * c.prior * root / (1.0 + c.n as f64);
        let mut best = 0;
        for i in 1..node.children.len() {
            let (a, b) = (&node.children[i], &node.children[best]);
            if score(a) > score(b) || (score(a) == score(b) && a.prior > b.prior) {
                best = i;
            }
        }
        best
    }

    fn evaluate(&mut self, node: &mut RefNode) -> (f64, usize) {
        if let Some(v) = node.cached {
            return (v, node.depth);
        }
        let r = self
            .problem
            .simulate(&node.state, node.depth, node.terminal, &mut self.rng)
            .unwrap();
        if node.terminal {
            node.cached = Some(r.v);
        }
        (r.v, r.terminal_step)
    }

    fn credit(&self, node: &mut RefNode, (v, t): (f64, usize)) {
        let g = self.cfg.gamma.powi(t.saturating_sub(node.depth) as i32) * v;
        node.q = (node.q * node.n as f64 + g) / (node.n as f64 + 1.0);
        node.n += 1;
    }

    /// One simulation below `node`, crediting the edge into every child it passes.
    fn descend(&mut self, node: &mut RefNode) -> (f64, usize) {
        if node.terminal || node.depth >= self.cfg.max_depth {
            return self.evaluate(node);
        }
        let fresh = !node.expanded;
        if fresh {
            self.expand(node);
        }
        if node.children.is_empty() {
            return self.evaluate(node);
        }
        let c = self.select(node);
        let r = if fresh {
            self.evaluate(&mut node.children[c])
        } else {
            self.descend(&mut node.children[c])
        };
        self.credit(&mut node.children[c], r);
        r
    }
}

fn collect(node: &RefNode, out: &mut BTreeMap<Vec<usize>, (u64, f64)>) {
    for c in &node.children {
        out.insert(c.state.clone(), (c.n, c.q));
        collect(c, out);
    }
}

/// Edge statistics keyed by path, from a recursive re-implementation.
pub fn reference_search(problem: &ToyProblem, cfg: &MctsConfig) -> BTreeMap<Vec<usize>, (u64, f64)> {
    let mut r = Reference {
        problem,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    let mut root = RefNode::leaf(Vec::new(), 1.0, 0, false);
    r.expand(&mut root);
    if !root.children.is_empty() {
        for _ in 0..cfg.n_simulations {
            r.descend(&mut root);
        }
    }
    let mut out = BTreeMap::new();
    collect(&root, &mut out);
    out
}

pub fn library_stats(tree: &SearchTree<Vec<usize>, usize>) -> BTreeMap<Vec<usize>, (u64, f64)> {
    tree.nodes
        .iter()
        .filter(|n| n.parent.is_some())
        .map(|n| (n.state.clone(), (n.visits, n.q)))
        .collect()
}

pub fn random_toy<R: Rng>(rng: &mut R) -> (ToyProblem, MctsConfig) {
    let p = ToyProblem {
        seed: rng.gen(),
        depth: rng.gen_range(1..=3),
        branching: rng.gen_range(1..=3),
        stochastic: false,
    };
    let cfg = MctsConfig {
        c_puct: rng.gen_range(0.1..4.0),
        n_simulations: rng.gen_range(0..80),
        gamma: if rng.gen_bool(0.5) {
            1.0
        } else {
            rng.gen_range(0.5..1.0)
        },
        max_depth: rng.gen_range(1..=3),
        ..Default::default()
    };
    (p, cfg)
}

/// Compares the library search with the reference on `trials` random trees.
pub fn mcts_reference(trials: usize, seed: u64) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for i in 0..trials {
        let (p, cfg) = random_toy(&mut rng);
        let tree = run_search(&p, Vec::new(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let lib = library_stats(&tree);
        let reference = reference_search(&p, &cfg);
        if lib != reference {
            mismatches.push(format!("trial {i}: {p:?} {cfg:?}"));
        }
    }
    (trials, mismatches)
}

/// Runs `n` searches of the policy over a small world with random
/// parameters; returns `(searches, violations)` of visit conservation.
pub fn policy_search_conservation(n: usize, seed: u64) -> (usize, Vec<String>) {
    let (w, m) = small_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let p = random_params(&m, 1.0, &mut rng);
        let q = random_query(&w, &mut rng);
        let cfg = MctsConfig {
            n_simulations: rng.gen_range(1..40),
            k: rng.gen_range(2..6),
            max_depth: rng.gen_range(2..8),
            ..Default::default()
        };
        let t = search_query(&m, &p, &w, q, &cfg, 3, &mut rng).unwrap();
        if t.root().children.is_empty() || t.root_visits() != cfg.n_simulations as u64 {
            bad.push(format!(
                "search {i}: {} visits for {} simulations",
                t.root_visits(),
                cfg.n_simulations
            ));
        }
    }
    (n, bad)
}

pub fn mcts() -> Verdict {
    let (trials, mismatches) = mcts_reference(500, 21);
    let (searches, violations) = policy_search_conservation(100, 22);
    Verdict::new(
        mismatches.is_empty() && violations.is_empty(),
        format!(
            "{}/{trials} trees match the reference exactly; conservation holds on {}/{searches} stochastic searches{}",
            trials - mismatches.len(),
            searches - violations.len(),
            mismatches
                .iter()
                .chain(&violations)
                .take(3)
                .map(|s| format!("; {s}"))
                .collect::<String>()
        ),
    )
}

// --------------------------------------------------------------------- prm

#[derive(Debug, Clone, Copy)]
pub struct PrmRun {
    pub seed: u64,
    pub pairs: usize,
    pub train_pairs: usize,
    pub accuracy: f64,
}

pub fn prm_runs(cfg: &ExperimentConfig, seeds: usize) -> Vec<PrmRun> {
    (0..seeds as u64)
        .map(|s| {
            let mut c = cfg.clone();
            c.seed = cfg.seed + s;
            let lab = Lab::new(&c).unwrap();
            let sft = lab.sft().unwrap().params;
            let pairs = lab.search(&sft).unwrap().pairs;
            let out = lab.train_prm(&pairs).unwrap();
            PrmRun {
                seed: c.seed,
                pairs: pairs.len(),
                train_pairs: out.train_pairs,
                accuracy: out.heldout_accuracy(),
            }
        })
        .collect()
}

pub fn prm() -> Verdict {
    let runs = prm_runs(&ExperimentConfig::default(), 5);
    let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64;
    let min_pairs = runs.iter().map(|r| r.pairs).min().unwrap_or(0);
    Verdict::new(
        mean >= 0.85 && min_pairs >= 500,
        format!(
            "mean held-out accuracy {mean:.4} over {} seeds; pairs per seed {:?}",
            runs.len(),
            runs.iter().map(|r| r.pairs).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- ablation

pub fn ablation_report() -> AblationReport {
    run_ablations(&ExperimentConfig::default()).unwrap()
}

pub fn ordering(rep: &AblationReport) -> Verdict {
    let f = |v: Variant| rep.mean_f1(v.label()).unwrap_or(f64::NAN);
    let (full, no_ref, no_rl, sft) = (
        f(Variant::Full),
        f(Variant::NoRefinement),
        f(Variant::NoRl),
        f(Variant::SftPolicy),
    );
    Verdict::new(
        full >= no_ref && full >= no_rl && no_rl >= sft && full - sft >= 0.10,
        format!("mean F1 full {full:.4}, without refinement {no_ref:.4}, without RL {no_rl:.4}, warmup {sft:.4}"),
    )
}

pub fn convergence(rep: &AblationReport) -> Verdict {
    let faster = rep.convergence.iter().filter(|c| c.process_faster()).count();
    let n = rep.convergence.len() as f64;
    let fin_p = rep.convergence.iter().map(|c| c.final_process).sum::<f64>() / n;
    let fin_b = rep.convergence.iter().map(|c| c.final_baseline).sum::<f64>() / n;
    let iters: Vec<String> = rep
        .convergence
        .iter()
        .map(|c| format!("{:?}/{:?}", c.iters_process, c.iters_baseline))
        .collect();
    Verdict::new(
        faster >= 3 && fin_p >= fin_b,
        format!(
            "faster on {faster}/{} seeds (iterations weighted/outcome-only {}); final reward {fin_p:.4} vs {fin_b:.4}",
            rep.convergence.len(),
            iters.join(" ")
        ),
    )
}

pub fn beta_trend(rep: &AblationReport) -> Verdict {
    let f = |b: f64| rep.mean_f1(&beta_label(b)).unwrap_or(f64::NAN);
    let (b0, b3, b9) = (f(0.0), f(0.3), f(0.9));
    Verdict::new(
        b3 >= b0 && b3 >= b9,
        format!("mean F1 at weight 0: {b0:.4}, 0.3: {b3:.4}, 0.9: {b9:.4}"),
    )
}

// --------------------------------------------------------------------- rft

/// Candidate trajectories per query together with the verifier that scores them.
pub struct RftFixture {
    pub candidates: Vec<Vec<Trajectory>>,
    pub prm: PrmParams<f64>,
}

pub fn rft_fixture(cfg: &ExperimentConfig) -> RftFixture {
    let lab = Lab::new(cfg).unwrap();
    let sft = lab.sft().unwrap().params;
    let pairs = lab.search(&sft).unwrap().pairs;
    let prm = lab.train_prm(&pairs).unwrap().params;
    let n = cfg.split.rft_queries.min(lab.train.len());
    let rc = RolloutConfig {
        temperature: cfg.rft.temperature,
        ..lab.limits()
    };
    let candidates = lab.train[..n]
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut r = steplab::seeds::rng(cfg.seed, "rft-check", i as u64);
            sample_candidates(&lab.model, &sft, &lab.world, q, cfg.rft.n, &rc, &mut r).unwrap()
        })
        .collect();
    RftFixture { candidates, prm }
}

type PairKey = (usize, usize, usize);

/// Re-derives both filter criteria for every retained pair and checks that
/// nothing eligible was dropped. Returns `(retained keys, failures)`.
pub fn audit_filter(fx: &RftFixture, theta: f64) -> (BTreeSet<PairKey>, Vec<String>) {
    let mut keys = BTreeSet::new();
    let mut failures = Vec::new();
    for (qi, trajs) in fx.candidates.iter().enumerate() {
        let kept: Vec<RetainedPair> = filter_dual(trajs, &fx.prm, theta);
        let mut seen = HashSet::new();
        for p in &kept {
            let t = &trajs[p.trajectory];
            let b = p.block_index;
            let exact = t.answer.as_deref() == Some(t.query.gold_answer.as_slice());
            let score = fx.prm.score(&p.context.view(), &p.block);
            let policy_only = p
                .block
                .iter()
                .all(|s| s.kind != StepKind::Retrieval && s.provenance.iter().all(|&x| x == Provenance::Policy));
            let aligned = p.block.as_slice() == t.block_steps(b) && p.context == t.context_state(b);
            if !(exact && score > theta && policy_only && aligned && score == p.score) {
                failures.push(format!(
                    "query {qi} trajectory {} block {b}: exact {exact}, score {score}, policy {policy_only}, aligned {aligned}",
                    p.trajectory
                ));
            }
            seen.insert((p.trajectory, b));
            keys.insert((qi, p.trajectory, b));
        }
        for (i, t) in trajs.iter().enumerate() {
            if t.answer.as_deref() != Some(t.query.gold_answer.as_slice()) {
                continue;
            }
            for b in 0..t.num_blocks() {
                if fx.prm.score(&t.context(b), t.block_steps(b)) > theta && !seen.contains(&(i, b)) {
                    failures.push(format!("query {qi} trajectory {i} block {b}: eligible but dropped"));
                }
            }
        }
    }
    (keys, failures)
}

/// Quartiles of verifier scores over the blocks of correct trajectories.
pub fn score_quartiles(fx: &RftFixture) -> [f64; 3] {
    let mut s: Vec<f64> = fx
        .candidates
        .iter()
        .flatten()
        .filter(|t| t.answer.as_deref() == Some(t.query.gold_answer.as_slice()))
        .flat_map(|t| (0..t.num_blocks()).map(move |b| fx.prm.score(&t.context(b), t.block_steps(b))))
        .collect();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return [-1.0, 0.0, 1.0];
    }
    let at = |f: f64| s[((s.len() - 1) as f64 * f) as usize];
    [at(0.25), at(0.5), at(0.75)]
}

pub fn rft_filter_check(fx: &RftFixture, thetas: &[f64]) -> Verdict {
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    for &th in thetas {
        let (keys, f) = audit_filter(fx, th);
        failures.extend(f);
        sets.push(keys);
    }
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let nested = sets.windows(2).all(|w| w[1].is_subset(&w[0]));
    let shrinking = sets.windows(2).all(|w| w[1].len() < w[0].len());
    Verdict::new(
        failures.is_empty() && nested && total > 0,
        format!(
            "{} audited pairs, {} violations; retained {:?} at thresholds {:?}; nested {nested}, strictly shrinking {shrinking}",
            total,
            failures.len(),
            sets.iter().map(|s| s.len()).collect::<Vec<_>>(),
            thetas.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>()
        ),
    )
}

pub fn rft() -> Verdict {
    let fx = rft_fixture(&ExperimentConfig::default());
    let q = score_quartiles(&fx);
    rft_filter_check(&fx, &q)
}

// ------------------------------------------------------------- determinism

/// Every CSV file in `dir`, by name.
pub fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

pub fn determinism_check(cfg: &ExperimentConfig) -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(cfg, a.path()).unwrap();
    run_pipeline(cfg, b.path()).unwrap();
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    Verdict::new(
        !fa.is_empty() && fa.len() == fb.len() && differing.is_empty() && fa.contains_key("metrics.csv"),
        format!(
            "{} CSV files compared, {} differ{}",
            fa.len(),
            differing.len(),
            differing.first().map(|k| format!(" (first: {k})")).unwrap_or_default()
        ),
    )
}

pub fn determinism() -> Verdict {
    determinism_check(&ExperimentConfig::default())
}

// ------------------------------------------------------------------- misc

pub fn held_out_queries(lab: &Lab, hops: usize, n: usize, seed: u64) -> Vec<Arc<QueryInstance>> {
    let exclude: HashSet<_> = lab
        .train
        .iter()
        .chain(&lab.eval)
        .map(|q| q.query_tokens.clone())
        .collect();
    gen_query_set(
        &lab.world,
        &[hops],
        n,
        &exclude,
        5_000_000,
        &mut steplab::seeds::rng(seed, "held-out", hops as u64),
    )
    .unwrap()
    .into_iter()
    .map(Arc::new)
    .collect()
}

pub fn greedy_f1(lab: &Lab, params: &Params, qs: &[Arc<QueryInstance>]) -> f64 {
    evaluate(
        &lab.model,
        params,
        &lab.world,
        qs,
        lab.cfg.policy.k_docs,
        lab.cfg.policy.max_steps,
    )
    .unwrap()
    .f1
}

pub fn seed_base(cfg: &ExperimentConfig) -> steplab::harness::ablation::SeedBase {
    prepare_seed(cfg).unwrap()
}

/// The default experiment with fewer questions and training rounds.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.split.search_queries = 60;
    c.split.rft_queries = 40;
    c.split.eval_count = 40;
    c.rl.iterations = 20;
    c.rl.queries_per_iter = 8;
    c.rl.eval_every = 10;
    c.rl.dump_every = 10;
    c
}

/// Every file in `dir`, by name.
pub fn all_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}
