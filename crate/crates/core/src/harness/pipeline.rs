//! Stage orchestration: warmup, search, verifier, refinement, reinforcement.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RlInit};
use super::io::{self, MetricsLog};
use crate::env::query::{gen_query_set, write_queries, QueryInstance};
use crate::env::world::{gen_world, World};
use crate::error::{LabError, Result, StageExt};
use crate::eval::{evaluate, EvalReport};
use crate::mcts::{policy_sibling_pairs, search_query, write_tree, PolicyTree};
use crate::policy::rollout::RolloutConfig;
use crate::policy::{PolicyModel, PolicyParams};
use crate::prm::{read_pairs, train_prm, write_pairs, PreferencePair, PrmFeaturizer, PrmOutcome, PrmParams};
use crate::rft::{filter_dual, sample_candidates, train_rft, write_retained, RetainedPair};
use crate::rl::{train_rl, write_metrics, RlConfig, RlOutcome};
use crate::seeds::{derive_seed, rng};
use crate::sft::{build_sft_dataset, train_sft, write_curve, TrainOutcome};
use crate::{parallel, Params};

/// World, splits and policy structure for one master seed.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub model: PolicyModel,
    pub train: Vec<Arc<QueryInstance>>,
    /// The training questions with reference demonstrations.
    pub demos: Vec<Arc<QueryInstance>>,
    pub eval: Vec<Arc<QueryInstance>>,
}

pub struct SearchOutput {
    pub pairs: Vec<PreferencePair>,
    pub trees: Vec<PolicyTree>,
}

pub struct RefineOutput {
    pub candidates: usize,
    pub correct: usize,
    pub retained: Vec<RetainedPair>,
    pub training: TrainOutcome<f64>,
}

impl Lab {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let world = gen_world(&cfg.world, derive_seed(cfg.seed, "world", 0))?;
        let eval = gen_query_set(
            &world,
            &cfg.split.eval_hops,
            cfg.split.eval_count,
            &HashSet::new(),
            0,
            &mut rng(cfg.seed, "eval-queries", 0),
        )?;
        let mut exclude: HashSet<_> = eval.iter().map(|q| q.query_tokens.clone()).collect();
        let mut train = Vec::new();
        let mut demos = Vec::new();
        let mut draw = rng(cfg.seed, "train-queries", 0);
        let depths = cfg.split.train_hops.iter().zip(&cfg.split.train_counts);
        for ((&h, &n), &d) in depths.zip(&cfg.split.sft_counts) {
            let qs = gen_query_set(&world, &[h], n, &exclude, 1_000_000 + train.len() as u64, &mut draw)?;
            exclude.extend(qs.iter().map(|q| q.query_tokens.clone()));
            let qs: Vec<_> = qs.into_iter().map(Arc::new).collect();
            demos.extend(qs[..d].iter().cloned());
            train.extend(qs);
        }
        train.shuffle(&mut draw);
        demos.shuffle(&mut draw);
        let model = PolicyModel::new(world.vocab(), cfg.world.max_hops, cfg.policy.masking);
        Ok(Self {
            cfg: cfg.clone(),
            world,
            model,
            train,
            demos,
            eval: eval.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn limits(&self) -> RolloutConfig {
        RolloutConfig {
            max_steps: self.cfg.policy.max_steps,
            k_docs: self.cfg.policy.k_docs,
            temperature: 1.0,
        }
    }

    fn seed(&self, label: &str, offset: u64) -> u64 {
        derive_seed(self.cfg.seed, label, offset)
    }

    pub fn sft(&self) -> Result<TrainOutcome<f64>> {
        let data = build_sft_dataset(&self.world, &self.demos, self.cfg.policy.k_docs);
        let mut c = self.cfg.sft;
        c.seed = self.seed("sft", c.seed);
        train_sft(&self.model, &self.model.init_params(), &data, &c, "sft")
    }

    pub fn search(&self, policy: &Params) -> Result<SearchOutput> {
        let n = self.cfg.split.search_queries.min(self.train.len());
        let trees = parallel::map(&self.train[..n], |i, q| {
            let mut r = rng(self.cfg.seed, "mcts", i as u64);
            search_query(
                &self.model,
                policy,
                &self.world,
                Arc::clone(q),
                &self.cfg.mcts,
                self.cfg.policy.k_docs,
                &mut r,
            )
        })?;
        let pairs = trees
            .iter()
            .enumerate()
            .flat_map(|(i, t)| policy_sibling_pairs(&self.world, t, i as u64))
            .collect();
        Ok(SearchOutput { pairs, trees })
    }

    pub fn prm_featurizer(&self) -> PrmFeaturizer {
        PrmFeaturizer::new(self.world.vocab(), self.cfg.world.max_hops)
    }

    pub fn train_prm(&self, pairs: &[PreferencePair]) -> Result<PrmOutcome> {
        let mut c = self.cfg.prm;
        c.seed = self.seed("prm", c.seed);
        train_prm(self.prm_featurizer(), pairs, &c)
    }

    pub fn refine(&self, sft: &Params, prm: &PrmParams<f64>) -> Result<RefineOutput> {
        let rc = self.cfg.rft;
        let n = self.cfg.split.rft_queries.min(self.train.len());
        let cfg = RolloutConfig {
            temperature: rc.temperature,
            ..self.limits()
        };
        let per_query = parallel::map(&self.train[..n], |i, q| {
            let mut r = rng(self.cfg.seed, "rft-sample", i as u64);
            sample_candidates(&self.model, sft, &self.world, q, rc.n, &cfg, &mut r)
        })?;
        let mut retained = Vec::new();
        let mut correct = 0;
        for trajs in &per_query {
            correct += trajs.iter().filter(|t| crate::rft::is_correct(t)).count();
            retained.extend(filter_dual(trajs, prm, rc.theta));
        }
        let mut c = rc;
        c.seed = self.seed("rft", c.seed);
        let training = train_rft(&self.model, sft, &self.world, &retained, &c)?;
        Ok(RefineOutput {
            candidates: n * rc.n,
            correct,
            retained,
            training,
        })
    }

    pub fn rl_queries(&self) -> Vec<Arc<QueryInstance>> {
        self.train
            .iter()
            .filter(|q| self.cfg.split.rl_hops.contains(&q.hop_count))
            .cloned()
            .collect()
    }

    pub fn reinforce(
        &self,
        init: &Params,
        prm: &PrmParams<f64>,
        rl: &RlConfig,
        checkpoint_dir: Option<&Path>,
    ) -> Result<RlOutcome<f64>> {
        let mut c = *rl;
        c.seed = self.seed("rl", c.seed);
        train_rl(
            &self.model,
            init,
            prm,
            &self.world,
            &self.rl_queries(),
            &self.eval,
            &c,
            &self.limits(),
            checkpoint_dir,
        )
    }

    pub fn evaluate(&self, params: &Params) -> Result<EvalReport> {
        evaluate(
            &self.model,
            params,
            &self.world,
            &self.eval,
            self.cfg.policy.k_docs,
            self.cfg.policy.max_steps,
        )
    }

    pub fn write_world(&self, out: &Path) -> Result<()> {
        self.world.write_jsonl(io::create(&out.join(WORLD_FILE))?)?;
        let plain = |qs: &[Arc<QueryInstance>]| qs.iter().map(|q| (**q).clone()).collect::<Vec<_>>();
        write_queries(&plain(&self.train), io::create(&out.join(TRAIN_FILE))?)?;
        write_queries(&plain(&self.eval), io::create(&out.join(EVAL_FILE))?)?;
        Ok(())
    }
}

pub const WORLD_FILE: &str = "world.jsonl";
pub const TRAIN_FILE: &str = "queries_train.jsonl";
pub const EVAL_FILE: &str = "queries_eval.jsonl";
pub const SFT_CKPT: &str = "sft.json";
pub const PRM_CKPT: &str = "prm.json";
pub const RFT_CKPT: &str = "rft.json";
pub const RL_CKPT: &str = "rl.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";

/// Evaluation of one checkpoint on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: String,
    pub em: f64,
    pub f1: f64,
    pub format_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub evals: Vec<StageEval>,
    pub metrics: MetricsLog,
    pub text: String,
}

fn load_policy(out: &Path, file: &str, stage: &'static str) -> Result<Params> {
    let path = out.join(file);
    if !path.exists() {
        return Err(LabError::MissingCheckpoint {
            stage,
            path: path.display().to_string(),
        });
    }
    PolicyParams::load(&path)
}

fn load_prm(out: &Path, stage: &'static str) -> Result<PrmParams<f64>> {
    let path = out.join(PRM_CKPT);
    if !path.exists() {
        return Err(LabError::MissingCheckpoint {
            stage,
            path: path.display().to_string(),
        });
    }
    PrmParams::load(&path)
}

/// Stage entry points shared by the CLI and [`run_pipeline`]. Each reads its
/// inputs from `out` and writes its checkpoint and metrics there.
pub struct Runner {
    pub lab: Lab,
    pub out: PathBuf,
    pub log: MetricsLog,
}

impl Runner {
    pub fn new(cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let lab = Lab::new(cfg).stage("gen-world")?;
        Ok(Self {
            lab,
            out: out.to_path_buf(),
            log: MetricsLog::new(),
        })
    }

    pub fn gen_world(&mut self) -> Result<()> {
        self.lab.write_world(&self.out).stage("gen-world")?;
        let lab = &self.lab;
        self.log.push(0, "world_facts", lab.world.facts.len() as f64)?;
        self.log.push(0, "train_queries", lab.train.len() as f64)?;
        self.log.push(0, "eval_queries", lab.eval.len() as f64)
    }

    pub fn sft(&mut self) -> Result<Params> {
        let r = self.lab.sft().stage("sft")?;
        r.params.save(&self.out.join(SFT_CKPT)).stage("sft")?;
        write_curve(&r.curve, io::create(&self.out.join("sft_curve.csv"))?)?;
        self.log
            .push(1, "sft_final_loss", r.curve.last().map_or(f64::NAN, |c| c.loss))?;
        Ok(r.params)
    }

    pub fn search(&mut self) -> Result<Vec<PreferencePair>> {
        let sft = load_policy(&self.out, SFT_CKPT, "search")?;
        let s = self.lab.search(&sft).stage("search")?;
        write_pairs(&s.pairs, io::create(&self.out.join(PAIRS_FILE))?)?;
        let mut trees = io::create(&self.out.join("trees.jsonl"))?;
        for (i, t) in s.trees.iter().enumerate() {
            write_tree(t, i as u64, &mut trees)?;
        }
        std::io::Write::flush(&mut trees)?;
        self.log.push(2, "search_trees", s.trees.len() as f64)?;
        self.log.push(2, "sibling_pairs", s.pairs.len() as f64)?;
        Ok(s.pairs)
    }

    pub fn train_prm(&mut self) -> Result<PrmParams<f64>> {
        let path = self.out.join(PAIRS_FILE);
        if !path.exists() {
            return Err(LabError::MissingCheckpoint {
                stage: "train-prm",
                path: path.display().to_string(),
            });
        }
        let pairs = read_pairs(io::open(&path)?).stage("train-prm")?;
        let r = self.lab.train_prm(&pairs).stage("train-prm")?;
        r.params.save(&self.out.join(PRM_CKPT))?;
        crate::prm::write_curve(&r.curve, io::create(&self.out.join("prm_curve.csv"))?)?;
        self.log.push(3, "prm_heldout_acc", r.heldout_accuracy())?;
        Ok(r.params)
    }

    pub fn rft(&mut self) -> Result<Params> {
        let sft = load_policy(&self.out, SFT_CKPT, "rft")?;
        let prm = load_prm(&self.out, "rft")?;
        let r = self.lab.refine(&sft, &prm).stage("rft")?;
        r.training.params.save(&self.out.join(RFT_CKPT))?;
        write_retained(
            &self.lab.world,
            &r.retained,
            io::create(&self.out.join("rft_pairs.jsonl"))?,
        )?;
        write_curve(&r.training.curve, io::create(&self.out.join("rft_curve.csv"))?)?;
        self.log.push(4, "rft_candidates", r.candidates as f64)?;
        self.log.push(4, "rft_correct", r.correct as f64)?;
        self.log.push(4, "rft_retained", r.retained.len() as f64)?;
        Ok(r.training.params)
    }

    pub fn train_rl(&mut self) -> Result<Params> {
        let (file, stage_name) = match self.lab.cfg.stages.rl_init {
            RlInit::Rft => (RFT_CKPT, "train-rl"),
            RlInit::Sft => (SFT_CKPT, "train-rl"),
        };
        let init = load_policy(&self.out, file, stage_name)?;
        let prm = load_prm(&self.out, "train-rl")?;
        let rl = self.lab.cfg.rl;
        let r = self
            .lab
            .reinforce(&init, &prm, &rl, Some(&self.out))
            .stage("train-rl")?;
        r.params.save(&self.out.join(RL_CKPT))?;
        write_metrics(&r.metrics, io::create(&self.out.join("rl_metrics.csv"))?)?;
        self.log.push(5, "rl_final_reward", r.final_reward())?;
        Ok(r.params)
    }

    /// Evaluates every policy checkpoint present in the output directory.
    pub fn eval(&mut self) -> Result<Vec<StageEval>> {
        let mut rows = Vec::new();
        for (stage, file) in [("sft", SFT_CKPT), ("rft", RFT_CKPT), ("rl", RL_CKPT)] {
            let path = self.out.join(file);
            if !path.exists() {
                continue;
            }
            let p = PolicyParams::load(&path).stage("eval")?;
            let r = self.lab.evaluate(&p).stage("eval")?;
            rows.push(StageEval {
                stage: stage.to_string(),
                em: r.em,
                f1: r.f1,
                format_rate: r.format_rate,
            });
        }
        if rows.is_empty() {
            return Err(LabError::MissingCheckpoint {
                stage: "eval",
                path: self.out.join(SFT_CKPT).display().to_string(),
            });
        }
        io::write_csv(&self.out.join("eval.csv"), &rows)?;
        Ok(rows)
    }
}

/// Runs the enabled stages in order, reusing checkpoints on disk for
/// disabled ones, then evaluates every checkpoint.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineSummary> {
    let mut r = Runner::new(cfg, out)?;
    r.gen_world()?;
    let st = cfg.stages;
    if st.sft {
        r.sft()?;
    }
    if st.search {
        r.search()?;
    }
    if st.prm {
        r.train_prm()?;
    }
    if st.rft {
        r.rft()?;
    }
    if st.rl {
        r.train_rl()?;
    }
    let evals = r.eval()?;
    r.log.write_csv(&out.join("metrics.csv"))?;
    let text = summary_text(cfg, &r.log, &evals);
    io::write_text(&out.join("summary.txt"), &text)?;
    Ok(PipelineSummary {
        evals,
        metrics: r.log,
        text,
    })
}

fn summary_text(cfg: &ExperimentConfig, log: &MetricsLog, evals: &[StageEval]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}", cfg.seed);
    for m in log.records() {
        let _ = writeln!(s, "{:<18} {}", m.name, m.value);
    }
    let _ = writeln!(s, "\n{:<6} {:>8} {:>8} {:>8}", "stage", "em", "f1", "format");
    for e in evals {
        let _ = writeln!(s, "{:<6} {:>8.4} {:>8.4} {:>8.4}", e.stage, e.em, e.f1, e.format_rate);
    }
    s
}
