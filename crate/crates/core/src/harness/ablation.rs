//! Multi-seed variant comparison, reward-weight sweep, and retrieval-depth sweep.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io;
use super::pipeline::Lab;
use crate::env::query::{gen_query_set, QueryInstance};
use crate::error::{Result, StageExt};
use crate::eval::evaluate;
use crate::prm::PrmParams;
use crate::rl::{RlConfig, RlOutcome};
use crate::seeds::rng;
use crate::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoRefinement,
    NoRl,
    SftPolicy,
    GrpoBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoRefinement,
        Variant::NoRl,
        Variant::SftPolicy,
        Variant::GrpoBaseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRefinement => "no_refinement",
            Variant::NoRl => "no_rl",
            Variant::SftPolicy => "sft",
            Variant::GrpoBaseline => "grpo_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub group: String,
    pub seed: u64,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub n: usize,
    pub em_mean: f64,
    pub em_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub threshold: f64,
    /// First iteration whose mean outcome reward reaches the threshold.
    pub iters_process: Option<usize>,
    pub iters_baseline: Option<usize>,
    pub final_process: f64,
    pub final_baseline: f64,
}

impl ConvergenceRow {
    pub fn process_faster(&self) -> bool {
        match (self.iters_process, self.iters_baseline) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub run: String,
    pub iteration: usize,
    pub mean_r_out: f64,
    pub mean_r_step: f64,
    pub format_rate: f64,
    pub eval_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub variant_rows: Vec<SeedRow>,
    pub variants: Vec<AggregateRow>,
    pub beta_rows: Vec<SeedRow>,
    pub betas: Vec<AggregateRow>,
    pub convergence: Vec<ConvergenceRow>,
    pub curves: Vec<CurveRow>,
    pub prm_accuracy: Vec<f64>,
}

impl AblationReport {
    pub fn mean_f1(&self, group: &str) -> Option<f64> {
        self.variants
            .iter()
            .chain(&self.betas)
            .find(|r| r.group == group)
            .map(|r| r.f1_mean)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        io::write_csv(&out.join("ablation.csv"), &self.variants)?;
        io::write_csv(&out.join("ablation_seeds.csv"), &self.variant_rows)?;
        io::write_csv(&out.join("beta_sweep.csv"), &self.betas)?;
        io::write_csv(&out.join("beta_sweep_seeds.csv"), &self.beta_rows)?;
        io::write_csv(&out.join("convergence.csv"), &self.convergence)?;
        io::write_csv(&out.join("learning_curves.csv"), &self.curves)?;
        io::write_text(&out.join("ablation.txt"), &self.text())
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let table = |s: &mut String, rows: &[AggregateRow]| {
            let _ = writeln!(s, "{:<16} {:>4} {:>15} {:>15}", "run", "n", "em", "f1");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<16} {:>4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4}",
                    r.group, r.n, r.em_mean, r.em_sd, r.f1_mean, r.f1_sd
                );
            }
        };
        table(&mut s, &self.variants);
        s.push('\n');
        table(&mut s, &self.betas);
        let _ = writeln!(
            s,
            "\n{:<6} {:>10} {:>10} {:>8} {:>8}",
            "seed", "it_proc", "it_base", "r_proc", "r_base"
        );
        for c in &self.convergence {
            let f = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{:<6} {:>10} {:>10} {:>8.4} {:>8.4}",
                c.seed,
                f(c.iters_process),
                f(c.iters_baseline),
                c.final_process,
                c.final_baseline
            );
        }
        s
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn aggregate(rows: &[SeedRow], order: &[String]) -> Vec<AggregateRow> {
    order
        .iter()
        .map(|g| {
            let sel: Vec<&SeedRow> = rows.iter().filter(|r| &r.group == g).collect();
            let (em_mean, em_sd) = mean_sd(&sel.iter().map(|r| r.em).collect::<Vec<_>>());
            let (f1_mean, f1_sd) = mean_sd(&sel.iter().map(|r| r.f1).collect::<Vec<_>>());
            AggregateRow {
                group: g.clone(),
                n: sel.len(),
                em_mean,
                em_sd,
                f1_mean,
                f1_sd,
            }
        })
        .collect()
}

/// Per-seed warmup, verifier and refinement artifacts shared by every variant.
pub struct SeedBase {
    pub lab: Lab,
    pub sft: Params,
    pub prm: PrmParams<f64>,
    pub prm_accuracy: f64,
    pub rft: Params,
}

pub fn prepare_seed(cfg: &ExperimentConfig) -> Result<SeedBase> {
    let lab = Lab::new(cfg).stage("ablate")?;
    let sft = lab.sft().stage("sft")?.params;
    let pairs = lab.search(&sft).stage("search")?.pairs;
    let prm = lab.train_prm(&pairs).stage("train-prm")?;
    let rft = lab.refine(&sft, &prm.params).stage("rft")?.training.params;
    Ok(SeedBase {
        lab,
        sft,
        prm_accuracy: prm.heldout_accuracy(),
        prm: prm.params,
        rft,
    })
}

fn curve_rows<'a>(seed: u64, run: &str, r: &'a RlOutcome<f64>) -> impl Iterator<Item = CurveRow> + 'a {
    let run = run.to_string();
    r.metrics.iter().map(move |m| CurveRow {
        seed,
        run: run.clone(),
        iteration: m.iteration,
        mean_r_out: m.mean_r_out,
        mean_r_step: m.mean_r_step,
        format_rate: m.format_rate,
        eval_f1: m.eval_f1,
    })
}

pub fn beta_label(beta: f64) -> String {
    format!("beta={beta}")
}

/// Runs every variant and every reward weight for `ablation.seeds`
/// consecutive master seeds starting at `cfg.seed`.
///
/// Variants: `Full` reinforces the refined policy at `rl.beta`;
/// `NoRefinement` reinforces the warmup policy at `rl.beta`; `NoRl` is the
/// refined policy; `SftPolicy` is the warmup policy; `GrpoBaseline`
/// reinforces the warmup policy at weight 0. The convergence comparison pits
/// `NoRefinement` against `GrpoBaseline`, which share their initial policy.
/// The weight sweep reinforces the refined policy.
pub fn run_ablations(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rep = AblationReport::default();
    let threshold = cfg.ablation.reward_threshold;
    for s in 0..cfg.ablation.seeds as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + s;
        let base = prepare_seed(&c)?;
        rep.prm_accuracy.push(base.prm_accuracy);
        let lab = &base.lab;
        let rl_at = |init: &Params, beta: f64| -> Result<RlOutcome<f64>> {
            let rl = RlConfig { beta, ..c.rl };
            lab.reinforce(init, &base.prm, &rl, None).stage("train-rl")
        };
        let row = |group: String, p: &Params, rows: &mut Vec<SeedRow>| -> Result<()> {
            let r = lab.evaluate(p).stage("eval")?;
            rows.push(SeedRow {
                group,
                seed: c.seed,
                em: r.em,
                f1: r.f1,
            });
            Ok(())
        };

        let mut beta_runs: Vec<(f64, RlOutcome<f64>)> = Vec::new();
        for &b in &cfg.ablation.betas {
            let r = rl_at(&base.rft, b)?;
            rep.curves.extend(curve_rows(c.seed, &beta_label(b), &r));
            row(beta_label(b), &r.params, &mut rep.beta_rows)?;
            beta_runs.push((b, r));
        }
        let full = match beta_runs.iter().find(|(b, _)| *b == c.rl.beta) {
            Some((_, r)) => r.params.clone(),
            None => rl_at(&base.rft, c.rl.beta)?.params,
        };
        let no_ref = rl_at(&base.sft, c.rl.beta)?;
        let grpo = rl_at(&base.sft, 0.0)?;
        rep.curves
            .extend(curve_rows(c.seed, Variant::NoRefinement.label(), &no_ref));
        rep.curves
            .extend(curve_rows(c.seed, Variant::GrpoBaseline.label(), &grpo));
        rep.convergence.push(ConvergenceRow {
            seed: c.seed,
            threshold,
            iters_process: no_ref.iterations_to(threshold),
            iters_baseline: grpo.iterations_to(threshold),
            final_process: no_ref.final_reward(),
            final_baseline: grpo.final_reward(),
        });
        for v in Variant::ALL {
            let p = match v {
                Variant::Full => &full,
                Variant::NoRefinement => &no_ref.params,
                Variant::NoRl => &base.rft,
                Variant::SftPolicy => &base.sft,
                Variant::GrpoBaseline => &grpo.params,
            };
            row(v.label().to_string(), p, &mut rep.variant_rows)?;
        }
    }
    let vorder: Vec<String> = Variant::ALL.iter().map(|v| v.label().to_string()).collect();
    rep.variants = aggregate(&rep.variant_rows, &vorder);
    let border: Vec<String> = cfg.ablation.betas.iter().map(|&b| beta_label(b)).collect();
    rep.betas = aggregate(&rep.beta_rows, &border);
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_docs: usize,
    pub hops: usize,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

/// Greedy evaluation of one policy at each retrieval depth in `k_grid`,
/// broken down by hop count.
pub fn sweep_retrieval(
    lab: &Lab,
    policy: &Params,
    queries: &[Arc<QueryInstance>],
    k_grid: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in k_grid {
        let r = evaluate(&lab.model, policy, &lab.world, queries, k, lab.cfg.policy.max_steps)?;
        for h in &r.per_hop {
            rows.push(SweepRow {
                k_docs: k,
                hops: h.hops,
                n: h.n,
                em: h.em,
                f1: h.f1,
            });
        }
    }
    Ok(rows)
}

/// Fresh questions at every hop depth up to the world's maximum, disjoint
/// from the training split.
pub fn sweep_queries(lab: &Lab, per_hop: usize) -> Result<Vec<Arc<QueryInstance>>> {
    let hops: Vec<usize> = (1..=lab.cfg.world.max_hops).collect();
    let exclude: HashSet<_> = lab.train.iter().map(|q| q.query_tokens.clone()).collect();
    let qs = gen_query_set(
        &lab.world,
        &hops,
        per_hop * hops.len(),
        &exclude,
        2_000_000,
        &mut rng(lab.cfg.seed, "sweep-queries", 0),
    )?;
    Ok(qs.into_iter().map(Arc::new).collect())
}
