//! Evaluation harness: running methods over test tasks, aggregating ESR,
//! the class-shift protocol and outcome-intervention traces.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{greedy_rollout, random_rollout, GreedyNet};
use crate::dataset::TaskDataset;
use crate::error::{Result, VasError};
use crate::policy::{masked_softmax, select_action, SelectMode, VasPolicy};
use crate::recon::ReconHead;
use crate::task::{self, initial_state, Task};
use crate::train::{check_finite, finish_trace, EpisodeTrace, StepRecord};
use crate::tta::{TtaConfig, TtaMode, TtaRecord, TtaSession};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vas,
    VasNoRsb,
    GreedySelect,
    GreedyClass,
    Random,
}

impl Method {
    /// Column order used by every comparison output.
    pub const ALL: [Method; 5] = [
        Method::Vas,
        Method::VasNoRsb,
        Method::GreedySelect,
        Method::GreedyClass,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vas => "vas",
            Method::VasNoRsb => "vas-no-rsb",
            Method::GreedySelect => "greedy-select",
            Method::GreedyClass => "greedy-class",
            Method::Random => "random",
        }
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u64
    }

    pub fn is_learned(self) -> bool {
        self != Method::Random
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| VasError::Config(format!("unknown method {s:?}")))
    }
}

/// The trained models a run can draw on.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub vas: Option<VasPolicy>,
    pub vas_no_rsb: Option<VasPolicy>,
    pub greedy_select: Option<GreedyNet>,
    pub greedy_class: Option<GreedyNet>,
    pub recon: Option<ReconHead>,
}

impl Models {
    fn missing(method: Method) -> VasError {
        VasError::Config(format!("no trained model for method {method}"))
    }

    pub fn policy(&self, method: Method) -> Result<&VasPolicy> {
        match method {
            Method::Vas => self.vas.as_ref(),
            Method::VasNoRsb => self.vas_no_rsb.as_ref(),
            _ => None,
        }
        .ok_or_else(|| Self::missing(method))
    }

    pub fn greedy(&self, method: Method) -> Result<&GreedyNet> {
        match method {
            Method::GreedySelect => self.greedy_select.as_ref(),
            Method::GreedyClass => self.greedy_class.as_ref(),
            _ => None,
        }
        .ok_or_else(|| Self::missing(method))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n_cells: usize,
    pub k: usize,
    pub mean_esr: f64,
    pub stderr: f64,
    pub n_tasks: usize,
}

impl ResultRow {
    /// Mean and standard error of ESR over the traces of tasks with targets.
    pub fn summarise(
        method: impl Into<String>,
        n_cells: usize,
        k: usize,
        traces: &[EpisodeTrace],
    ) -> Self {
        let values: Vec<f64> = traces
            .iter()
            .filter(|t| t.counts_for_esr())
            .map(|t| t.esr)
            .collect();
        let n = values.len();
        let mean = if n == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let stderr = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self {
            method: method.into(),
            n_cells,
            k,
            mean_esr: mean,
            stderr,
            n_tasks: n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,N,K,mean_esr,stderr,n_tasks\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method, r.n_cells, r.k, r.mean_esr, r.stderr, r.n_tasks
            )
            .unwrap();
        }
        out
    }

    pub fn get(&self, method: &str, k: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    /// One row per budget, one column per method in the given order.
    pub fn to_wide_csv(&self, methods: &[&str]) -> String {
        let mut budgets: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let mut out = String::from("K");
        for m in methods {
            write!(out, ",{m}").unwrap();
        }
        out.push('\n');
        for k in budgets {
            write!(out, "{k}").unwrap();
            for m in methods {
                match self.get(m, k) {
                    Some(r) => write!(out, ",{}", r.mean_esr).unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluation randomness for one (method, budget) cell of the grid.
pub fn eval_rng(seed: u64, method: Method, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((method.index() << 32) | k as u64);
    rng
}

/// Episodes of one method over a task stream, with adaptation when the
/// method is a search policy and `tta.mode` is not none.
pub fn run_method(
    method: Method,
    models: &Models,
    dataset: &TaskDataset,
    k: usize,
    tta: &TtaConfig,
    seed: u64,
) -> Result<(Vec<EpisodeTrace>, Vec<TtaRecord>)> {
    if let Some(n) = dataset.n_cells() {
        if k == 0 || k > n {
            return Err(VasError::InvalidBudget { k, n_cells: n });
        }
    }
    let mut rng = eval_rng(seed, method, k);
    let mut traces = Vec::with_capacity(dataset.len());
    let mut records = Vec::new();
    match method {
        Method::Random => {
            for t in &dataset.tasks {
                traces.push(random_rollout(t, k, &mut rng)?);
            }
        }
        Method::GreedySelect | Method::GreedyClass => {
            let net = models.greedy(method)?;
            for t in &dataset.tasks {
                traces.push(greedy_rollout(net, t, k)?);
            }
        }
        Method::Vas | Method::VasNoRsb => {
            let policy = models.policy(method)?.clone();
            let recon = if tta.mode == TtaMode::Ttt {
                models.recon.clone()
            } else {
                None
            };
            let mut session = TtaSession::new(
                policy,
                recon,
                TtaConfig {
                    seed,
                    ..tta.clone()
                },
            )?;
            for t in &dataset.tasks {
                let outcome = session.search(t, k, &mut rng)?;
                records.push(TtaRecord::new(tta.mode, &outcome));
                traces.push(outcome.trace);
            }
        }
    }
    Ok((traces, records))
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub table: ResultTable,
    /// Per (method, K) traces, in table row order.
    pub traces: Vec<(Method, usize, Vec<EpisodeTrace>)>,
    pub tta_records: Vec<TtaRecord>,
}

/// Runs every method at every budget over the dataset.
pub fn evaluate(
    methods: &[Method],
    models: &Models,
    dataset: &TaskDataset,
    budgets: &[usize],
    tta: &TtaConfig,
    seed: u64,
) -> Result<Evaluation> {
    let n = dataset
        .n_cells()
        .ok_or_else(|| VasError::Config("evaluation dataset is empty".into()))?;
    let mut eval = Evaluation::default();
    for &method in methods {
        for &k in budgets {
            let (traces, records) = run_method(method, models, dataset, k, tta, seed)?;
            eval.table
                .rows
                .push(ResultRow::summarise(method.name(), n, k, &traces));
            eval.tta_records.extend(records);
            eval.traces.push((method, k, traces));
        }
    }
    Ok(eval)
}

/// Per-episode trace CSV: one row per step with the full ψ′ vector.
pub fn traces_csv(traces: &[(Method, usize, Vec<EpisodeTrace>)]) -> String {
    let width = traces
        .iter()
        .flat_map(|(_, _, ts)| ts.first())
        .flat_map(|t| t.steps.first())
        .map(|s| s.distribution.len())
        .next()
        .unwrap_or(0);
    let mut out = String::from("method,K,task,step,cell,outcome");
    for j in 0..width {
        write!(out, ",p{j}").unwrap();
    }
    out.push('\n');
    for (method, k, ts) in traces {
        for t in ts {
            for s in &t.steps {
                write!(
                    out,
                    "{method},{k},{},{},{},{}",
                    t.task_id, s.step, s.cell, s.reward
                )
                .unwrap();
                for p in &s.distribution {
                    write!(out, ",{p}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Labels used for the rows of [`shift_evaluate`].
pub fn shift_label(mode: TtaMode, shifted: bool) -> String {
    if shifted {
        format!("vas-{}", mode.name())
    } else {
        format!("vas-{}-unshifted", mode.name())
    }
}

/// Evaluates the trained policy on the unshifted test tasks without
/// adaptation, then on the shifted tasks under each adaptation mode.
#[allow(clippy::too_many_arguments)]
pub fn shift_evaluate(
    policy: &VasPolicy,
    recon: Option<&ReconHead>,
    unshifted: &TaskDataset,
    shifted: &TaskDataset,
    modes: &[TtaMode],
    tta: &TtaConfig,
    budgets: &[usize],
    seed: u64,
) -> Result<(ResultTable, Vec<TtaRecord>)> {
    let models = Models {
        vas: Some(policy.clone()),
        recon: recon.cloned(),
        ..Models::default()
    };
    let n = shifted
        .n_cells()
        .ok_or_else(|| VasError::Config("shifted dataset is empty".into()))?;
    let mut table = ResultTable::default();
    let mut records = Vec::new();
    let plain = TtaConfig {
        mode: TtaMode::None,
        ..tta.clone()
    };
    for &k in budgets {
        let (traces, _) = run_method(Method::Vas, &models, unshifted, k, &plain, seed)?;
        table.rows.push(ResultRow::summarise(
            shift_label(TtaMode::None, false),
            n,
            k,
            &traces,
        ));
        for &mode in modes {
            let cfg = TtaConfig {
                mode,
                ..tta.clone()
            };
            let (traces, recs) = run_method(Method::Vas, &models, shifted, k, &cfg, seed)?;
            table
                .rows
                .push(ResultRow::summarise(shift_label(mode, true), n, k, &traces));
            records.extend(recs);
        }
    }
    Ok((table, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intervention {
    None,
    ForceSuccess,
    ForceFailure,
}

impl Intervention {
    pub fn name(self) -> &'static str {
        match self {
            Intervention::None => "none",
            Intervention::ForceSuccess => "force-success",
            Intervention::ForceFailure => "force-failure",
        }
    }
}

impl FromStr for Intervention {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Intervention::None,
            Intervention::ForceSuccess,
            Intervention::ForceFailure,
        ]
        .into_iter()
        .find(|i| i.name() == s.trim())
        .ok_or_else(|| VasError::Config(format!("unknown intervention {s:?}")))
    }
}

/// A rollout whose observations may be overridden. `trace` keeps the true
/// rewards; `observed` holds what the policy was shown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTrace {
    pub intervention: Intervention,
    pub trace: EpisodeTrace,
    pub observed: Vec<i8>,
}

pub fn sensitivity_trace<R: Rng + ?Sized>(
    policy: &VasPolicy,
    task: &Task,
    k: usize,
    intervention: Intervention,
    mode: SelectMode,
    rng: &mut R,
) -> Result<SensitivityTrace> {
    let enc = policy.prepare(task)?;
    let mut state = initial_state(task, k)?;
    let mut steps = Vec::with_capacity(k);
    let mut observed = Vec::with_capacity(k);
    for t in 0..k {
        let act = policy.forward(&enc, &state)?;
        check_finite(&act.logits, "policy logits", t)?;
        let psi = masked_softmax(&act.logits, &state)?;
        let cell = select_action(&psi, mode, rng)?;
        let reward = task::reward(task, cell)?;
        let shown = match intervention {
            Intervention::None => reward,
            Intervention::ForceSuccess => 1,
            Intervention::ForceFailure => -1,
        };
        steps.push(StepRecord {
            step: t,
            distribution: psi,
            cell,
            reward,
            remaining_budget: state.remaining_budget(),
        });
        observed.push(shown);
        state = state.with_outcome(cell, shown)?;
    }
    Ok(SensitivityTrace {
        intervention,
        trace: finish_trace(task, k, steps)?,
        observed,
    })
}

/// First step at which two traces query different cells.
pub fn first_divergence(a: &EpisodeTrace, b: &EpisodeTrace) -> Option<usize> {
    a.steps
        .iter()
        .zip(&b.steps)
        .position(|(x, y)| x.cell != y.cell)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub task_id: String,
    pub k: usize,
    pub same_first_query: bool,
    pub divergence_step: Option<usize>,
}

/// Force-success against force-failure rollouts (argmax) for each task.
pub fn divergence_study(
    policy: &VasPolicy,
    tasks: &[Task],
    k: usize,
) -> Result<Vec<DivergenceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    tasks
        .iter()
        .map(|t| {
            let s = sensitivity_trace(
                policy,
                t,
                k,
                Intervention::ForceSuccess,
                SelectMode::Argmax,
                &mut rng,
            )?;
            let f = sensitivity_trace(
                policy,
                t,
                k,
                Intervention::ForceFailure,
                SelectMode::Argmax,
                &mut rng,
            )?;
            Ok(DivergenceRecord {
                task_id: t.id().to_string(),
                k,
                same_first_query: s.trace.steps[0].cell == f.trace.steps[0].cell,
                divergence_step: first_divergence(&s.trace, &f.trace),
            })
        })
        .collect()
}

pub fn divergence_csv(records: &[DivergenceRecord]) -> String {
    let mut out = String::from("task,K,same_first_query,divergence_step\n");
    for r in records {
        let step = r.divergence_step.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.task_id, r.k, r.same_first_query, step).unwrap();
    }
    out
}
