//! The end-to-end steps behind the command-line tool: generate data, train
//! models, evaluate, adapt under shift, export traces and compare.
//!
//! Directory layout:
//!
//! ```text
//! data/   train/ test/ [shifted/]        VASF tasks + manifest.json
//! models/ <method>.vasp + .json, recon.vasp, <method>_train.csv
//! out/    results.csv traces.csv [tta_report.csv] comparison.csv ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    train_greedy_classifier, train_greedy_selection, GreedyConfig, GreedyKind, GreedyNet,
};
use crate::config::ExperimentConfig;
use crate::dataset::{read_dataset, write_dataset, Split, TaskDataset};
use crate::error::{Result, VasError};
use crate::eval::{
    divergence_csv, divergence_study, evaluate, shift_evaluate, traces_csv, Evaluation, Method,
    Models, ResultTable,
};
use crate::export::{export_heatmap, export_saliency};
use crate::policy::{SelectMode, VasPolicy};
use crate::recon::{ReconConfig, ReconHead};
use crate::synth::{for_split, generate_split};
use crate::train::{train_with_progress, train_with_recon, EpochLog, TrainLog};
use crate::tta::{tta_report_csv, TtaMode};

pub const RECON_FILE: &str = "recon.vasp";

pub fn model_path(dir: &Path, method: Method) -> PathBuf {
    dir.join(format!("{}.vasp", method.name()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(VasError::io(dir))?;
        }
    }
    fs::write(path, contents).map_err(VasError::io(path))
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub train: PathBuf,
    pub test: PathBuf,
    pub shifted: Option<PathBuf>,
}

/// Generates the train and test splits (and the shifted test split when the
/// config has one) under `out`.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<GeneratedData> {
    let synth = cfg.synth_config();
    let train = generate_split(&for_split(&synth, Split::Train), cfg.n_train, Split::Train)?;
    let test = generate_split(&for_split(&synth, Split::Test), cfg.n_test, Split::Test)?;
    let shifted = match cfg.shifted_synth_config()? {
        Some(s) => Some(generate_split(
            &for_split(&s, Split::Test),
            cfg.n_test,
            Split::Test,
        )?),
        None => None,
    };
    let paths = GeneratedData {
        train: write_dataset(&train, &out.join("train"))?,
        test: write_dataset(&test, &out.join("test"))?,
        shifted: shifted
            .map(|ds| write_dataset(&ds, &out.join("shifted")))
            .transpose()?,
    };
    Ok(paths)
}

fn dims(ds: &TaskDataset) -> Result<((usize, usize), usize)> {
    match (ds.grid_shape(), ds.feature_dim()) {
        (Some(g), Some(d)) => Ok((g, d)),
        _ => Err(VasError::Config("dataset is empty".into())),
    }
}

/// Trains every learned method listed in the config, saving models and
/// training logs under `out`.
pub fn train_models(
    cfg: &ExperimentConfig,
    train: &TaskDataset,
    out: &Path,
    mut progress: impl FnMut(Method, &EpochLog),
) -> Result<Models> {
    let (grid, d) = dims(train)?;
    let seeds = cfg.seeds();
    let tcfg = cfg.train_config();
    let mut models = Models::default();
    fs::create_dir_all(out).map_err(VasError::io(out))?;
    let save_log = |method: Method, log: &TrainLog| {
        write_file(
            &out.join(format!("{}_train.csv", method.name())),
            &log.to_csv(),
        )
    };
    for &method in &cfg.methods {
        let mut init = ChaCha8Rng::seed_from_u64(seeds.init);
        init.set_stream(method as u64);
        match method {
            Method::Random => {}
            Method::Vas | Method::VasNoRsb => {
                let mut pcfg = cfg.policy_config(grid, d);
                if method == Method::VasNoRsb {
                    pcfg = pcfg.without_budget_channel();
                }
                let mut policy = VasPolicy::new(pcfg, &mut init)?;
                let on_epoch = |e: &EpochLog| progress(method, e);
                let log = if method == Method::Vas && cfg.train_recon {
                    let mut recon = ReconHead::new(ReconConfig::for_net(policy.net()), &mut init);
                    let log = train_with_recon(&mut policy, &mut recon, train, &tcfg, on_epoch)?;
                    recon.save(&out.join(RECON_FILE))?;
                    models.recon = Some(recon);
                    log
                } else {
                    train_with_progress(&mut policy, train, &tcfg, on_epoch)?
                };
                policy.save(&model_path(out, method))?;
                save_log(method, &log)?;
                if method == Method::Vas {
                    models.vas = Some(policy);
                } else {
                    models.vas_no_rsb = Some(policy);
                }
            }
            Method::GreedySelect | Method::GreedyClass => {
                let pcfg = cfg.policy_config(grid, d);
                let kind = if method == Method::GreedySelect {
                    GreedyKind::Selection
                } else {
                    GreedyKind::Classification
                };
                let mut net = GreedyNet::new(GreedyConfig::matching(kind, &pcfg), &mut init)?;
                let log = match kind {
                    GreedyKind::Selection => train_greedy_selection(&mut net, train, &tcfg)?,
                    GreedyKind::Classification => train_greedy_classifier(&mut net, train, &tcfg)?,
                };
                net.save(&model_path(out, method))?;
                save_log(method, &log)?;
                if kind == GreedyKind::Selection {
                    models.greedy_select = Some(net);
                } else {
                    models.greedy_class = Some(net);
                }
            }
        }
    }
    Ok(models)
}

/// Loads the models the given methods need from `dir`.
pub fn load_models(dir: &Path, methods: &[Method], with_recon: bool) -> Result<Models> {
    let mut models = Models::default();
    for &method in methods {
        let path = model_path(dir, method);
        if method.is_learned() && !path.exists() {
            return Err(VasError::Config(format!(
                "missing checkpoint {} for method {method}",
                path.display()
            )));
        }
        match method {
            Method::Vas => models.vas = Some(VasPolicy::load(&path)?),
            Method::VasNoRsb => models.vas_no_rsb = Some(VasPolicy::load(&path)?),
            Method::GreedySelect => {
                models.greedy_select = Some(GreedyNet::load(&path, GreedyKind::Selection)?)
            }
            Method::GreedyClass => {
                models.greedy_class = Some(GreedyNet::load(&path, GreedyKind::Classification)?)
            }
            Method::Random => {}
        }
    }
    if with_recon {
        let path = dir.join(RECON_FILE);
        if !path.exists() {
            return Err(VasError::Config(format!(
                "ttt adaptation needs {}; train with train_recon = true",
                path.display()
            )));
        }
        models.recon = Some(ReconHead::load(&path)?);
    }
    Ok(models)
}

/// Evaluates the configured methods and writes `results.csv`, `traces.csv`
/// and, when adapting, `tta_report.csv`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    models: &Models,
    test: &TaskDataset,
    out: &Path,
) -> Result<Evaluation> {
    let tta = cfg.tta_config();
    let eval = evaluate(
        &cfg.methods,
        models,
        test,
        &cfg.budgets,
        &tta,
        cfg.seeds().eval,
    )?;
    write_file(&out.join("results.csv"), &eval.table.to_csv())?;
    write_file(&out.join("traces.csv"), &traces_csv(&eval.traces))?;
    if tta.mode != TtaMode::None {
        write_file(
            &out.join("tta_report.csv"),
            &tta_report_csv(&eval.tta_records),
        )?;
    }
    Ok(eval)
}

/// Shift protocol with already-trained models: writes `shift_results.csv`
/// and `tta_report.csv`.
pub fn run_adapt(
    cfg: &ExperimentConfig,
    models: &Models,
    unshifted: &TaskDataset,
    shifted: &TaskDataset,
    out: &Path,
) -> Result<ResultTable> {
    let policy = models.policy(Method::Vas)?;
    let (table, records) = shift_evaluate(
        policy,
        models.recon.as_ref(),
        unshifted,
        shifted,
        &cfg.tta_modes,
        &cfg.tta_config(),
        &cfg.budgets,
        cfg.seeds().eval,
    )?;
    write_file(&out.join("shift_results.csv"), &table.to_csv())?;
    write_file(&out.join("tta_report.csv"), &tta_report_csv(&records))?;
    Ok(table)
}

/// Heatmap and saliency exports for the first test task, sensitivity traces
/// for it under the configured intervention, and the force-success versus
/// force-failure divergence log over the first `trace_tasks` tasks.
pub fn run_trace(
    cfg: &ExperimentConfig,
    policy: &VasPolicy,
    test: &TaskDataset,
    out: &Path,
) -> Result<()> {
    let task = test
        .tasks
        .first()
        .ok_or_else(|| VasError::Config("dataset is empty".into()))?;
    let k = cfg.trace_k;
    let mut rng = crate::eval::eval_rng(cfg.seeds().eval, Method::Vas, k);
    let st = crate::eval::sensitivity_trace(
        policy,
        task,
        k,
        cfg.intervention,
        SelectMode::Argmax,
        &mut rng,
    )?;
    let stem = format!("{}_{}", task.id(), cfg.intervention.name());
    export_heatmap(&st.trace, task, &out.join(format!("{stem}_heatmap")))?;
    export_saliency(
        &st.trace,
        policy,
        task,
        &out.join(format!("{stem}_saliency")),
    )?;
    let json = serde_json::to_string_pretty(&st).expect("trace serialises");
    write_file(&out.join(format!("{stem}_trace.json")), &json)?;
    let n = cfg.trace_tasks.min(test.len());
    let records = divergence_study(policy, &test.tasks[..n], k)?;
    write_file(&out.join("divergence.csv"), &divergence_csv(&records))
}

/// Full comparison from scratch: generate, train, evaluate and write
/// `comparison.csv` with one column per method in fixed order.
pub fn compare(
    cfg: &ExperimentConfig,
    out: &Path,
    progress: impl FnMut(Method, &EpochLog),
) -> Result<Evaluation> {
    let data = generate_data(cfg, &out.join("data"))?;
    let train = read_dataset(&data.train)?;
    let test = read_dataset(&data.test)?;
    let models = train_models(cfg, &train, &out.join("models"), progress)?;
    let eval = run_eval(cfg, &models, &test, out)?;
    let order: Vec<&str> = Method::ALL
        .iter()
        .filter(|m| cfg.methods.contains(m))
        .map(|m| m.name())
        .collect();
    write_file(&out.join("comparison.csv"), &eval.table.to_wide_csv(&order))?;
    Ok(eval)
}
