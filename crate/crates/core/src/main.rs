//! Batch front end. One subcommand per experiment; every run writes metrics
//! as CSV and JSON plus any produced checkpoints, prints a one-line summary,
//! and exits 0 on success, 2 on configuration errors, 3 on runtime failures.
//! Set SOUPLAB_LOG=debug for progress chatter on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use souplab::ckpt;
use souplab::config::{MeshSection, RunConfig};
use souplab::merge::{Checkpoint, MergeSpec};
use souplab::metrics;
use souplab::model::{init_params, BoundParams, ModelConfig, ParamMap};
use souplab::objectives::{bt_rm_loss, PrefKind};
use souplab::pipeline::{
    accuracy, collect_grads, make_toy_tasks, polish, toy_pipeline_config, train_pref, train_sft,
    AdamW, Example, PolishConfig, PrefExample, PrefRun, RunMetrics, SchedulePlan, SftRun,
    SoupConfig, TaskSpec,
};
use souplab::reward::{attach_head, pack_pairs, score_packing, PrefPair};
use souplab::shard::{backward_comm, layer_comm, overlap_schedule, total_bytes, MeshConfig};
use souplab::tabular::{
    max_row_tv, srpo_solve, total_variation, train_copg_offline, OfflineBatch, PolicyTable,
    PreferenceOracle,
};
use souplab::tensor::Graph;

#[derive(Parser)]
#[command(name = "souplab", version, about = "Desk-scale post-training laboratory")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for metrics and checkpoints
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config preset name
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised fine-tuning on the toy task mixture
    TrainSft,
    /// Preference optimization (DPO family) on synthetic pairs
    TrainPref,
    /// Bradley-Terry reward model on packed pairs
    TrainRm,
    /// Linear checkpoint merge
    Merge,
    /// Expert-soup experiment: experts, uniform merge, low-LR polish
    SoupExp,
    /// Best-of-N SFT plus offline/online preference rounds
    Polish,
    /// Tabular oracle experiments (offline CoPG optimality, self-refinement)
    Tabular,
    /// Communication cost model for a device mesh
    CostModel,
    /// Evaluate a checkpoint on the toy tasks
    Eval {
        /// Checkpoint file to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn log_enabled() -> bool {
    matches!(std::env::var("SOUPLAB_LOG").as_deref(), Ok("debug") | Ok("info"))
}

macro_rules! log {
    ($($arg:tt)*) => {
        if log_enabled() {
            eprintln!($($arg)*);
        }
    };
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(cfg_err)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(name) = &cli.preset {
        cfg.preset = Some(name.clone());
        if souplab::pipeline::preset(name).is_none() {
            return Err(cfg_err(format!("unknown preset {name:?}")));
        }
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(run_err)?;
    Ok(dir)
}

fn emit(metrics_: &RunMetrics, dir: &Path) -> Result<()> {
    metrics::emit(metrics_, dir, "metrics").map_err(run_err)
}

fn save_checkpoint(ckpt_: &Checkpoint, dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    ckpt::save(ckpt_, &path).map_err(run_err)?;
    Ok(path)
}

/// Small-step schedule: the preset (or explicit block) defines the shape and
/// optimizer constants; `steps` caps the run length for smoke-scale runs.
fn smoke_plan(cfg: &RunConfig, default_preset: &str, default_steps: usize) -> Result<SchedulePlan> {
    let mut local = cfg.clone();
    if local.preset.is_none() && local.hyperparameters.is_none() {
        local.preset = Some(default_preset.to_string());
    }
    if local.steps.is_none() {
        local.steps = Some(default_steps);
    }
    local.schedule().map_err(cfg_err)
}

fn cmd_train_sft(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    let examples: Vec<Example> =
        tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let plan = smoke_plan(cfg, "sft-multilingual", 10)?;
    let run = SftRun {
        examples: &examples,
        plan: plan.clone(),
        steps: plan.steps,
        batch_size: cfg.batch_size.unwrap_or(8),
        seed: cfg.seed,
        l2_to_reference: None,
    };
    let init = init_params(&model, cfg.seed);
    log!("train-sft: {} examples, {} steps", examples.len(), plan.steps);
    let (checkpoint, mut m) = train_sft(&model, &init, &run).map_err(run_err)?;
    for t in &tasks {
        let acc = accuracy(&model, &checkpoint.params, &t.eval).map_err(run_err)?;
        m.task_accuracy.insert(t.name.clone(), acc);
    }
    emit(&m, &dir)?;
    save_checkpoint(&checkpoint, &dir, "checkpoint.ckpt")?;
    let last = m.loss.last().copied().unwrap_or(f64::NAN);
    Ok(format!("train-sft: {} steps, final loss {last:.4}", plan.steps))
}

/// Synthetic preference pairs: the gold completion versus a corrupted one.
fn make_pref_pairs(tasks: &[TaskSpec], seed: u64) -> Vec<PrefExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
    let mut pairs = Vec::new();
    for t in tasks {
        for ex in t.train.iter().take(12) {
            let mut rejected = ex.completion.clone();
            let i = rng.gen_range(0..rejected.len());
            rejected[i] = souplab::pipeline::SYM_BASE
                + (rejected[i] - souplab::pipeline::SYM_BASE + 1 + rng.gen_range(0..6))
                    % souplab::pipeline::N_SYMS;
            pairs.push(PrefExample {
                prompt: ex.prompt.clone(),
                chosen: ex.completion.clone(),
                rejected,
            });
        }
    }
    pairs
}

fn cmd_train_pref(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    let pairs = make_pref_pairs(&tasks, cfg.seed);
    let plan = smoke_plan(cfg, "safety-ipo", 6)?;
    let resolved = {
        let mut local = cfg.clone();
        if local.preset.is_none() && local.hyperparameters.is_none() {
            local.preset = Some("safety-ipo".into());
        }
        local.resolve().map_err(cfg_err)?
    };
    let kind = match resolved.objective.as_str() {
        "dpo" => PrefKind::Dpo,
        "slic" => PrefKind::Slic,
        _ => PrefKind::Ipo,
    };
    let beta = cfg.beta.or(resolved.beta).unwrap_or(0.03);
    let reference = init_params(&model, cfg.seed);
    let run = PrefRun {
        pairs: &pairs,
        kind,
        beta,
        margin: 0.0,
        plan: plan.clone(),
        steps: plan.steps,
        batch_size: cfg.batch_size.unwrap_or(4),
        seed: cfg.seed,
        reference: &reference,
        sft_lambda: 0.0,
        l2_coefficient: 0.0,
    };
    log!("train-pref: {} pairs, beta {beta}", pairs.len());
    let (checkpoint, m) = train_pref(&model, &reference, &run).map_err(run_err)?;
    emit(&m, &dir)?;
    save_checkpoint(&checkpoint, &dir, "checkpoint.ckpt")?;
    let last = m.loss.last().copied().unwrap_or(f64::NAN);
    Ok(format!("train-pref: {} steps, final loss {last:.4}", plan.steps))
}

fn cmd_train_rm(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    let raw = make_pref_pairs(&tasks, cfg.seed);
    let pad = souplab::pipeline::TOK_PAD;
    let pairs: Vec<PrefPair> = raw
        .iter()
        .take(8)
        .enumerate()
        .map(|(id, p)| {
            let full = |c: &Vec<usize>| {
                let mut s = p.prompt.clone();
                s.extend_from_slice(c);
                s
            };
            PrefPair { id, chosen: full(&p.chosen), rejected: full(&p.rejected), label: 0.999 }
        })
        .collect();
    let packing = pack_pairs(&pairs, 4 * model.max_seq, pad).map_err(run_err)?;

    let mut params = init_params(&model, cfg.seed);
    attach_head(&mut params, &model, cfg.seed);
    let plan = smoke_plan(cfg, "rm-stage2", 5)?;
    let mut opt = AdamW::new(&plan);
    let mut m = RunMetrics::default();
    for step in 0..plan.steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, true).map_err(run_err)?;
        let scored = score_packing(&mut g, &bound, &model, &packing).map_err(run_err)?;
        let mut total: Option<usize> = None;
        for (pair_id, rc, rr, weight) in &scored {
            let l = bt_rm_loss(&mut g, *rc, *rr, pairs[*pair_id].label).map_err(run_err)?;
            let w = g.scale(l, *weight).map_err(run_err)?;
            total = Some(match total {
                None => w,
                Some(t) => g.add(t, w).map_err(run_err)?,
            });
        }
        let loss = total.ok_or_else(|| run_err("no pairs packed"))?;
        let loss_val = g.value(loss).item();
        m.loss.push(loss_val);
        let grads = g.backward(loss).map_err(run_err)?;
        let grad_map: BTreeMap<String, souplab::tensor::Tensor> =
            collect_grads(&bound, &grads, &params);
        let lr = souplab::pipeline::lr_value(&plan, step).map_err(run_err)?;
        opt.step(&mut params, &grad_map, lr);
        log!("train-rm step {step}: loss {loss_val:.4}");
    }
    let fills: Vec<f64> = packing.rows.iter().map(|r| r.fill()).collect();
    m.extra.insert("mean_fill".into(), fills.iter().sum::<f64>() / fills.len() as f64);
    m.extra.insert("n_rows".into(), packing.rows.len() as f64);
    emit(&m, &dir)?;
    save_checkpoint(&Checkpoint::new(params, "train-rm", plan.steps as u64), &dir, "checkpoint.ckpt")?;
    let last = m.loss.last().copied().unwrap_or(f64::NAN);
    Ok(format!("train-rm: {} pairs in {} rows, final loss {last:.4}", pairs.len(), packing.rows.len()))
}

fn cmd_merge(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let section = cfg
        .merge
        .as_ref()
        .ok_or_else(|| cfg_err("merge subcommand needs a [merge] section with inputs and weights"))?;
    // validate the weight sum before touching the input files so a bad
    // config fails fast with a field-level message
    let sum: f64 = section.weights.iter().sum();
    if (sum - 1.0).abs() > souplab::merge::WEIGHT_SUM_TOL {
        return Err(cfg_err(format!("merge.weights sum to {sum}, expected 1")));
    }
    let inputs: Vec<Checkpoint> = section
        .inputs
        .iter()
        .map(|p| ckpt::load(p).map_err(|e| run_err(format!("{}: {e}", p.display()))))
        .collect::<Result<_>>()?;
    let spec = MergeSpec::new(inputs.iter().collect(), section.weights.clone()).map_err(cfg_err)?;
    let merged = linear_named(&spec);
    let mut m = RunMetrics::default();
    m.extra.insert("n_inputs".into(), inputs.len() as f64);
    m.extra.insert("weight_sum".into(), sum);
    emit(&m, &dir)?;
    let path = save_checkpoint(&merged, &dir, "merged.ckpt")?;
    Ok(format!("merge: {} checkpoints -> {}", inputs.len(), path.display()))
}

fn linear_named(spec: &MergeSpec) -> Checkpoint {
    souplab::merge::linear_merge(spec)
}

fn cmd_soup_exp(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    // smoke-scale run; the long-form experiment lives in the test suite
    let scfg = SoupConfig {
        instruct_steps: cfg.steps.unwrap_or(40),
        expert_steps: cfg.steps.map(|s| s * 2).unwrap_or(60),
        polish_steps: cfg.steps.map(|s| s / 2).unwrap_or(20),
        batch_size: cfg.batch_size.unwrap_or(8),
        seed: cfg.seed,
        ..SoupConfig::default()
    };
    log!("soup-exp: {} tasks", tasks.len());
    let report = souplab::pipeline::expert_soup_experiment(&tasks, &model, &scfg).map_err(run_err)?;
    let mut m = RunMetrics::default();
    for (i, name) in report.task_names.iter().enumerate() {
        m.task_accuracy.insert(name.clone(), report.polished_accuracy[i]);
        m.extra.insert(format!("expert_accuracy.{name}"), report.expert_accuracy[i][i]);
        m.extra.insert(format!("soup_accuracy.{name}"), report.soup_accuracy[i]);
        m.extra.insert(format!("preservation.{name}"), report.preservation[i]);
    }
    emit(&m, &dir)?;
    save_checkpoint(&report.soup, &dir, "soup.ckpt")?;
    save_checkpoint(&report.polished, &dir, "polished.ckpt")?;
    let min_pres = report.preservation.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("soup-exp: {} tasks, min preservation {min_pres:.3}", tasks.len()))
}

fn cmd_polish(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    let task = &tasks[0];
    let gold: std::collections::HashMap<Vec<usize>, Vec<usize>> = task
        .train
        .iter()
        .chain(&task.eval)
        .map(|e| (e.prompt.clone(), e.completion.clone()))
        .collect();
    let prompts: Vec<(Vec<usize>, usize)> = task
        .train
        .iter()
        .take(16)
        .map(|e| (e.prompt.clone(), e.completion.len()))
        .collect();
    let heldout: Vec<(Vec<usize>, usize)> = task
        .eval
        .iter()
        .take(8)
        .map(|e| (e.prompt.clone(), e.completion.len()))
        .collect();
    let scorer = move |prompt: &[usize], completion: &[usize]| -> f64 {
        match gold.get(prompt) {
            Some(g) if g == completion => 1.0,
            _ => 0.0,
        }
    };
    let pcfg = PolishConfig {
        rounds: 1,
        steps_per_phase: cfg.steps.unwrap_or(6),
        batch_size: cfg.batch_size.unwrap_or(4),
        seed: cfg.seed,
        ..PolishConfig::default()
    };
    let init = init_params(&model, cfg.seed);
    log!("polish: {} prompts, {} held out", prompts.len(), heldout.len());
    let reports = polish(&model, &init, &prompts, &heldout, scorer, &pcfg).map_err(run_err)?;
    let mut m = RunMetrics::default();
    for r in &reports {
        m.extra.insert(format!("heldout.{}", r.name), r.heldout_score);
    }
    emit(&m, &dir)?;
    let last = reports.last().expect("polish returns at least one phase");
    save_checkpoint(&last.checkpoint, &dir, "polished.ckpt")?;
    Ok(format!("polish: {} phases, final held-out score {:.3}", reports.len(), last.heldout_score))
}

fn cmd_tabular(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, k) = (3, 4);
    let reference = PolicyTable::uniform(n, k);
    let beta = cfg.beta.unwrap_or(0.1);

    // offline CoPG against the closed-form KL-regularised optimum
    let rewards: Vec<Vec<f64>> =
        (0..n).map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let dataset: Vec<OfflineBatch> = (0..n)
        .map(|x| OfflineBatch {
            prompt: x,
            completions: (0..k).collect(),
            rewards: rewards[x].clone(),
        })
        .collect();
    let run = train_copg_offline(&dataset, &reference, beta, 4000, 0.5).map_err(run_err)?;
    let mut target = PolicyTable::uniform(n, k);
    for x in 0..n {
        let row = souplab::objectives::optimal_policy(&reference.probs_row(x), &rewards[x], beta)
            .map_err(run_err)?;
        for y in 0..k {
            target.logits[x * k + y] = row[y].ln();
        }
    }
    let tv_to_optimal = max_row_tv(&run.policy, &target);

    // self-refinement sanity probe under an indifferent preference oracle
    let pref = PreferenceOracle::indifferent(n, k);
    let sol = srpo_solve(&pref, &reference, beta.max(0.05), 1500, 0.5).map_err(run_err)?;
    let srpo_tv = (0..n)
        .map(|x| total_variation(&sol.pi.probs_row(x), &reference.probs_row(x)))
        .fold(0.0, f64::max);

    let mut m = RunMetrics::default();
    m.loss = run.loss_trace.iter().step_by(400).copied().collect();
    m.extra.insert("tv_to_optimal".into(), tv_to_optimal);
    m.extra.insert("srpo_tv_to_reference".into(), srpo_tv);
    m.extra.insert("srpo_objective".into(), sol.objective);
    emit(&m, &dir)?;
    Ok(format!("tabular: CoPG TV to optimum {tv_to_optimal:.2e}, SRPO TV to reference {srpo_tv:.2e}"))
}

fn cmd_cost_model(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let section = cfg.mesh.clone().unwrap_or(MeshSection { dp: 1, fsdp: 2, sp: 2, tp: 2 });
    let mesh = MeshConfig { dp: section.dp, fsdp: section.fsdp, sp: section.sp, tp: section.tp };
    souplab::shard::validate_mesh(&mesh, mesh.device_count()).map_err(cfg_err)?;
    let model = ModelConfig::toy();
    let (batch, seq, bytes) = (2, 16, 2);
    let forward = layer_comm(&model, &mesh, batch, seq, bytes).map_err(run_err)?;
    let backward = backward_comm(&forward);
    let schedule = overlap_schedule(&forward);
    let overlapped = schedule.iter().filter(|e| e.overlapped_with.is_some()).count();
    let mut m = RunMetrics::default();
    m.extra.insert("devices".into(), mesh.device_count() as f64);
    m.extra.insert("forward_bytes_per_layer".into(), total_bytes(&forward));
    m.extra.insert("backward_bytes_per_layer".into(), total_bytes(&backward));
    m.extra.insert("n_events".into(), forward.len() as f64);
    m.extra.insert("n_overlapped".into(), overlapped as f64);
    emit(&m, &dir)?;
    Ok(format!(
        "cost-model: mesh {}x{}x{}x{}, {} events, {:.0} forward bytes/layer",
        mesh.dp, mesh.fsdp, mesh.sp, mesh.tp, forward.len(), total_bytes(&forward)
    ))
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let dir = out_dir(cfg)?;
    let loaded = ckpt::load(checkpoint).map_err(run_err)?;
    let model = toy_pipeline_config();
    let tasks = make_toy_tasks(cfg.seed);
    // the RM head is not part of the decoder schema
    let mut params: ParamMap = loaded.params;
    params.remove(souplab::reward::RM_HEAD);
    let mut m = RunMetrics::default();
    let mut mean = 0.0;
    for t in &tasks {
        let acc = accuracy(&model, &params, &t.eval).map_err(run_err)?;
        m.task_accuracy.insert(t.name.clone(), acc);
        mean += acc;
    }
    mean /= tasks.len() as f64;
    emit(&m, &dir)?;
    Ok(format!("eval: mean accuracy {mean:.3} over {} tasks", tasks.len()))
}

fn dispatch(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::TrainSft => cmd_train_sft(&cfg),
        Command::TrainPref => cmd_train_pref(&cfg),
        Command::TrainRm => cmd_train_rm(&cfg),
        Command::Merge => cmd_merge(&cfg),
        Command::SoupExp => cmd_soup_exp(&cfg),
        Command::Polish => cmd_polish(&cfg),
        Command::Tabular => cmd_tabular(&cfg),
        Command::CostModel => cmd_cost_model(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
