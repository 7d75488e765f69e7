//! Config-driven pretraining, fine-tuning, evaluation and the lift-mode bench.

use std::path::Path;
use std::time::{Duration, Instant};

use liera_core::data::{generate, Dataset};
use liera_core::nn::{attach_adapters, budget_table, AdapterSet, BudgetTable, Model};
use liera_core::peft::{AdapterConfig, LiftMode};
use liera_core::rng::{derive_seed, Rng};
use liera_core::train::{self, EpochStats, Evaluation, Finetuner, TrainConfig, TrainLog};
use liera_core::DType;

use crate::config::{ExperimentConfig, Phase};
use crate::error::{LabError, LabResult};
use crate::io::{load_dataset, load_model, save_dataset, save_model};
use crate::report::{write_csv, RunRow, RUN_HEADER, SUMMARY_EPOCH};

const MODEL_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const ATTACH_STREAM: u64 = 3;

pub const TRAIN_FILE: &str = "train.lckp";
pub const VAL_FILE: &str = "val.lckp";

fn with_dtype(ds: Dataset, dtype: DType) -> Dataset {
    if ds.images.dtype() == dtype {
        ds
    } else {
        Dataset { images: ds.images.to_dtype(dtype), ..ds }
    }
}

/// Train and validation splits, read from `data_in` or generated from the task.
pub fn datasets(cfg: &ExperimentConfig) -> LabResult<(Dataset, Dataset)> {
    let (train, val) = match &cfg.data_in {
        Some(dir) => {
            let mut splits = Vec::with_capacity(2);
            for file in [TRAIN_FILE, VAL_FILE] {
                let path = dir.join(file);
                let (ds, task) = load_dataset(&path)?;
                if task != cfg.task {
                    return Err(LabError::config(format!("{} was generated for a different task", path.display())));
                }
                splits.push(ds);
            }
            let val = splits.pop().expect("two splits");
            (splits.pop().expect("two splits"), val)
        }
        None => generate(&cfg.task, cfg.n_train, cfg.n_val)?,
    };
    Ok((with_dtype(train, cfg.dtype), with_dtype(val, cfg.dtype)))
}

/// Writes `train.lckp` and `val.lckp` into `out_dir`.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> LabResult<(usize, usize)> {
    let (train, val) = generate(&cfg.task, cfg.n_train, cfg.n_val)?;
    save_dataset(&out_dir.join(TRAIN_FILE), &train, &cfg.task)?;
    save_dataset(&out_dir.join(VAL_FILE), &val, &cfg.task)?;
    Ok((train.len(), val.len()))
}

/// Everything a run produced, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<RunRow>,
    pub log: TrainLog,
    pub model: Model,
    pub adapters: Option<(AdapterSet, AdapterConfig)>,
    /// Evaluation of the starting point on the validation split.
    pub initial: Evaluation,
    pub budget: Option<BudgetTable>,
    pub wall_ms: u64,
    /// Measured time of each epoch, empty when wall time is not recorded.
    pub epoch_times: Vec<Duration>,
}

impl RunOutcome {
    pub fn final_val_acc(&self) -> f64 {
        self.log.epochs.last().map_or(self.initial.accuracy, |e| e.val_acc)
    }
}

struct RowTemplate {
    run_id: String,
    seed: u64,
    lift_mode: String,
    rank: usize,
    alpha: f64,
    trainable_params: usize,
    total_params: usize,
}

impl RowTemplate {
    fn row(&self, epoch: String, train_loss: f64, val_loss: f64, val_acc: f64, wall_ms: u64) -> RunRow {
        RunRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            lift_mode: self.lift_mode.clone(),
            rank: self.rank,
            alpha: self.alpha,
            trainable_params: self.trainable_params,
            total_params: self.total_params,
            epoch,
            train_loss,
            val_loss,
            val_acc,
            wall_ms,
        }
    }
}

/// Epoch callback that measures per-epoch wall time.
fn timed_rows<'a>(cfg: &'a ExperimentConfig, template: &'a RowTemplate, rows: &'a mut Vec<RunRow>) -> impl FnMut(&EpochStats) + 'a {
    let mut last = Instant::now();
    move |s: &EpochStats| {
        let now = Instant::now();
        let ms = if cfg.record_wall_time { (now - last).as_millis() as u64 } else { 0 };
        last = now;
        rows.push(template.row(s.epoch.to_string(), s.train_loss, s.val_loss, s.val_acc, ms));
    }
}

pub fn pretrain(cfg: &ExperimentConfig) -> LabResult<RunOutcome> {
    let (train, val) = datasets(cfg)?;
    let mut rng = Rng::new(derive_seed(cfg.seed, MODEL_STREAM));
    let mut model = Model::build(cfg.model, train.image_dims(), cfg.task.n_classes, cfg.dtype, &mut rng)?;
    let initial = train::evaluate(&model, None, &val, cfg.batch_size)?;
    let total = model.param_count();
    let template = RowTemplate {
        run_id: format!("pretrain-{}-seed{}", cfg.model.as_str(), cfg.seed),
        seed: cfg.seed,
        lift_mode: "none".into(),
        rank: 0,
        alpha: 0.0,
        trainable_params: total,
        total_params: total,
    };
    let mut rows = Vec::new();
    let start = Instant::now();
    let tc = cfg.train_config(derive_seed(cfg.seed, SHUFFLE_STREAM))?;
    let log = train::pretrain(&mut model, &train, &val, &tc, &mut timed_rows(cfg, &template, &mut rows))?;
    Ok(RunOutcome {
        rows,
        log,
        model,
        adapters: None,
        initial,
        budget: None,
        wall_ms: elapsed(cfg, start),
        epoch_times: Vec::new(),
    })
}

fn elapsed(cfg: &ExperimentConfig, start: Instant) -> u64 {
    if cfg.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn base_model(cfg: &ExperimentConfig) -> LabResult<Model> {
    let path = cfg
        .checkpoint_in
        .as_ref()
        .ok_or_else(|| LabError::config("checkpoint_in is required"))?;
    let mut model = load_model(path)?.model;
    if model.named_tensors().values().any(|t| t.dtype() != cfg.dtype) {
        return Err(LabError::config("checkpoint dtype differs from config dtype"));
    }
    model.freeze_all_base();
    Ok(model)
}

/// Fine-tunes fresh adapters on the model in `checkpoint_in`.
pub fn finetune(cfg: &ExperimentConfig) -> LabResult<RunOutcome> {
    let model = base_model(cfg)?;
    finetune_model(cfg, model)
}

pub fn finetune_model(cfg: &ExperimentConfig, model: Model) -> LabResult<RunOutcome> {
    let mut out = lockstep(std::slice::from_ref(cfg), &model)?;
    Ok(out.pop().expect("one run"))
}

/// Everything a fine-tune needs before its first epoch.
struct FinetuneJob {
    ac: AdapterConfig,
    train: Dataset,
    val: Dataset,
    set: AdapterSet,
    template: RowTemplate,
    initial: Evaluation,
    budget: BudgetTable,
    tc: TrainConfig,
}

fn prepare_finetune(cfg: &ExperimentConfig, model: &Model) -> LabResult<FinetuneJob> {
    let ac = cfg.adapter()?.clone();
    let (train, val) = datasets(cfg)?;
    let mut rng = Rng::new(derive_seed(cfg.seed, ATTACH_STREAM));
    let (set, _) = attach_adapters(model, &ac, &mut rng)?;
    let initial = train::evaluate(model, Some(&set), &val, cfg.batch_size)?;
    let budget = budget_table(model, &set);
    let template = RowTemplate {
        run_id: format!("finetune-{}-r{}-seed{}", ac.lift_mode.as_str(), ac.rank, cfg.seed),
        seed: cfg.seed,
        lift_mode: ac.lift_mode.as_str().into(),
        rank: ac.rank,
        alpha: ac.alpha,
        trainable_params: budget.trainable_total,
        total_params: budget.model_total,
    };
    let tc = cfg.train_config(derive_seed(cfg.seed, SHUFFLE_STREAM))?;
    Ok(FinetuneJob { ac, train, val, set, template, initial, budget, tc })
}

/// Fine-tunes one run per config on the same frozen model, advancing them
/// an epoch at a time and rotating which goes first. Slow drift in machine
/// speed then lands on every run alike, so their wall times are comparable.
fn lockstep(configs: &[ExperimentConfig], model: &Model) -> LabResult<Vec<RunOutcome>> {
    let jobs: Vec<FinetuneJob> = configs.iter().map(|c| prepare_finetune(c, model)).collect::<LabResult<_>>()?;
    let mut tuners: Vec<Finetuner> = jobs
        .iter()
        .map(|j| Finetuner::new(model, j.set.clone(), &j.train, &j.val, j.tc))
        .collect::<Result<_, _>>()?;
    let n = jobs.len();
    let mut rows = vec![Vec::new(); n];
    let mut times = vec![Vec::new(); n];
    let mut round = 0;
    while tuners.iter().any(|t| !t.is_done()) {
        for k in (0..n).map(|i| (i + round) % n) {
            if tuners[k].is_done() {
                continue;
            }
            let start = Instant::now();
            let s = tuners[k].run_epoch()?;
            let took = start.elapsed();
            times[k].push(took);
            let ms = if configs[k].record_wall_time { took.as_millis() as u64 } else { 0 };
            rows[k].push(jobs[k].template.row(s.epoch.to_string(), s.train_loss, s.val_loss, s.val_acc, ms));
        }
        round += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (((job, tuner), rows), (cfg, times)) in jobs.iter().zip(tuners).zip(rows).zip(configs.iter().zip(times)) {
        let (set, log) = tuner.into_parts();
        out.push(RunOutcome {
            rows,
            log,
            model: model.clone(),
            adapters: Some((set, job.ac.clone())),
            initial: job.initial,
            budget: Some(job.budget.clone()),
            wall_ms: if cfg.record_wall_time { times.iter().sum::<Duration>().as_millis() as u64 } else { 0 },
            epoch_times: if cfg.record_wall_time { times } else { Vec::new() },
        });
    }
    Ok(out)
}

/// Validation loss and accuracy of the checkpoint in `checkpoint_in`,
/// including its adapters when present.
pub fn eval(cfg: &ExperimentConfig) -> LabResult<(Evaluation, RunRow)> {
    let path = cfg
        .checkpoint_in
        .as_ref()
        .ok_or_else(|| LabError::config("checkpoint_in is required"))?;
    let loaded = load_model(path)?;
    let (_, val) = datasets(cfg)?;
    let adapters = loaded.adapters.as_ref().map(|(s, _)| s);
    let start = Instant::now();
    let ev = train::evaluate(&loaded.model, adapters, &val, cfg.batch_size)?;
    let total = loaded.model.param_count();
    let (mode, rank, alpha, trainable) = match &loaded.adapters {
        Some((set, ac)) => (ac.lift_mode.as_str(), ac.rank, ac.alpha, set.trainable_params()),
        None => ("none", 0, 0.0, total),
    };
    let template = RowTemplate {
        run_id: format!("eval-{mode}-seed{}", cfg.seed),
        seed: cfg.seed,
        lift_mode: mode.into(),
        rank,
        alpha,
        trainable_params: trainable,
        total_params: total,
    };
    let row = template.row("0".into(), f64::NAN, ev.loss, ev.accuracy, elapsed(cfg, start));
    Ok((ev, row))
}

/// Writes the checkpoint and report named in the config.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &RunOutcome) -> LabResult<()> {
    if let Some(path) = &cfg.checkpoint_out {
        let adapters = outcome.adapters.as_ref().map(|(s, c)| (s, c));
        save_model(path, &outcome.model, adapters)?;
    }
    if let Some(path) = &cfg.report_out {
        write_csv(path, &outcome.rows, &RUN_HEADER)?;
    }
    Ok(())
}

pub fn run_phase(cfg: &ExperimentConfig) -> LabResult<RunOutcome> {
    match cfg.phase {
        Phase::Pretrain => pretrain(cfg),
        Phase::Finetune => finetune(cfg),
    }
}

/// Result of one lift mode in the bench.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: LiftMode,
    pub rows: Vec<RunRow>,
    pub final_val_acc: f64,
    pub trainable_params: usize,
    /// Sum over epochs of the fastest time each epoch took across repeats.
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub modes: Vec<ModeResult>,
}

impl BenchOutcome {
    pub fn get(&self, mode: LiftMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Per-epoch rows of every mode followed by one summary row per mode.
    pub fn rows(&self) -> Vec<RunRow> {
        let mut out: Vec<RunRow> = self.modes.iter().flat_map(|m| m.rows.iter().cloned()).collect();
        for m in &self.modes {
            let last = m.rows.last().expect("at least one epoch");
            out.push(RunRow {
                epoch: SUMMARY_EPOCH.into(),
                wall_ms: m.wall_ms,
                ..last.clone()
            });
        }
        out
    }
}

/// Worker cap from `LIERA_LAB_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("LIERA_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

fn mode_config(cfg: &ExperimentConfig, mode: LiftMode) -> LabResult<ExperimentConfig> {
    let mut c = cfg.clone();
    let mut ac = cfg.adapter()?.clone();
    ac.lift_mode = mode;
    c.adapter = Some(ac);
    c.phase = Phase::Finetune;
    Ok(c)
}

/// Identical fine-tunes that differ only in lift mode. Sequential benches
/// interleave the modes epoch by epoch. With `repeats > 1` every epoch is
/// timed by its fastest repeat, and every repeat must reproduce the same
/// accuracies.
pub fn bench(cfg: &ExperimentConfig, modes: &[LiftMode], repeats: usize, parallel: bool) -> LabResult<BenchOutcome> {
    if modes.is_empty() || repeats == 0 {
        return Err(LabError::config("bench needs at least one mode and one repeat"));
    }
    let model = base_model(cfg)?;
    let configs: Vec<ExperimentConfig> = modes.iter().map(|&m| mode_config(cfg, m)).collect::<LabResult<_>>()?;
    let mut results: Vec<Option<ModeResult>> = vec![None; modes.len()];
    let mut best: Vec<Vec<Duration>> = vec![Vec::new(); modes.len()];
    for _ in 0..repeats {
        let outcomes: Vec<LabResult<RunOutcome>> = if parallel {
            run_parallel(&configs, &model)
        } else {
            vec![lockstep(&configs, &model)?].into_iter().flatten().map(Ok).collect()
        };
        for (k, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            if best[k].is_empty() {
                best[k] = o.epoch_times.clone();
            } else {
                for (b, t) in best[k].iter_mut().zip(&o.epoch_times) {
                    *b = (*b).min(*t);
                }
            }
            match &results[k] {
                None => {
                    results[k] = Some(ModeResult {
                        mode: modes[k],
                        final_val_acc: o.final_val_acc(),
                        trainable_params: o.budget.as_ref().map_or(0, |b| b.trainable_total),
                        wall_ms: 0,
                        rows: o.rows,
                    })
                }
                Some(prev) if prev.final_val_acc.to_bits() != o.final_val_acc().to_bits() => {
                    return Err(LabError::Verify(format!("{} is not reproducible across repeats", modes[k])));
                }
                Some(_) => {}
            }
        }
    }
    for (r, times) in results.iter_mut().zip(&best) {
        let r = r.as_mut().expect("filled");
        for (row, t) in r.rows.iter_mut().zip(times) {
            row.wall_ms = t.as_millis() as u64;
        }
        r.wall_ms = times.iter().sum::<Duration>().as_millis() as u64;
    }
    let outcome = BenchOutcome { modes: results.into_iter().map(|r| r.expect("filled")).collect() };
    if let (Some(a), Some(t)) = (outcome.get(LiftMode::Additive), outcome.get(LiftMode::LieTaylor)) {
        if a.trainable_params != t.trainable_params {
            return Err(LabError::Verify(format!(
                "trainable budgets differ: additive {} vs lie_taylor {}",
                a.trainable_params, t.trainable_params
            )));
        }
    }
    Ok(outcome)
}

fn run_parallel(configs: &[ExperimentConfig], model: &Model) -> Vec<LabResult<RunOutcome>> {
    let cap = thread_cap().max(1);
    let mut out = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(cap) {
        let part: Vec<LabResult<RunOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| finetune_model(c, model.clone()))).collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        });
        out.extend(part);
    }
    out
}
