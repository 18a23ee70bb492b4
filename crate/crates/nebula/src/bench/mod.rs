//! Deterministic experiment runner.
//!
//! Each entry point reproduces one experiment shape — codec sweeps,
//! compression start-step sweeps, throughput comparisons, convergence
//! curves, gradient verification — and returns the result as an RFC-4180
//! CSV string plus a list of machine-checked invariants. Runs are seeded
//! simulations, so rerunning with the same config yields a byte-identical
//! CSV, and every row carries the config hash, seed, and code version.

use crate::codec::{CodecMethod, CodecSchedule};
use crate::netsim::LinkSpec;
use crate::orchestrator::config::Scenario;
use crate::orchestrator::scenario1::Scenario1Settings;
use crate::orchestrator::scenario2::Scenario2Settings;
use crate::orchestrator::{
    run_scenario1_sim, run_scenario1_sim_from, run_scenario2_sim, run_scenario2_sim_from,
    split_eval_accuracy, ExperimentConfig, ProtocolError, Scenario1Report,
};
use crate::toygrad::{
    gradcheck, Checkpoint, ElectraTrainer, ModelKind, OptimizerState, Seq2SeqTrainer, ToyModel,
    TranslationTask,
};
use crate::CODE_VERSION;

/// Evaluation batches behind every reported accuracy number.
pub const EVAL_BATCHES: u64 = 8;

/// One machine-checked property of a finished run.
#[derive(Debug, Clone)]
pub struct InvariantCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl InvariantCheck {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

/// CSV artifact plus the invariant verdicts that gate the exit code.
#[derive(Debug)]
pub struct BenchOutput {
    pub csv: String,
    pub checks: Vec<InvariantCheck>,
}

impl BenchOutput {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// A named list of codec schedules to run under one shared config.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub rows: Vec<(String, CodecSchedule)>,
    pub config: ExperimentConfig,
}

impl SweepPlan {
    /// The standard ten-row sweep: an uncompressed baseline, plain
    /// FP16 forward / INT8 backward, and FP16(SVD(ρ)) forward / INT8
    /// backward for ρ from 0.9 down to 0.2.
    pub fn table_sweep(config: ExperimentConfig) -> Self {
        let mut rows = vec![
            schedule_row(CodecSchedule::baseline()),
            schedule_row(CodecSchedule::new(CodecMethod::Fp16, CodecMethod::Int8, 0)),
        ];
        for rho in [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2] {
            rows.push(schedule_row(CodecSchedule::new(
                CodecMethod::fp16_svd(rho),
                CodecMethod::Int8,
                0,
            )));
        }
        Self { rows, config }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        for (i, (label, _)) in self.rows.iter().enumerate() {
            if self.rows[..i].iter().any(|(l, _)| l == label) {
                return Err(ProtocolError::Config(format!("duplicate sweep label {label:?}")));
            }
        }
        if self.rows.is_empty() {
            return Err(ProtocolError::Config("sweep plan has no rows".into()));
        }
        Ok(())
    }
}

fn schedule_row(schedule: CodecSchedule) -> (String, CodecSchedule) {
    let label = if schedule.forward == CodecMethod::Identity
        && schedule.backward == CodecMethod::Identity
    {
        "baseline".to_string()
    } else {
        format!("{}+{}", schedule.forward, schedule.backward)
    };
    (label, schedule)
}

/// Summary of one sweep row: one full split-training run under one codec
/// schedule.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub label: String,
    pub schedule: CodecSchedule,
    /// Per-step training loss; exactly one entry per step of the budget.
    pub losses: Vec<f64>,
    /// Held-out exact-match accuracy at the end of training, in percent.
    pub final_accuracy_pct: f64,
    pub mean_step_time_s: f64,
    pub total_sim_time_s: f64,
    /// Measured byte ratios (data bytes over the dense 32-bit baseline),
    /// averaged over the run's steps.
    pub fwd_measured_ratio: f64,
    pub bwd_measured_ratio: f64,
    /// The formula ratios for the same tensor shape, for side-by-side
    /// comparison with the measured column.
    pub fwd_nominal_ratio: f64,
    pub bwd_nominal_ratio: f64,
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
}

impl RunReport {
    pub fn total_bytes(&self) -> u64 {
        self.fwd_bytes + self.bwd_bytes
    }

    pub fn first_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs one schedule to completion and summarizes it.
pub fn run_report(
    cfg: &ExperimentConfig,
    label: &str,
    schedule: &CodecSchedule,
) -> Result<RunReport, ProtocolError> {
    let mut settings = Scenario2Settings::from_config(cfg)?;
    settings.schedule = schedule.clone();
    let report = run_scenario2_sim(&settings)?;

    let task = TranslationTask::new(cfg.model.vocab, settings.s2s.data_seed);
    let accuracy = split_eval_accuracy(
        &report.encoder,
        &report.decoder,
        &task,
        &settings.s2s,
        EVAL_BATCHES,
    )?;

    let steps = report.records.len().max(1) as f64;
    let (m, n) = (cfg.data.batch * cfg.data.len, cfg.model.dim);
    Ok(RunReport {
        label: label.to_string(),
        schedule: schedule.clone(),
        losses: report.records.iter().map(|r| r.train_loss).collect(),
        final_accuracy_pct: 100.0 * accuracy,
        mean_step_time_s: report.records.iter().map(|r| r.step_time_s).sum::<f64>() / steps,
        total_sim_time_s: report.total_sim_time_s(),
        fwd_measured_ratio: report.records.iter().map(|r| r.fwd_measured_ratio).sum::<f64>()
            / steps,
        bwd_measured_ratio: report.records.iter().map(|r| r.bwd_measured_ratio).sum::<f64>()
            / steps,
        fwd_nominal_ratio: schedule.forward.canonical()?.nominal_ratio(m, n),
        bwd_nominal_ratio: schedule.backward.canonical()?.nominal_ratio(m, n),
        fwd_bytes: report.fwd_bytes_total,
        bwd_bytes: report.bwd_bytes_total,
    })
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn csv_finish(wtr: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(wtr.into_inner().expect("flushing an in-memory csv cannot fail"))
        .expect("csv output is utf-8")
}

fn fmt_time(x: f64) -> String {
    format!("{x:.9}")
}

fn fmt_ratio(x: f64) -> String {
    format!("{x:.6}")
}

/// Runs `job(0..n)` across a worker pool sized to the host's parallelism and
/// returns the results in row order. On a single core the jobs run inline:
/// oversubscribing one core with a thread per row only adds scheduling stalls.
fn run_rows<T, F>(n: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = std::thread::available_parallelism()
        .map_or(1, std::num::NonZeroUsize::get)
        .min(n);
    if workers <= 1 {
        return (0..n).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut collected: Vec<(usize, T)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        out.push((i, job(i)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep row panicked"))
            .collect()
    });
    collected.sort_by_key(|&(i, _)| i);
    collected.into_iter().map(|(_, v)| v).collect()
}

/// Runs every schedule in the plan (rows in parallel where cores allow — each
/// is an isolated deterministic simulation) and assembles the codec-table
/// CSV. A row failure is recorded in its `error` column without aborting the
/// sweep.
pub fn run_sweep(plan: &SweepPlan) -> Result<BenchOutput, ProtocolError> {
    plan.validate()?;
    let results: Vec<Result<RunReport, ProtocolError>> = run_rows(plan.rows.len(), |i| {
        let (label, schedule) = &plan.rows[i];
        run_report(&plan.config, label, schedule)
    });

    let hash = plan.config.config_hash();
    let seed = plan.config.run.seed.to_string();
    let steps = plan.config.run.steps.to_string();
    let mut wtr = csv_writer();
    wtr.write_record([
        "label",
        "forward",
        "backward",
        "start_step",
        "steps",
        "seed",
        "config_hash",
        "code_version",
        "fwd_nominal_ratio",
        "fwd_measured_ratio",
        "bwd_nominal_ratio",
        "bwd_measured_ratio",
        "mean_step_time_s",
        "total_sim_time_s",
        "fwd_bytes",
        "bwd_bytes",
        "total_bytes",
        "first_loss",
        "final_loss",
        "final_accuracy_pct",
        "error",
    ])
    .expect("csv header");
    for ((label, schedule), result) in plan.rows.iter().zip(&results) {
        let head = [
            label.clone(),
            schedule.forward.to_string(),
            schedule.backward.to_string(),
            schedule.start_step.to_string(),
            steps.clone(),
            seed.clone(),
            hash.clone(),
            CODE_VERSION.to_string(),
        ];
        let tail = match result {
            Ok(r) => vec![
                fmt_ratio(r.fwd_nominal_ratio),
                fmt_ratio(r.fwd_measured_ratio),
                fmt_ratio(r.bwd_nominal_ratio),
                fmt_ratio(r.bwd_measured_ratio),
                fmt_time(r.mean_step_time_s),
                fmt_time(r.total_sim_time_s),
                r.fwd_bytes.to_string(),
                r.bwd_bytes.to_string(),
                r.total_bytes().to_string(),
                fmt_time(r.first_loss()),
                fmt_time(r.final_loss()),
                fmt_ratio(r.final_accuracy_pct),
                String::new(),
            ],
            Err(e) => {
                let mut t = vec![String::new(); 12];
                t.push(e.to_string());
                t
            }
        };
        let row: Vec<String> = head.into_iter().chain(tail).collect();
        wtr.write_record(&row).expect("csv row");
    }

    let mut checks = Vec::new();
    let failures: Vec<String> = plan
        .rows
        .iter()
        .zip(&results)
        .filter_map(|((l, _), r)| r.as_ref().err().map(|e| format!("{l}: {e}")))
        .collect();
    checks.push(InvariantCheck::new(
        "all sweep rows completed",
        failures.is_empty(),
        if failures.is_empty() { "ok".into() } else { failures.join("; ") },
    ));
    let ok: Vec<&RunReport> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    if let Some(base) = ok.iter().find(|r| {
        r.schedule.forward == CodecMethod::Identity
            && r.schedule.backward == CodecMethod::Identity
    }) {
        let exact = base.fwd_measured_ratio == 1.0 && base.bwd_measured_ratio == 1.0;
        checks.push(InvariantCheck::new(
            "baseline row reports ratio 1.00/1.00",
            exact,
            format!("{:.6}/{:.6}", base.fwd_measured_ratio, base.bwd_measured_ratio),
        ));
    }
    let ratios_ok = ok.iter().all(|r| {
        [
            r.fwd_measured_ratio,
            r.bwd_measured_ratio,
            r.fwd_nominal_ratio,
            r.bwd_nominal_ratio,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
    });
    checks.push(InvariantCheck::new(
        "ratios are positive and finite",
        ratios_ok,
        format!("{} rows", ok.len()),
    ));
    let mut monotone = true;
    let mut detail = String::from("ok");
    for a in &ok {
        for b in &ok {
            if a.total_bytes() < b.total_bytes() && a.total_sim_time_s >= b.total_sim_time_s {
                monotone = false;
                detail = format!(
                    "{} moved fewer bytes than {} but was not faster",
                    a.label, b.label
                );
            }
        }
    }
    checks.push(InvariantCheck::new(
        "simulated time decreases with bytes moved",
        monotone,
        detail,
    ));
    let lengths_ok = ok.iter().all(|r| r.losses.len() as u64 == plan.config.run.steps);
    checks.push(InvariantCheck::new(
        "loss series spans the step budget",
        lengths_ok,
        format!("{} steps each", plan.config.run.steps),
    ));

    Ok(BenchOutput { csv: csv_finish(wtr), checks })
}

/// Runs the config's schedule with each activation step in `start_steps`
/// (ascending) and reports accuracy and bytes saved against the
/// uncompressed baseline.
pub fn run_start_step_sweep(
    cfg: &ExperimentConfig,
    start_steps: &[u64],
) -> Result<BenchOutput, ProtocolError> {
    if start_steps.is_empty() {
        return Err(ProtocolError::Config("no start steps given".into()));
    }
    if start_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProtocolError::Config(
            "start steps must be strictly ascending".into(),
        ));
    }
    let base_schedule = cfg.schedule()?;
    let baseline = run_report(cfg, "baseline", &CodecSchedule::baseline())?;

    let rows: Vec<(u64, Result<RunReport, ProtocolError>)> = run_rows(start_steps.len(), |i| {
        let start = start_steps[i];
        let schedule = CodecSchedule::new(
            base_schedule.forward.clone(),
            base_schedule.backward.clone(),
            start,
        );
        let label = format!("from step {start}");
        (start, run_report(cfg, &label, &schedule))
    });

    let hash = cfg.config_hash();
    let seed = cfg.run.seed.to_string();
    let mut wtr = csv_writer();
    wtr.write_record([
        "label",
        "forward",
        "backward",
        "start_step",
        "steps",
        "seed",
        "config_hash",
        "code_version",
        "final_loss",
        "final_accuracy_pct",
        "total_bytes",
        "baseline_bytes",
        "bytes_saved",
        "error",
    ])
    .expect("csv header");
    for (start, result) in &rows {
        let head = [
            format!("from step {start}"),
            base_schedule.forward.to_string(),
            base_schedule.backward.to_string(),
            start.to_string(),
            cfg.run.steps.to_string(),
            seed.clone(),
            hash.clone(),
            CODE_VERSION.to_string(),
        ];
        let tail = match result {
            Ok(r) => vec![
                fmt_time(r.final_loss()),
                fmt_ratio(r.final_accuracy_pct),
                r.total_bytes().to_string(),
                baseline.total_bytes().to_string(),
                (baseline.total_bytes().saturating_sub(r.total_bytes())).to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut t = vec![String::new(); 5];
                t.push(e.to_string());
                t
            }
        };
        let row: Vec<String> = head.into_iter().chain(tail).collect();
        wtr.write_record(&row).expect("csv row");
    }

    let mut checks = Vec::new();
    let failures: Vec<String> = rows
        .iter()
        .filter_map(|(s, r)| r.as_ref().err().map(|e| format!("start {s}: {e}")))
        .collect();
    checks.push(InvariantCheck::new(
        "all start-step rows completed",
        failures.is_empty(),
        if failures.is_empty() { "ok".into() } else { failures.join("; ") },
    ));
    let ok: Vec<(u64, &RunReport)> =
        rows.iter().filter_map(|(s, r)| r.as_ref().ok().map(|r| (*s, r))).collect();
    let saved: Vec<u64> =
        ok.iter().map(|(_, r)| baseline.total_bytes().saturating_sub(r.total_bytes())).collect();
    let nonincreasing = saved.windows(2).all(|w| w[0] >= w[1]);
    checks.push(InvariantCheck::new(
        "bytes saved shrink as activation is delayed",
        nonincreasing,
        format!("{saved:?}"),
    ));
    for (start, r) in &ok {
        if *start >= cfg.run.steps {
            checks.push(InvariantCheck::new(
                format!("start {start} past the budget moves baseline bytes"),
                r.total_bytes() == baseline.total_bytes(),
                format!("{} vs {}", r.total_bytes(), baseline.total_bytes()),
            ));
        }
    }

    Ok(BenchOutput { csv: csv_finish(wtr), checks })
}

/// One throughput measurement row.
#[derive(Debug, Clone)]
struct ThroughputRow {
    block: &'static str,
    label: &'static str,
    preset: &'static str,
    n: usize,
    rounds: u64,
    wall_s: f64,
    micro_batches: u64,
}

impl ThroughputRow {
    fn total_per_s(&self) -> f64 {
        self.micro_batches as f64 / self.wall_s
    }

    fn per_sub_per_s(&self) -> f64 {
        self.total_per_s() / self.n as f64
    }
}

fn throughput_run(
    cfg: &ExperimentConfig,
    link: LinkSpec,
    n: usize,
    rounds: u64,
    t_g: f64,
    t_d: f64,
) -> Result<Scenario1Report, ProtocolError> {
    let mut settings = Scenario1Settings::from_config(cfg)?;
    settings.link = link;
    settings.n = n;
    settings.rounds = rounds;
    settings.t_g = t_g;
    settings.t_d = t_d;
    run_scenario1_sim(&settings)
}

/// Compares pre-training throughput across link presets and sub-worker
/// counts. The homogeneous block runs the same compute on an intra-cluster
/// fabric and on the 170 Mbit/s WAN; the heterogeneous block attaches 8 vs
/// 64 slow sub-workers to one fast generator. Throughput is reported under
/// both normalizations (total and per sub-worker).
pub fn run_throughput(cfg: &ExperimentConfig) -> Result<BenchOutput, ProtocolError> {
    // Homogeneous hardware: identical per-micro-batch compute on each side.
    let t_same = 0.06;
    let homo_rounds = 40;
    let intra = throughput_run(cfg, LinkSpec::local_fabric(), 1, homo_rounds, t_same, t_same)?;
    let inter = throughput_run(cfg, LinkSpec::wan_170(), 1, homo_rounds, t_same, t_same)?;

    // Heterogeneous hardware: slow sub-workers (70x the generator's
    // per-micro-batch time) attached n-to-1 to a fast generator.
    let (t_fast, t_slow) = (0.01, 0.7);
    let hetero_rounds = 20;
    let subs8 = throughput_run(cfg, LinkSpec::wan_170(), 8, hetero_rounds, t_fast, t_slow)?;
    let subs64 = throughput_run(cfg, LinkSpec::wan_170(), 64, hetero_rounds, t_fast, t_slow)?;

    let row = |block, label, preset, n: usize, rounds: u64, r: &Scenario1Report| ThroughputRow {
        block,
        label,
        preset,
        n,
        rounds,
        wall_s: r.g_elapsed_s.max(r.d_elapsed_s),
        micro_batches: rounds * n as u64,
    };
    let rows = [
        row("homogeneous", "intra-cluster", "local-fabric", 1, homo_rounds, &intra),
        row("homogeneous", "inter-cluster", "wan-170", 1, homo_rounds, &inter),
        row("heterogeneous", "8 sub-workers", "wan-170", 8, hetero_rounds, &subs8),
        row("heterogeneous", "64 sub-workers", "wan-170", 64, hetero_rounds, &subs64),
    ];

    // Each block is normalized to its first row.
    let refs = [&rows[0], &rows[0], &rows[2], &rows[2]];
    let hash = cfg.config_hash();
    let seed = cfg.run.seed.to_string();
    let mut wtr = csv_writer();
    wtr.write_record([
        "block",
        "label",
        "preset",
        "n",
        "rounds",
        "micro_batches",
        "wall_s",
        "throughput_per_s",
        "throughput_per_sub_per_s",
        "throughput_ratio",
        "per_sub_ratio",
        "seed",
        "config_hash",
        "code_version",
    ])
    .expect("csv header");
    for (r, reference) in rows.iter().zip(refs) {
        wtr.write_record([
            r.block.to_string(),
            r.label.to_string(),
            r.preset.to_string(),
            r.n.to_string(),
            r.rounds.to_string(),
            r.micro_batches.to_string(),
            fmt_time(r.wall_s),
            fmt_ratio(r.total_per_s()),
            fmt_ratio(r.per_sub_per_s()),
            fmt_ratio(r.total_per_s() / reference.total_per_s()),
            fmt_ratio(r.per_sub_per_s() / reference.per_sub_per_s()),
            seed.clone(),
            hash.clone(),
            CODE_VERSION.to_string(),
        ])
        .expect("csv row");
    }

    let inter_ratio = rows[1].total_per_s() / rows[0].total_per_s();
    let speedup = rows[3].total_per_s() / rows[2].total_per_s();
    let checks = vec![
        InvariantCheck::new("intra-cluster row normalizes to 1.0", true, "by construction"),
        InvariantCheck::new(
            "inter-cluster throughput ratio in (0.8, 1.0)",
            inter_ratio > 0.8 && inter_ratio < 1.0,
            fmt_ratio(inter_ratio),
        ),
        InvariantCheck::new(
            "64-sub vs 8-sub speedup in (4.0, 8.0)",
            speedup > 4.0 && speedup < 8.0,
            fmt_ratio(speedup),
        ),
    ];
    Ok(BenchOutput { csv: csv_finish(wtr), checks })
}

/// One row of a convergence curve.
struct CurvePoint {
    phase: &'static str,
    step: u64,
    total: f64,
    components: [Option<f64>; 3],
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Checkpoints a model through the binary format and restores it into a
/// freshly constructed copy, returning the restored pair. Exercises the
/// real save/load path (topology validation included) on every hot start.
fn roundtrip(
    model: &ToyModel,
    opt: &OptimizerState,
    step: u64,
) -> Result<(ToyModel, OptimizerState), ProtocolError> {
    let bytes = Checkpoint::capture(model, Some(opt), step).to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).map_err(ProtocolError::Train)?;
    let mut fresh = ToyModel::new(model.config);
    let mut fresh_opt = OptimizerState::new(&fresh, opt.hyper);
    restored.restore(&mut fresh, Some(&mut fresh_opt)).map_err(ProtocolError::Train)?;
    Ok((fresh, fresh_opt))
}

fn params_equal(a: &ToyModel, b: &ToyModel) -> bool {
    a.params.len() == b.params.len()
        && a.params
            .iter()
            .zip(&b.params)
            .all(|(x, y)| x.value.as_slice() == y.value.as_slice())
}

/// Runs the configured scenario's loss curve: `hot_start_steps` of
/// single-cluster training, a checkpoint/restore cycle, then the
/// configured number of steps over the simulated WAN. With zero hot-start
/// steps the whole run happens over the WAN from scratch.
pub fn run_convergence(
    cfg: &ExperimentConfig,
    hot_start_steps: u64,
) -> Result<BenchOutput, ProtocolError> {
    match cfg.run.scenario {
        Scenario::Scenario1 => convergence_scenario1(cfg, hot_start_steps),
        Scenario::Scenario2 => convergence_scenario2(cfg, hot_start_steps),
    }
}

fn convergence_scenario1(
    cfg: &ExperimentConfig,
    hot: u64,
) -> Result<BenchOutput, ProtocolError> {
    let electra = cfg.electra_config();
    let (lambda, gamma) = (electra.lambda, electra.gamma);
    let g_cfg = cfg.model_config(ModelKind::Generator, cfg.left_seed());
    let d_cfg = cfg.model_config(ModelKind::Discriminator, cfg.right_seed());
    let hyper = cfg.adam_hyper();

    let mut points = Vec::new();
    let mut checks = Vec::new();

    // Reference: the same trajectory in one process, for the transparency
    // check over the WAN segment.
    let mut reference = ElectraTrainer::new(g_cfg, d_cfg, hyper, hyper, electra);
    let mut reference_tail = Vec::new();
    for s in 0..hot + cfg.run.steps {
        let b = reference.step(s).map_err(ProtocolError::Train)?;
        if s >= hot {
            reference_tail.push(b.total());
        }
    }

    let (g_model, g_opt, d_model, d_opt) = if hot > 0 {
        let mut trainer = ElectraTrainer::new(g_cfg, d_cfg, hyper, hyper, electra);
        for s in 0..hot {
            let b = trainer.step(s).map_err(ProtocolError::Train)?;
            points.push(CurvePoint {
                phase: "intra",
                step: s,
                total: b.total(),
                components: [Some(b.generator), Some(b.rtd), Some(b.clm)],
            });
        }
        let (g_model, g_opt) = roundtrip(&trainer.generator, &trainer.g_opt, hot)?;
        let (d_model, d_opt) = roundtrip(&trainer.discriminator, &trainer.d_opt, hot)?;
        checks.push(InvariantCheck::new(
            "checkpoint roundtrip restores parameters bit-for-bit",
            params_equal(&g_model, &trainer.generator)
                && params_equal(&d_model, &trainer.discriminator),
            "generator and discriminator",
        ));
        (g_model, g_opt, d_model, d_opt)
    } else {
        let g_model = ToyModel::new(g_cfg);
        let g_opt = OptimizerState::new(&g_model, hyper);
        let d_model = ToyModel::new(d_cfg);
        let d_opt = OptimizerState::new(&d_model, hyper);
        (g_model, g_opt, d_model, d_opt)
    };

    // The WAN segment runs one micro-batch per round so its data stream
    // continues the single-cluster phase exactly.
    let mut settings = Scenario1Settings::from_config(cfg)?;
    settings.n = 1;
    settings.rounds = cfg.run.steps;
    let report = run_scenario1_sim_from(&settings, g_model, g_opt, d_model, d_opt, hot)?;
    for rec in &report.records {
        points.push(CurvePoint {
            phase: "wan",
            step: rec.round,
            total: rec.total(lambda, gamma),
            components: [Some(rec.generator_loss), Some(rec.rtd_loss), Some(rec.clm_loss)],
        });
    }

    checks.push(InvariantCheck::new(
        "pacing invariant holds over the WAN segment",
        report.pacing.pass(),
        format!("max divergence {}", report.pacing.max_divergence),
    ));
    let wan_totals: Vec<f64> =
        points.iter().filter(|p| p.phase == "wan").map(|p| p.total).collect();
    push_curve_checks(&mut checks, &points, &wan_totals, &reference_tail, hot);
    Ok(BenchOutput { csv: curve_csv(cfg, "scenario1", &points), checks })
}

fn convergence_scenario2(
    cfg: &ExperimentConfig,
    hot: u64,
) -> Result<BenchOutput, ProtocolError> {
    let s2s = cfg.seq2seq_config();
    let enc_cfg = cfg.model_config(ModelKind::Encoder, cfg.left_seed());
    let dec_cfg = cfg.model_config(ModelKind::Decoder, cfg.right_seed());
    let hyper = cfg.adam_hyper();
    let schedule = cfg.schedule()?;

    let mut points = Vec::new();
    let mut checks = Vec::new();

    let identity = schedule.forward == CodecMethod::Identity
        && schedule.backward == CodecMethod::Identity;
    // The unsplit reference trajectory is the expected curve only when the
    // wire is transparent (identity codecs); otherwise skip the pointwise
    // comparison.
    let mut reference_tail = Vec::new();
    if identity {
        let mut reference = Seq2SeqTrainer::new(enc_cfg, dec_cfg, hyper, hyper, s2s);
        for s in 0..hot + cfg.run.steps {
            let arts = reference.step(s).map_err(ProtocolError::Train)?;
            if s >= hot {
                reference_tail.push(arts.loss);
            }
        }
    }

    let (enc, enc_opt, dec, dec_opt) = if hot > 0 {
        let mut trainer = Seq2SeqTrainer::new(enc_cfg, dec_cfg, hyper, hyper, s2s);
        for s in 0..hot {
            let arts = trainer.step(s).map_err(ProtocolError::Train)?;
            points.push(CurvePoint {
                phase: "intra",
                step: s,
                total: arts.loss,
                components: [None; 3],
            });
        }
        let (enc, enc_opt) = roundtrip(&trainer.encoder, &trainer.enc_opt, hot)?;
        let (dec, dec_opt) = roundtrip(&trainer.decoder, &trainer.dec_opt, hot)?;
        checks.push(InvariantCheck::new(
            "checkpoint roundtrip restores parameters bit-for-bit",
            params_equal(&enc, &trainer.encoder) && params_equal(&dec, &trainer.decoder),
            "encoder and decoder",
        ));
        (enc, enc_opt, dec, dec_opt)
    } else {
        let enc = ToyModel::new(enc_cfg);
        let enc_opt = OptimizerState::new(&enc, hyper);
        let dec = ToyModel::new(dec_cfg);
        let dec_opt = OptimizerState::new(&dec, hyper);
        (enc, enc_opt, dec, dec_opt)
    };

    let mut settings = Scenario2Settings::from_config(cfg)?;
    settings.schedule = schedule;
    let report = run_scenario2_sim_from(&settings, enc, enc_opt, dec, dec_opt, hot)?;
    for rec in &report.records {
        points.push(CurvePoint {
            phase: "wan",
            step: rec.step,
            total: rec.train_loss,
            components: [None; 3],
        });
    }

    checks.push(InvariantCheck::new(
        "pacing invariant holds over the WAN segment",
        report.pacing.pass(),
        format!("max divergence {}", report.pacing.max_divergence),
    ));
    let wan_totals: Vec<f64> =
        points.iter().filter(|p| p.phase == "wan").map(|p| p.total).collect();
    push_curve_checks(&mut checks, &points, &wan_totals, &reference_tail, hot);
    Ok(BenchOutput { csv: curve_csv(cfg, "scenario2", &points), checks })
}

/// The convergence checks shared by both scenarios: the curve must end
/// below where it started, a hot start must not jump at the seam, and the
/// WAN segment must match the unsplit reference pointwise when one exists.
fn push_curve_checks(
    checks: &mut Vec<InvariantCheck>,
    points: &[CurvePoint],
    wan_totals: &[f64],
    reference_tail: &[f64],
    hot: u64,
) {
    if let (Some(first), Some(last)) = (points.first(), points.last()) {
        checks.push(InvariantCheck::new(
            "loss ends below its starting value",
            last.total < first.total,
            format!("{:.6} -> {:.6}", first.total, last.total),
        ));
    }
    if hot > 0 {
        let last_intra = points.iter().filter(|p| p.phase == "intra").last();
        let first_wan = points.iter().find(|p| p.phase == "wan");
        if let (Some(a), Some(b)) = (last_intra, first_wan) {
            let gap = relative_gap(b.total, a.total);
            checks.push(InvariantCheck::new(
                "no loss discontinuity over 5% at the hot-start seam",
                gap <= 0.05,
                format!("relative gap {gap:.6}"),
            ));
        }
    }
    if !reference_tail.is_empty() {
        let pointwise = wan_totals.len() == reference_tail.len()
            && wan_totals
                .iter()
                .zip(reference_tail)
                .all(|(a, b)| relative_gap(*a, *b) <= 1e-9);
        checks.push(InvariantCheck::new(
            "WAN segment matches the unsplit run pointwise (1e-9)",
            pointwise,
            format!("{} steps compared", wan_totals.len()),
        ));
    }
}

fn curve_csv(cfg: &ExperimentConfig, scenario: &str, points: &[CurvePoint]) -> String {
    let hash = cfg.config_hash();
    let seed = cfg.run.seed.to_string();
    let mut wtr = csv_writer();
    wtr.write_record([
        "scenario",
        "phase",
        "step",
        "total_loss",
        "generator_loss",
        "rtd_loss",
        "clm_loss",
        "seed",
        "config_hash",
        "code_version",
    ])
    .expect("csv header");
    for p in points {
        let comp = |c: Option<f64>| c.map(fmt_time).unwrap_or_default();
        wtr.write_record([
            scenario.to_string(),
            p.phase.to_string(),
            p.step.to_string(),
            fmt_time(p.total),
            comp(p.components[0]),
            comp(p.components[1]),
            comp(p.components[2]),
            seed.clone(),
            hash.clone(),
            CODE_VERSION.to_string(),
        ])
        .expect("csv row");
    }
    csv_finish(wtr)
}

/// Runs the finite-difference verification of every backward pass and
/// reports each as a CSV row.
pub fn run_grad_check(seed: u64) -> BenchOutput {
    let reports = gradcheck::run_standard_checks(seed);
    let mut wtr = csv_writer();
    wtr.write_record([
        "check",
        "coordinates",
        "worst_abs_diff",
        "failures",
        "pass",
        "seed",
        "code_version",
    ])
    .expect("csv header");
    let mut checks = Vec::new();
    for (name, report) in &reports {
        wtr.write_record([
            name.clone(),
            report.checked.to_string(),
            format!("{:.3e}", report.worst_abs),
            report.failures.len().to_string(),
            report.pass().to_string(),
            seed.to_string(),
            CODE_VERSION.to_string(),
        ])
        .expect("csv row");
        checks.push(InvariantCheck::new(
            name.clone(),
            report.pass(),
            format!("{} coordinates, worst {:.3e}", report.checked, report.worst_abs),
        ));
    }
    BenchOutput { csv: csv_finish(wtr), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(scenario: &str, steps: u64) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"
[run]
scenario = "{scenario}"
seed = 7
steps = {steps}

[model]
vocab = 10
dim = 8
layers = 1
max_len = 5
hidden = 16

[data]
batch = 4
len = 5
mask_fraction = 0.3

[codec]
forward = "FP16(SVD(0.5))"
backward = "INT8"

[optim]
lr = 3e-3
warmup = 5
"#
        ))
        .unwrap()
    }

    #[test]
    fn sweep_runs_all_rows_and_is_rerun_identical() {
        let cfg = tiny_config("scenario2", 4);
        let plan = SweepPlan {
            rows: vec![
                schedule_row(CodecSchedule::baseline()),
                schedule_row(CodecSchedule::new(CodecMethod::Fp16, CodecMethod::Int8, 0)),
                schedule_row(CodecSchedule::new(
                    CodecMethod::fp16_svd(0.5),
                    CodecMethod::Int8,
                    0,
                )),
            ],
            config: cfg,
        };
        let a = run_sweep(&plan).unwrap();
        assert!(a.all_pass(), "{:?}", a.checks);
        assert_eq!(a.csv.lines().count(), 4);
        let b = run_sweep(&plan).unwrap();
        assert_eq!(a.csv, b.csv);
        // Baseline row shows identical nominal and measured 1.0 columns.
        let base = a.csv.lines().nth(1).unwrap();
        assert!(base.starts_with("baseline,"), "{base}");
        assert!(base.contains("1.000000,1.000000,1.000000,1.000000"), "{base}");
    }

    #[test]
    fn sweep_rejects_duplicate_labels() {
        let cfg = tiny_config("scenario2", 2);
        let plan = SweepPlan {
            rows: vec![
                schedule_row(CodecSchedule::baseline()),
                schedule_row(CodecSchedule::baseline()),
            ],
            config: cfg,
        };
        assert!(matches!(run_sweep(&plan), Err(ProtocolError::Config(_))));
    }

    #[test]
    fn table_sweep_has_ten_unique_rows_with_a_baseline() {
        let plan = SweepPlan::table_sweep(tiny_config("scenario2", 2));
        assert_eq!(plan.rows.len(), 10);
        plan.validate().unwrap();
        assert_eq!(plan.rows[0].0, "baseline");
        assert_eq!(plan.rows[1].0, "FP16+INT8");
        assert_eq!(plan.rows[2].0, "FP16(SVD(0.9))+INT8");
        assert_eq!(plan.rows[9].0, "FP16(SVD(0.2))+INT8");
    }

    #[test]
    fn start_step_sweep_reports_shrinking_savings() {
        let cfg = tiny_config("scenario2", 6);
        let out = run_start_step_sweep(&cfg, &[0, 3, 6]).unwrap();
        assert!(out.all_pass(), "{:?}", out.checks);
        // The final-start row (past the budget) saves nothing.
        let last = out.csv.lines().last().unwrap();
        let fields: Vec<&str> = last.split(',').collect();
        assert_eq!(fields[fields.len() - 2], "0", "{last}");
        let err = run_start_step_sweep(&cfg, &[3, 0]).unwrap_err();
        assert!(matches!(err, ProtocolError::Config(_)));
    }

    #[test]
    fn throughput_brackets_hold() {
        let cfg = tiny_config("scenario1", 4);
        let out = run_throughput(&cfg).unwrap();
        assert!(out.all_pass(), "{:?}", out.checks);
        assert_eq!(out.csv.lines().count(), 5);
    }

    /// A configuration whose loss curve is smooth enough for the seam
    /// check: wide batches average out per-batch noise, and the schedule
    /// decays the rate before the checkpoint lands.
    fn smooth_config(scenario: &str, steps: u64) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"
[run]
scenario = "{scenario}"
seed = 7
steps = {steps}

[model]
vocab = 10
dim = 8
layers = 1
max_len = 8
hidden = 16

[data]
batch = 64
len = 8
mask_fraction = 0.3

[optim]
lr = 1e-3
warmup = 5
total = 40
"#
        ))
        .unwrap()
    }

    #[test]
    fn convergence_hot_start_has_no_seam_for_both_scenarios() {
        for scenario in ["scenario1", "scenario2"] {
            let cfg = smooth_config(scenario, 6);
            let out = run_convergence(&cfg, 20).unwrap();
            assert!(out.all_pass(), "{scenario}: {:?}", out.checks);
            assert!(
                out.checks.iter().any(|c| c.name.contains("seam")),
                "{scenario} missing seam check"
            );
            assert!(
                out.checks.iter().any(|c| c.name.contains("pointwise")),
                "{scenario} missing transparency check"
            );
            // 20 intra rows + 6 wan rows + header.
            assert_eq!(out.csv.lines().count(), 27, "{scenario}");
        }
    }

    #[test]
    fn convergence_rejects_a_mismatched_checkpoint() {
        let cfg = tiny_config("scenario2", 2);
        let enc = ToyModel::new(cfg.model_config(ModelKind::Encoder, 1));
        let opt = OptimizerState::new(&enc, cfg.adam_hyper());
        let ck = Checkpoint::capture(&enc, Some(&opt), 5);
        let mut other_cfg = cfg.model_config(ModelKind::Encoder, 1);
        other_cfg.dim = 6;
        let mut other = ToyModel::new(other_cfg);
        let mut other_opt = OptimizerState::new(&other, cfg.adam_hyper());
        let err = ck.restore(&mut other, Some(&mut other_opt)).unwrap_err();
        assert!(matches!(err, crate::toygrad::ToygradError::TopologyMismatch { .. }));
    }

    #[test]
    fn grad_check_passes_and_reports_rows() {
        let out = run_grad_check(11);
        assert!(out.all_pass(), "{:?}", out.checks);
        assert!(out.csv.lines().count() > 4);
    }
}
