//! Run orchestration. A run follows its scheme's control flow — sample on
//! the scale-out machine, consult the predictor, then either keep going or
//! restart fused (paying the reorganisation cost) — and condenses the
//! machine's counters into a serialisable report. Also home to scheme
//! comparison, resource-constant granularity sweeps, and CSV writers.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{GpuConfig, Scheme};
use crate::predictor::{Decision, MetricVector, PredictorModel};
use crate::reconfig::SplitPolicy;
use crate::sim::Gpu;
use crate::workload::{generate_kernel, Kernel, KernelSpec};
use crate::Error;

/// Hard ceiling that turns accidental deadlocks into loud errors.
pub const MAX_SIM_CYCLES: u64 = 500_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub cycle: u64,
    pub pair: usize,
    pub event: String,
}

/// Everything a finished run reports. Cycle totals include sampling and
/// reorganisation overhead, so IPC here is end-to-end delivered throughput.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    pub kernel: String,
    pub decision: Option<Decision>,
    pub sampled: Option<MetricVector>,
    pub sample_cycles: u64,
    pub sample_window_doublings: u32,
    /// Sampling saw no issued instruction even after every doubling, so the
    /// controller fell back to scale-out without consulting the model.
    pub sampling_fallback: bool,
    pub reconfig_cost_applied: u64,
    pub total_cycles: u64,
    pub thread_instructions: u64,
    pub ipc: f64,
    pub completed_ctas: u64,
    pub l1d_miss_rate: f64,
    pub l1i_miss_rate: f64,
    /// Post-coalescing cache transactions per lane access.
    pub actual_access_rate: f64,
    pub control_stall_fraction: f64,
    pub sm_idle_fraction: f64,
    /// Fraction of cycles some MC had a reply blocked out of the mesh.
    pub icnt_stall_rate: f64,
    /// Flits injected per live router per cycle.
    pub noc_injection_rate: f64,
    pub avg_noc_latency: f64,
    pub splits: u64,
    pub refuses: u64,
    pub timeline: Vec<TimelineEvent>,
    pub wall_ms: f64,
}

fn load_model(cfg: &GpuConfig) -> Result<PredictorModel, Error> {
    match &cfg.model_path {
        Some(p) => PredictorModel::load(Path::new(p)),
        None => Ok(PredictorModel::builtin()),
    }
}

struct SamplingOutcome {
    metrics: MetricVector,
    cycles: u64,
    doublings: u32,
    fallback: bool,
    kernel_finished: bool,
}

/// Runs the machine until the first CTA retires or the sampling window
/// (doubling while the machine has issued nothing) elapses.
fn sample_phase(gpu: &mut Gpu, cfg: &GpuConfig) -> SamplingOutcome {
    let mut window = cfg.sample_window.max(1);
    let mut doublings = 0u32;
    let mut fallback = false;
    loop {
        if gpu.done() {
            return SamplingOutcome {
                metrics: gpu.metric_vector(),
                cycles: gpu.cycle,
                doublings,
                fallback: false,
                kernel_finished: true,
            };
        }
        if gpu.first_cta_done_at.is_some() {
            break;
        }
        if gpu.cycle >= window {
            if gpu.totals().issued_instrs > 0 {
                break;
            }
            if doublings < cfg.sample_max_doublings {
                window *= 2;
                doublings += 1;
            } else {
                fallback = true;
                break;
            }
        }
        gpu.step();
    }
    SamplingOutcome {
        metrics: gpu.metric_vector(),
        cycles: gpu.cycle,
        doublings,
        fallback,
        kernel_finished: false,
    }
}

fn split_policy(scheme: Scheme) -> Option<SplitPolicy> {
    match scheme {
        Scheme::DirectSplit => Some(SplitPolicy::Direct),
        Scheme::WarpRegroup => Some(SplitPolicy::Regroup),
        _ => None,
    }
}

struct ReportCtx<'a> {
    cfg: &'a GpuConfig,
    kernel_name: &'a str,
    decision: Option<Decision>,
    sampled: Option<MetricVector>,
    sample_cycles: u64,
    doublings: u32,
    fallback: bool,
    cost: u64,
    /// Offset added to engine-local event cycles (sampling + cost).
    timeline_base: u64,
    /// FUSE events synthesised at the moment the decision applied.
    fuse_at: Option<u64>,
    started: Instant,
}

fn build_report(gpu: &Gpu, ctx: ReportCtx) -> RunReport {
    let t = gpu.totals();
    let total_cycles = ctx.timeline_base + gpu.cycle;
    let mut timeline: Vec<TimelineEvent> = Vec::new();
    if let Some(at) = ctx.fuse_at {
        for p in 0..gpu.pairs.len() {
            timeline.push(TimelineEvent {
                cycle: at,
                pair: p,
                event: "FUSE".into(),
            });
        }
    }
    for (cycle, pair, label) in gpu.event_log() {
        timeline.push(TimelineEvent {
            cycle: cycle + ctx.timeline_base,
            pair,
            event: label.into(),
        });
    }
    let splits = timeline.iter().filter(|e| e.event == "SPLIT").count() as u64;
    let refuses = timeline.iter().filter(|e| e.event == "REFUSE").count() as u64;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    RunReport {
        scheme: ctx.cfg.scheme.to_string(),
        kernel: ctx.kernel_name.to_string(),
        decision: ctx.decision,
        sampled: ctx.sampled,
        sample_cycles: ctx.sample_cycles,
        sample_window_doublings: ctx.doublings,
        sampling_fallback: ctx.fallback,
        reconfig_cost_applied: ctx.cost,
        total_cycles,
        thread_instructions: t.thread_instructions,
        ipc: ratio(t.thread_instructions as f64, total_cycles as f64),
        completed_ctas: t.completed_ctas,
        l1d_miss_rate: ratio(t.l1d.misses as f64, t.l1d.accesses as f64),
        l1i_miss_rate: ratio(t.l1i.misses as f64, t.l1i.accesses as f64),
        actual_access_rate: ratio(t.actual_accesses as f64, t.lane_mem_accesses as f64),
        control_stall_fraction: t.control_stall_fraction(),
        sm_idle_fraction: t.sm_idle_fraction(),
        icnt_stall_rate: ratio(
            t.mc_reply_stall_cycles as f64,
            (gpu.cycle * gpu.mcs.len() as u64) as f64,
        ),
        noc_injection_rate: ratio(
            t.noc_injected_flits as f64,
            (gpu.cycle * t.live_routers) as f64,
        ),
        avg_noc_latency: t.avg_noc_latency(),
        splits,
        refuses,
        timeline,
        wall_ms: ctx.started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Executes one kernel under the configured scheme and reports.
pub fn run(cfg: &GpuConfig, kernel: &Kernel) -> Result<RunReport, Error> {
    cfg.validate()?;
    let started = Instant::now();
    let name = kernel.spec.name.clone();
    match cfg.scheme {
        Scheme::Baseline => {
            let mut gpu = Gpu::new(cfg, kernel, false, None)?;
            gpu.run_to_completion(MAX_SIM_CYCLES)?;
            Ok(build_report(
                &gpu,
                ReportCtx {
                    cfg,
                    kernel_name: &name,
                    decision: None,
                    sampled: None,
                    sample_cycles: 0,
                    doublings: 0,
                    fallback: false,
                    cost: 0,
                    timeline_base: 0,
                    fuse_at: None,
                    started,
                },
            ))
        }
        Scheme::ScaleUp => {
            let mut gpu = Gpu::new(cfg, kernel, true, None)?;
            gpu.run_to_completion(MAX_SIM_CYCLES)?;
            Ok(build_report(
                &gpu,
                ReportCtx {
                    cfg,
                    kernel_name: &name,
                    decision: Some(Decision::ScaleUp),
                    sampled: None,
                    sample_cycles: 0,
                    doublings: 0,
                    fallback: false,
                    cost: 0,
                    timeline_base: 0,
                    fuse_at: Some(0),
                    started,
                },
            ))
        }
        Scheme::StaticFuse | Scheme::DirectSplit | Scheme::WarpRegroup => {
            let model = load_model(cfg)?;
            let mut base = Gpu::new(cfg, kernel, false, None)?;
            let sample = sample_phase(&mut base, cfg);
            if sample.kernel_finished {
                // The whole kernel fit inside the sampling window; record
                // what the model would have said and stop.
                let decision = Some(model.predict_fuse(&sample.metrics));
                return Ok(build_report(
                    &base,
                    ReportCtx {
                        cfg,
                        kernel_name: &name,
                        decision,
                        sampled: Some(sample.metrics),
                        sample_cycles: sample.cycles,
                        doublings: sample.doublings,
                        fallback: sample.fallback,
                        cost: 0,
                        timeline_base: 0,
                        fuse_at: None,
                        started,
                    },
                ));
            }
            let decision = if sample.fallback {
                Decision::ScaleOut
            } else {
                model.predict_fuse(&sample.metrics)
            };
            match decision {
                Decision::ScaleOut => {
                    // Keep the same machine running: sampling cost nothing.
                    base.run_to_completion(MAX_SIM_CYCLES)?;
                    Ok(build_report(
                        &base,
                        ReportCtx {
                            cfg,
                            kernel_name: &name,
                            decision: Some(decision),
                            sampled: Some(sample.metrics),
                            sample_cycles: sample.cycles,
                            doublings: sample.doublings,
                            fallback: sample.fallback,
                            cost: 0,
                            timeline_base: 0,
                            fuse_at: None,
                            started,
                        },
                    ))
                }
                Decision::ScaleUp => {
                    let cost = cfg.reconfig.reconfig_cost;
                    let mut fused =
                        Gpu::new(cfg, kernel, true, split_policy(cfg.scheme))?;
                    fused.run_to_completion(MAX_SIM_CYCLES)?;
                    let base_offset = sample.cycles + cost;
                    Ok(build_report(
                        &fused,
                        ReportCtx {
                            cfg,
                            kernel_name: &name,
                            decision: Some(decision),
                            sampled: Some(sample.metrics),
                            sample_cycles: sample.cycles,
                            doublings: sample.doublings,
                            fallback: sample.fallback,
                            cost,
                            timeline_base: base_offset,
                            fuse_at: Some(sample.cycles),
                            started,
                        },
                    ))
                }
            }
        }
    }
}

/// Generates the kernel for a spec and runs it (convenience used by the
/// CLI and bindings).
pub fn run_spec(cfg: &GpuConfig, spec: &KernelSpec) -> Result<RunReport, Error> {
    let kernel = generate_kernel(spec)?;
    run(cfg, &kernel)
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeComparison {
    pub scheme: String,
    pub total_cycles: u64,
    pub ipc: f64,
    pub speedup_vs_baseline: f64,
    pub decision: Option<Decision>,
    pub splits: u64,
    pub refuses: u64,
}

/// Runs each scheme on the same kernel; speedups anchor to baseline (which
/// is run regardless of whether it was requested).
pub fn compare_schemes(
    cfg: &GpuConfig,
    kernel: &Kernel,
    schemes: &[Scheme],
) -> Result<Vec<SchemeComparison>, Error> {
    let mut base_cfg = cfg.clone();
    base_cfg.scheme = Scheme::Baseline;
    let baseline = run(&base_cfg, kernel)?;
    let mut out = Vec::new();
    for &scheme in schemes {
        let report = if scheme == Scheme::Baseline {
            baseline.clone()
        } else {
            let mut c = cfg.clone();
            c.scheme = scheme;
            run(&c, kernel)?
        };
        out.push(SchemeComparison {
            scheme: scheme.to_string(),
            total_cycles: report.total_cycles,
            ipc: report.ipc,
            speedup_vs_baseline: baseline.total_cycles as f64
                / report.total_cycles as f64,
            decision: report.decision,
            splits: report.splits,
            refuses: report.refuses,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub sm_count: usize,
    pub simd_width: u32,
    pub max_threads: u32,
    pub l1d_kb: u32,
    pub total_cycles: u64,
    pub ipc: f64,
    pub normalized_ipc: f64,
}

fn scaled(v: u32, f: f64, floor: u32) -> u32 {
    ((v as f64 * f).round() as u32).max(floor)
}

/// Runs the same kernel across machine granularities while holding the
/// aggregate resource budget constant: per-core SIMD width, thread slots,
/// cache capacity, and MSHRs all scale by budget / sm_count. IPC is
/// normalised to the first point.
pub fn sweep_scaling(
    cfg: &GpuConfig,
    spec: &KernelSpec,
    sm_counts: &[usize],
    budget: Option<usize>,
) -> Result<Vec<SweepPoint>, Error> {
    if sm_counts.is_empty() {
        return Err(Error::Config("sweep needs at least one SM count".into()));
    }
    let kernel = generate_kernel(spec)?;
    let budget = budget.unwrap_or_else(|| *sm_counts.iter().max().unwrap());
    let mut out: Vec<SweepPoint> = Vec::new();
    for &n in sm_counts {
        if n == 0 {
            return Err(Error::Config("sweep SM count must be positive".into()));
        }
        let f = budget as f64 / n as f64;
        let mut c = cfg.clone();
        c.sm_count = n;
        c.sm.simd_width = scaled(cfg.sm.simd_width, f, 1);
        let threads = scaled(cfg.sm.max_threads, f, 32);
        c.sm.max_threads = (threads / 32).max(1) * 32;
        c.sm.max_ctas = scaled(cfg.sm.max_ctas, f, 1);
        c.sm.l1d_kb = scaled(cfg.sm.l1d_kb, f, 1);
        c.sm.l1i_kb = scaled(cfg.sm.l1i_kb, f, 1);
        c.sm.mshr_entries = scaled(cfg.sm.mshr_entries, f, 1);
        c.sm.registers = scaled(cfg.sm.registers, f, 1);
        let report = run(&c, &kernel)?;
        let normalized = match out.first() {
            Some(first) if first.ipc > 0.0 => report.ipc / first.ipc,
            _ => 1.0,
        };
        out.push(SweepPoint {
            sm_count: n,
            simd_width: c.sm.simd_width,
            max_threads: c.sm.max_threads,
            l1d_kb: c.sm.l1d_kb,
            total_cycles: report.total_cycles,
            ipc: report.ipc,
            normalized_ipc: normalized,
        });
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// metrics.csv: one `name,value` row per report scalar, then the sampled
/// feature vector (when the scheme sampled one) prefixed `sampled_`.
pub fn write_metrics_csv(report: &RunReport, path: &Path) -> Result<(), Error> {
    let mut rows: Vec<(String, f64)> = vec![
        ("total_cycles".into(), report.total_cycles as f64),
        ("thread_instructions".into(), report.thread_instructions as f64),
        ("ipc".into(), report.ipc),
        ("completed_ctas".into(), report.completed_ctas as f64),
        ("sample_cycles".into(), report.sample_cycles as f64),
        (
            "reconfig_cost_applied".into(),
            report.reconfig_cost_applied as f64,
        ),
        ("l1d_miss_rate".into(), report.l1d_miss_rate),
        ("l1i_miss_rate".into(), report.l1i_miss_rate),
        ("actual_access_rate".into(), report.actual_access_rate),
        (
            "control_stall_fraction".into(),
            report.control_stall_fraction,
        ),
        ("sm_idle_fraction".into(), report.sm_idle_fraction),
        ("icnt_stall_rate".into(), report.icnt_stall_rate),
        ("noc_injection_rate".into(), report.noc_injection_rate),
        ("avg_noc_latency".into(), report.avg_noc_latency),
        ("splits".into(), report.splits as f64),
        ("refuses".into(), report.refuses as f64),
    ];
    if let Some(m) = &report.sampled {
        for (name, value) in crate::predictor::METRIC_NAMES
            .iter()
            .zip(m.as_array().iter())
        {
            rows.push((format!("sampled_{name}"), *value));
        }
    }
    let mut text = String::from("metric,value\n");
    for (name, value) in rows {
        text.push_str(&format!("{name},{value}\n"));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// timeline.csv: `cycle,pair,event` rows; header only when nothing happened.
pub fn write_timeline_csv(report: &RunReport, path: &Path) -> Result<(), Error> {
    let mut text = String::from("cycle,pair,event\n");
    for e in &report.timeline {
        text.push_str(&format!("{},{},{}\n", e.cycle, e.pair, e.event));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// impact.csv: the decision decomposition. Rows appear in logit
/// accumulation order (constant first), so summing the `contribution`
/// column reproduces the logit exactly; header only when the run never
/// sampled. Returns the logit it wrote, if any.
pub fn write_impact_csv(
    model: &PredictorModel,
    sampled: Option<&MetricVector>,
    path: &Path,
) -> Result<Option<f64>, Error> {
    let mut text = String::from("feature,coefficient,value,contribution\n");
    let mut logit = None;
    if let Some(m) = sampled {
        let coef = model.coefficients.as_array();
        let vals = m.as_array();
        text.push_str(&format!("constant,{},1,{}\n", model.constant, model.constant));
        for i in 0..crate::predictor::METRIC_COUNT {
            text.push_str(&format!(
                "{},{},{},{}\n",
                crate::predictor::METRIC_NAMES[i],
                coef[i],
                vals[i],
                coef[i] * vals[i],
            ));
        }
        logit = Some(model.logit(m));
    }
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(logit)
}
