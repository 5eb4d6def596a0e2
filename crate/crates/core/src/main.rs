//! Command-line front end: run one kernel, sweep machine granularities,
//! compare schemes, train or query the scalability predictor, and expand a
//! saved run report into CSV files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fusesim::config::{GpuConfig, Scheme};
use fusesim::harness::{
    self, compare_schemes, run_spec, sweep_scaling, RunReport,
};
use fusesim::predictor::{
    accuracy, load_training_csv, train, MetricVector, PredictorModel, TrainConfig,
};
use fusesim::workload::{generate_kernel, load_kernel_file};

#[derive(Parser)]
#[command(
    name = "fusesim",
    about = "Cycle-approximate GPU simulator with runtime-fusable SMs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Platform configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Override the SM count.
    #[arg(long)]
    sm_count: Option<usize>,
    /// Replace the mesh with an ideal single-cycle interconnect.
    #[arg(long)]
    perfect_noc: bool,
    /// Predictor model JSON (built-in coefficients when omitted).
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<GpuConfig> {
        let mut cfg = match &self.config {
            Some(p) => GpuConfig::load_file(p)?,
            None => GpuConfig::default(),
        };
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(n) = self.sm_count {
            cfg.sm_count = n;
        }
        if self.perfect_noc {
            cfg.perfect_noc = true;
        }
        if let Some(m) = &self.model {
            cfg.model_path = Some(m.display().to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one kernel under the configured scheme.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Kernel spec JSON.
        #[arg(long)]
        kernel: PathBuf,
        /// Write the full run report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the kernel across SM counts at constant total resources.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kernel: PathBuf,
        /// Comma-separated SM counts, e.g. 16,25,36,64.
        #[arg(long, value_delimiter = ',', required = true)]
        sms: Vec<usize>,
        /// Resource budget in baseline SMs (defaults to the largest count).
        #[arg(long)]
        budget: Option<usize>,
        /// Write sweep points as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several schemes on one kernel and report speedups.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kernel: PathBuf,
        /// Comma-separated schemes (default: all five).
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<Scheme>,
        /// Write comparison rows as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit predictor coefficients from a labeled metrics CSV.
    Train {
        /// Training CSV: one column per metric plus `label`.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the fitted model JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 4000)]
        epochs: u32,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
    },
    /// Evaluate a model on one metric vector and explain the decision.
    Predict {
        /// Model JSON (built-in coefficients when omitted).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Metric vector JSON.
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Expand a saved run report into metrics/timeline/impact CSV files.
    Report {
        /// Run report JSON produced by `run --out`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for metrics.csv, timeline.csv, impact.csv.
        #[arg(long)]
        out: PathBuf,
        /// Model used for the impact decomposition (built-in when omitted).
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn load_model_opt(path: &Option<PathBuf>) -> anyhow::Result<PredictorModel> {
    Ok(match path {
        Some(p) => PredictorModel::load(p)?,
        None => PredictorModel::builtin(),
    })
}

fn print_report(r: &RunReport) {
    println!("kernel            {}", r.kernel);
    println!("scheme            {}", r.scheme);
    match r.decision {
        Some(d) => println!("decision          {d}"),
        None => println!("decision          -"),
    }
    if r.sampling_fallback {
        println!("sampling          fell back to scale-out (no issue observed)");
    }
    println!("total cycles      {}", r.total_cycles);
    println!("  sampling        {}", r.sample_cycles);
    println!("  reconfig cost   {}", r.reconfig_cost_applied);
    println!("thread instrs     {}", r.thread_instructions);
    println!("IPC               {:.4}", r.ipc);
    println!("CTAs completed    {}", r.completed_ctas);
    println!("L1D miss rate     {:.4}", r.l1d_miss_rate);
    println!("L1I miss rate     {:.4}", r.l1i_miss_rate);
    println!("actual access     {:.4}", r.actual_access_rate);
    println!("control stalls    {:.4}", r.control_stall_fraction);
    println!("SM idle           {:.4}", r.sm_idle_fraction);
    println!("ICNT stall rate   {:.4}", r.icnt_stall_rate);
    println!("NoC inject rate   {:.4}", r.noc_injection_rate);
    println!("NoC avg latency   {:.2}", r.avg_noc_latency);
    println!("splits / refuses  {} / {}", r.splits, r.refuses);
    println!("wall time         {:.1} ms", r.wall_ms);
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| path.display().to_string())?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { cfg, kernel, out } => {
            let cfg = cfg.load()?;
            let spec = load_kernel_file(&kernel)?;
            let report = run_spec(&cfg, &spec)?;
            print_report(&report);
            if let Some(path) = out {
                write_json(&report, &path)?;
                println!("report written    {}", path.display());
            }
        }
        Command::Sweep {
            cfg,
            kernel,
            sms,
            budget,
            out,
        } => {
            let cfg = cfg.load()?;
            let spec = load_kernel_file(&kernel)?;
            let points = sweep_scaling(&cfg, &spec, &sms, budget)?;
            println!("sm_count,simd_width,max_threads,l1d_kb,total_cycles,ipc,normalized_ipc");
            let mut csv = String::from(
                "sm_count,simd_width,max_threads,l1d_kb,total_cycles,ipc,normalized_ipc\n",
            );
            for p in &points {
                let row = format!(
                    "{},{},{},{},{},{},{}",
                    p.sm_count,
                    p.simd_width,
                    p.max_threads,
                    p.l1d_kb,
                    p.total_cycles,
                    p.ipc,
                    p.normalized_ipc
                );
                println!("{row}");
                csv.push_str(&row);
                csv.push('\n');
            }
            if let Some(path) = out {
                std::fs::write(&path, csv).with_context(|| path.display().to_string())?;
            }
        }
        Command::Compare {
            cfg,
            kernel,
            schemes,
            out,
        } => {
            let cfg = cfg.load()?;
            let spec = load_kernel_file(&kernel)?;
            let kernel = generate_kernel(&spec)?;
            let schemes = if schemes.is_empty() {
                Scheme::ALL.to_vec()
            } else {
                schemes
            };
            let rows = compare_schemes(&cfg, &kernel, &schemes)?;
            println!("scheme,total_cycles,ipc,speedup_vs_baseline,decision,splits,refuses");
            let mut csv = String::from(
                "scheme,total_cycles,ipc,speedup_vs_baseline,decision,splits,refuses\n",
            );
            for r in &rows {
                let decision = r
                    .decision
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "-".into());
                let row = format!(
                    "{},{},{},{},{},{},{}",
                    r.scheme,
                    r.total_cycles,
                    r.ipc,
                    r.speedup_vs_baseline,
                    decision,
                    r.splits,
                    r.refuses
                );
                println!("{row}");
                csv.push_str(&row);
                csv.push('\n');
            }
            if let Some(path) = out {
                std::fs::write(&path, csv).with_context(|| path.display().to_string())?;
            }
        }
        Command::Train {
            data,
            out,
            learning_rate,
            epochs,
            l2,
        } => {
            let samples = load_training_csv(&data)?;
            let model = train(
                &samples,
                &TrainConfig {
                    learning_rate,
                    epochs,
                    l2,
                },
            )?;
            let acc = accuracy(&model, &samples);
            model.save(&out)?;
            println!(
                "trained on {} samples, agreement {:.2}%, model written {}",
                samples.len(),
                acc * 100.0,
                out.display()
            );
        }
        Command::Predict { model, metrics } => {
            let model = load_model_opt(&model)?;
            let text = std::fs::read_to_string(&metrics)
                .with_context(|| metrics.display().to_string())?;
            let m: MetricVector = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", metrics.display()))?;
            let logit = model.logit(&m);
            let p = model.probability(&m);
            println!("decision     {}", model.predict_fuse(&m));
            println!("probability  {p:.6}");
            println!("logit        {logit:.6}");
            println!("{:<24}{:>14}", "feature", "contribution");
            for (name, contribution) in model.impact_magnitudes(&m) {
                println!("{name:<24}{contribution:>14.6}");
            }
        }
        Command::Report { input, out, model } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| input.display().to_string())?;
            let report: RunReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", input.display()))?;
            if !out.is_dir() {
                std::fs::create_dir_all(&out)
                    .with_context(|| out.display().to_string())?;
            }
            let model = load_model_opt(&model)?;
            harness::write_metrics_csv(&report, &out.join("metrics.csv"))?;
            harness::write_timeline_csv(&report, &out.join("timeline.csv"))?;
            harness::write_impact_csv(
                &model,
                report.sampled.as_ref(),
                &out.join("impact.csv"),
            )?;
            println!(
                "wrote {}/metrics.csv, timeline.csv, impact.csv",
                out.display()
            );
        }
    }
    Ok(())
}
