//! Python bindings: wraps the simulator's configuration, kernel spec,
//! predictor model, and run harness behind plain Python classes. All
//! fallible calls surface crate errors as ValueError.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fusesim::config::{self, Scheme};
use fusesim::harness;
use fusesim::predictor::{self, MetricVector, TrainConfig, METRIC_COUNT, METRIC_NAMES};
use fusesim::workload;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_scheme(s: &str) -> PyResult<Scheme> {
    s.parse::<Scheme>().map_err(err)
}

/// Synthetic kernel description. Construct with keyword arguments or from
/// a JSON file/string; every field is readable and writable.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct KernelSpec {
    inner: workload::KernelSpec,
}

#[pymethods]
impl KernelSpec {
    #[new]
    #[pyo3(signature = (
        name = "kernel".to_string(),
        cta_count = 64,
        warps_per_cta = 4,
        instructions_per_warp = 400,
        load_rate = 0.2,
        store_rate = 0.05,
        branch_rate = 0.1,
        branch_divergence_prob = 0.0,
        divergent_path_extra_insns = 8,
        access_stride_bytes = 128,
        access_footprint_bytes = 1 << 20,
        locality = 0.5,
        seed = 1,
        divergence_phase_len = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: String,
        cta_count: u32,
        warps_per_cta: u32,
        instructions_per_warp: u32,
        load_rate: f64,
        store_rate: f64,
        branch_rate: f64,
        branch_divergence_prob: f64,
        divergent_path_extra_insns: u32,
        access_stride_bytes: u64,
        access_footprint_bytes: u64,
        locality: f64,
        seed: u64,
        divergence_phase_len: Option<u32>,
    ) -> PyResult<Self> {
        let inner = workload::KernelSpec {
            name,
            cta_count,
            warps_per_cta,
            instructions_per_warp,
            load_rate,
            store_rate,
            branch_rate,
            branch_divergence_prob,
            divergent_path_extra_insns,
            access_stride_bytes,
            access_footprint_bytes,
            locality,
            seed,
            divergence_phase_len,
        };
        inner.validate().map_err(err)?;
        Ok(KernelSpec { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: workload::KernelSpec = serde_json::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(KernelSpec { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = workload::load_kernel_file(path.as_ref()).map_err(err)?;
        Ok(KernelSpec { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn cta_count(&self) -> u32 {
        self.inner.cta_count
    }

    #[getter]
    fn warps_per_cta(&self) -> u32 {
        self.inner.warps_per_cta
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "KernelSpec(name='{}', ctas={}, warps_per_cta={}, insns={})",
            self.inner.name,
            self.inner.cta_count,
            self.inner.warps_per_cta,
            self.inner.instructions_per_warp
        )
    }
}

/// Platform configuration. `GpuConfig()` is the full-size machine,
/// `GpuConfig.desk_scale()` the small one used by fast experiments.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct GpuConfig {
    inner: config::GpuConfig,
}

#[pymethods]
impl GpuConfig {
    #[new]
    #[pyo3(signature = (scheme = "baseline", sm_count = None, perfect_noc = false, model_path = None, seed = None))]
    fn new(
        scheme: &str,
        sm_count: Option<usize>,
        perfect_noc: bool,
        model_path: Option<String>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut inner = config::GpuConfig {
            scheme: parse_scheme(scheme)?,
            ..config::GpuConfig::default()
        };
        if let Some(n) = sm_count {
            inner.sm_count = n;
        }
        inner.perfect_noc = perfect_noc;
        inner.model_path = model_path;
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.validate().map_err(err)?;
        Ok(GpuConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (scheme = "baseline"))]
    fn desk_scale(scheme: &str) -> PyResult<Self> {
        let mut inner = config::GpuConfig::desk_scale();
        inner.scheme = parse_scheme(scheme)?;
        inner.validate().map_err(err)?;
        Ok(GpuConfig { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = config::GpuConfig::load_file(path.as_ref()).map_err(err)?;
        Ok(GpuConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(err)
    }

    #[getter]
    fn scheme(&self) -> String {
        self.inner.scheme.to_string()
    }

    #[setter]
    fn set_scheme(&mut self, scheme: &str) -> PyResult<()> {
        self.inner.scheme = parse_scheme(scheme)?;
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn sm_count(&self) -> usize {
        self.inner.sm_count
    }

    #[setter]
    fn set_sm_count(&mut self, n: usize) -> PyResult<()> {
        self.inner.sm_count = n;
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn perfect_noc(&self) -> bool {
        self.inner.perfect_noc
    }

    #[setter]
    fn set_perfect_noc(&mut self, v: bool) {
        self.inner.perfect_noc = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "GpuConfig(scheme='{}', sm_count={}, mc_count={})",
            self.inner.scheme, self.inner.sm_count, self.inner.mc_count
        )
    }
}

/// Result of one simulated run.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct RunReport {
    inner: harness::RunReport,
}

#[pymethods]
impl RunReport {
    #[getter]
    fn scheme(&self) -> String {
        self.inner.scheme.clone()
    }

    #[getter]
    fn kernel(&self) -> String {
        self.inner.kernel.clone()
    }

    #[getter]
    fn decision(&self) -> Option<String> {
        self.inner.decision.map(|d| d.to_string())
    }

    #[getter]
    fn total_cycles(&self) -> u64 {
        self.inner.total_cycles
    }

    #[getter]
    fn sample_cycles(&self) -> u64 {
        self.inner.sample_cycles
    }

    #[getter]
    fn thread_instructions(&self) -> u64 {
        self.inner.thread_instructions
    }

    #[getter]
    fn ipc(&self) -> f64 {
        self.inner.ipc
    }

    #[getter]
    fn completed_ctas(&self) -> u64 {
        self.inner.completed_ctas
    }

    #[getter]
    fn splits(&self) -> u64 {
        self.inner.splits
    }

    #[getter]
    fn refuses(&self) -> u64 {
        self.inner.refuses
    }

    #[getter]
    fn l1d_miss_rate(&self) -> f64 {
        self.inner.l1d_miss_rate
    }

    #[getter]
    fn control_stall_fraction(&self) -> f64 {
        self.inner.control_stall_fraction
    }

    #[getter]
    fn avg_noc_latency(&self) -> f64 {
        self.inner.avg_noc_latency
    }

    /// Metric vector captured during the sampling phase, in canonical
    /// feature order, or None for schemes that never sample.
    #[getter]
    fn sampled_metrics(&self) -> Option<Vec<f64>> {
        self.inner.sampled.as_ref().map(|m| m.as_array().to_vec())
    }

    /// Reconfiguration timeline as (cycle, pair, event) tuples.
    #[getter]
    fn timeline(&self) -> Vec<(u64, usize, String)> {
        self.inner
            .timeline
            .iter()
            .map(|e| (e.cycle, e.pair, e.event.clone()))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(scheme='{}', total_cycles={}, ipc={:.4})",
            self.inner.scheme, self.inner.total_cycles, self.inner.ipc
        )
    }
}

/// Binary scale-up/scale-out predictor (logistic regression over the
/// ten sampled metrics).
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct PredictorModel {
    inner: predictor::PredictorModel,
}

fn metrics_from_list(values: Vec<f64>) -> PyResult<MetricVector> {
    let arr: [f64; METRIC_COUNT] = values.try_into().map_err(|v: Vec<f64>| {
        err(format!("expected {} metric values, got {}", METRIC_COUNT, v.len()))
    })?;
    Ok(MetricVector::from_array(arr))
}

#[pymethods]
impl PredictorModel {
    /// Model with the built-in published coefficients.
    #[staticmethod]
    fn builtin() -> Self {
        PredictorModel {
            inner: predictor::PredictorModel::builtin(),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = predictor::PredictorModel::load(path.as_ref()).map_err(err)?;
        Ok(PredictorModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    /// Fit a model from a labeled metrics CSV (same layout as `fusesim train`).
    #[staticmethod]
    #[pyo3(signature = (path, learning_rate = 0.5, epochs = 4000, l2 = 1e-3))]
    fn train_csv(path: &str, learning_rate: f64, epochs: u32, l2: f64) -> PyResult<Self> {
        let samples = predictor::load_training_csv(path.as_ref()).map_err(err)?;
        let inner = predictor::train(
            &samples,
            &TrainConfig {
                learning_rate,
                epochs,
                l2,
            },
        )
        .map_err(err)?;
        Ok(PredictorModel { inner })
    }

    /// "scale_up" or "scale_out" for a 10-element metric list.
    fn predict(&self, metrics: Vec<f64>) -> PyResult<String> {
        let m = metrics_from_list(metrics)?;
        Ok(self.inner.predict_fuse(&m).to_string())
    }

    fn probability(&self, metrics: Vec<f64>) -> PyResult<f64> {
        let m = metrics_from_list(metrics)?;
        Ok(self.inner.probability(&m))
    }

    fn logit(&self, metrics: Vec<f64>) -> PyResult<f64> {
        let m = metrics_from_list(metrics)?;
        Ok(self.inner.logit(&m))
    }

    /// Per-feature contributions to the decision, largest magnitude first.
    fn impacts(&self, metrics: Vec<f64>) -> PyResult<Vec<(String, f64)>> {
        let m = metrics_from_list(metrics)?;
        Ok(self
            .inner
            .impact_magnitudes(&m)
            .into_iter()
            .map(|(n, v)| (n.to_string(), v))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("PredictorModel(constant={})", self.inner.constant)
    }
}

/// Simulate one kernel under the configured scheme.
#[pyfunction]
fn run(cfg: &GpuConfig, spec: &KernelSpec) -> PyResult<RunReport> {
    let inner = harness::run_spec(&cfg.inner, &spec.inner).map_err(err)?;
    Ok(RunReport { inner })
}

/// (scheme, total_cycles, ipc, speedup_vs_baseline, decision, splits, refuses)
type CompareRow = (String, u64, f64, f64, Option<String>, u64, u64);

/// Run several schemes on one kernel; returns one row per scheme.
#[pyfunction]
#[pyo3(signature = (cfg, spec, schemes = None))]
fn compare(
    cfg: &GpuConfig,
    spec: &KernelSpec,
    schemes: Option<Vec<String>>,
) -> PyResult<Vec<CompareRow>> {
    let schemes = match schemes {
        Some(names) => names
            .iter()
            .map(|s| parse_scheme(s))
            .collect::<PyResult<Vec<_>>>()?,
        None => Scheme::ALL.to_vec(),
    };
    let kernel = workload::generate_kernel(&spec.inner).map_err(err)?;
    let rows = harness::compare_schemes(&cfg.inner, &kernel, &schemes).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.scheme,
                r.total_cycles,
                r.ipc,
                r.speedup_vs_baseline,
                r.decision.map(|d| d.to_string()),
                r.splits,
                r.refuses,
            )
        })
        .collect())
}

/// (sm_count, simd_width, max_threads, total_cycles, ipc, normalized_ipc)
type SweepRow = (usize, u32, u32, u64, f64, f64);

/// Run the kernel across SM counts at constant total resources; returns
/// one row per configuration.
#[pyfunction]
#[pyo3(signature = (cfg, spec, sms, budget = None))]
fn sweep(
    cfg: &GpuConfig,
    spec: &KernelSpec,
    sms: Vec<usize>,
    budget: Option<usize>,
) -> PyResult<Vec<SweepRow>> {
    let points = harness::sweep_scaling(&cfg.inner, &spec.inner, &sms, budget).map_err(err)?;
    Ok(points
        .into_iter()
        .map(|p| {
            (
                p.sm_count,
                p.simd_width,
                p.max_threads,
                p.total_cycles,
                p.ipc,
                p.normalized_ipc,
            )
        })
        .collect())
}

/// Canonical metric names, in the order `sampled_metrics` and the
/// predictor methods expect.
#[pyfunction]
fn metric_names() -> Vec<String> {
    METRIC_NAMES.iter().map(|s| s.to_string()).collect()
}

#[pymodule]
fn fusesim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KernelSpec>()?;
    m.add_class::<GpuConfig>()?;
    m.add_class::<RunReport>()?;
    m.add_class::<PredictorModel>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(metric_names, m)?)?;
    Ok(())
}
