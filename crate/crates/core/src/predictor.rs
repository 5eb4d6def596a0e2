//! Binary logistic-regression scalability predictor.
//!
//! A metric vector sampled from a short profiling window is mapped to a
//! fuse/no-fuse decision: logit = b0 + Σ bi·xi, P = σ(logit), SCALE_UP iff
//! P > 0.5. Per-term products ("impacts") explain the decision and sum
//! exactly to the logit. A batch gradient-ascent trainer fits new
//! coefficients from labeled samples.

use crate::Error;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Profiling metrics feeding the predictor. All rates are fractions in
/// [0, 1] except `concurrent_cta` (average resident CTAs per SM).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricVector {
    pub control_divergent: f64,
    pub coalescing: f64,
    pub l1d_miss: f64,
    pub l1i_miss: f64,
    pub l1c_miss: f64,
    pub mshr: f64,
    pub load_inst_rate: f64,
    pub store_inst_rate: f64,
    pub noc: f64,
    pub concurrent_cta: f64,
}

pub const METRIC_COUNT: usize = 10;

pub const METRIC_NAMES: [&str; METRIC_COUNT] = [
    "control_divergent",
    "coalescing",
    "l1d_miss",
    "l1i_miss",
    "l1c_miss",
    "mshr",
    "load_inst_rate",
    "store_inst_rate",
    "noc",
    "concurrent_cta",
];

impl MetricVector {
    pub fn as_array(&self) -> [f64; METRIC_COUNT] {
        [
            self.control_divergent,
            self.coalescing,
            self.l1d_miss,
            self.l1i_miss,
            self.l1c_miss,
            self.mshr,
            self.load_inst_rate,
            self.store_inst_rate,
            self.noc,
            self.concurrent_cta,
        ]
    }

    pub fn from_array(a: [f64; METRIC_COUNT]) -> Self {
        MetricVector {
            control_divergent: a[0],
            coalescing: a[1],
            l1d_miss: a[2],
            l1i_miss: a[3],
            l1c_miss: a[4],
            mshr: a[5],
            load_inst_rate: a[6],
            store_inst_rate: a[7],
            noc: a[8],
            concurrent_cta: a[9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ScaleUp,
    ScaleOut,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::ScaleUp => write!(f, "scale_up"),
            Decision::ScaleOut => write!(f, "scale_out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorModel {
    pub constant: f64,
    pub coefficients: MetricVector,
}

impl Default for PredictorModel {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PredictorModel {
    /// Shipped coefficients (trained offline; see models/default_model.json).
    pub fn builtin() -> Self {
        PredictorModel {
            constant: -73.635,
            coefficients: MetricVector {
                control_divergent: 444.628,
                coalescing: 2057.050,
                l1d_miss: -313.838,
                l1i_miss: 1674.513,
                l1c_miss: -67.277,
                mshr: -102.971,
                load_inst_rate: -680.786,
                store_inst_rate: -804.7,
                noc: -8.301,
                concurrent_cta: 1.414,
            },
        }
    }

    /// logit = constant + Σ bi·xi, accumulated in fixed field order so the
    /// impact decomposition reproduces it exactly.
    pub fn logit(&self, m: &MetricVector) -> f64 {
        let mut z = self.constant;
        let b = self.coefficients.as_array();
        let x = m.as_array();
        for i in 0..METRIC_COUNT {
            z += b[i] * x[i];
        }
        z
    }

    /// σ(logit), numerically stable for any logit magnitude; result is kept
    /// strictly inside (0, 1) by clamping the exponent.
    pub fn probability(&self, m: &MetricVector) -> f64 {
        stable_sigmoid(self.logit(m))
    }

    /// SCALE_UP iff P > 0.5 (equivalently logit > 0); the tie P = 0.5 maps
    /// to SCALE_OUT.
    pub fn predict_fuse(&self, m: &MetricVector) -> Decision {
        if self.logit(m) > 0.0 {
            Decision::ScaleUp
        } else {
            Decision::ScaleOut
        }
    }

    /// Per-metric products bi·xi plus the constant, in logit accumulation
    /// order: summing the values left to right reproduces `logit` exactly.
    pub fn impact_magnitudes(&self, m: &MetricVector) -> Vec<(&'static str, f64)> {
        let mut out = Vec::with_capacity(METRIC_COUNT + 1);
        out.push(("constant", self.constant));
        let b = self.coefficients.as_array();
        let x = m.as_array();
        for i in 0..METRIC_COUNT {
            out.push((METRIC_NAMES[i], b[i] * x[i]));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    // Asymmetric clamp keeps P strictly inside (0,1): above 36 the sum
    // 1 + e^-z rounds to 1 exactly, while on the negative side e^z stays
    // normal (and positive) all the way down to about -745.
    let z = z.clamp(-700.0, 36.0);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log σ(z) without overflow: -softplus(-z).
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub metrics: MetricVector,
    /// true = the kernel scaled up profitably.
    pub label: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    /// L2 penalty on the metric coefficients (the intercept is unpenalized).
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 4000,
            l2: 1e-3,
        }
    }
}

/// Regularized log-likelihood: Σ [y·logσ(z) + (1−y)·log(1−σ(z))] − (λ/2)‖b‖².
pub fn log_likelihood(model: &PredictorModel, samples: &[TrainingSample], l2: f64) -> f64 {
    let mut ll = 0.0;
    for s in samples {
        let z = model.logit(&s.metrics);
        ll += if s.label {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        };
    }
    let b = model.coefficients.as_array();
    ll - 0.5 * l2 * b.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of `log_likelihood` with respect to (constant, coefficients).
pub fn log_likelihood_gradient(
    model: &PredictorModel,
    samples: &[TrainingSample],
    l2: f64,
) -> (f64, [f64; METRIC_COUNT]) {
    let mut g0 = 0.0;
    let mut g = [0.0; METRIC_COUNT];
    for s in samples {
        let p = stable_sigmoid(model.logit(&s.metrics));
        let resid = (s.label as u8 as f64) - p;
        g0 += resid;
        let x = s.metrics.as_array();
        for i in 0..METRIC_COUNT {
            g[i] += resid * x[i];
        }
    }
    let b = model.coefficients.as_array();
    for i in 0..METRIC_COUNT {
        g[i] -= l2 * b[i];
    }
    (g0, g)
}

/// Batch gradient ascent from zero initialization. Deterministic: fixed
/// epoch count, no shuffling, no data-dependent early exit.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<PredictorModel, Error> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let pos = samples.iter().filter(|s| s.label).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Data(
            "degenerate training set: all samples share one label".into(),
        ));
    }
    let mut model = PredictorModel {
        constant: 0.0,
        coefficients: MetricVector::default(),
    };
    let scale = 1.0 / samples.len() as f64;
    for _ in 0..cfg.epochs {
        let (g0, g) = log_likelihood_gradient(&model, samples, cfg.l2);
        model.constant += cfg.learning_rate * g0 * scale;
        let mut b = model.coefficients.as_array();
        for i in 0..METRIC_COUNT {
            b[i] += cfg.learning_rate * g[i] * scale;
        }
        model.coefficients = MetricVector::from_array(b);
    }
    Ok(model)
}

/// Fraction of samples whose predicted decision matches the label.
pub fn accuracy(model: &PredictorModel, samples: &[TrainingSample]) -> f64 {
    if samples.is_empty() {
        return 1.0;
    }
    let hits = samples
        .iter()
        .filter(|s| (model.predict_fuse(&s.metrics) == Decision::ScaleUp) == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

/// Reads training samples from CSV: one column per metric plus `label`.
pub fn load_training_csv(path: &Path) -> Result<Vec<TrainingSample>, Error> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize, Error> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("training CSV is missing column `{name}`")))
    };
    let metric_cols: Vec<usize> = METRIC_NAMES
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let label_col = col("label")?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let field = |c: usize| -> Result<f64, Error> {
            record
                .get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Data(format!("row {}: unparsable numeric field", i + 2))
                })
        };
        let mut a = [0.0; METRIC_COUNT];
        for (j, &c) in metric_cols.iter().enumerate() {
            a[j] = field(c)?;
        }
        let label_raw = field(label_col)?;
        out.push(TrainingSample {
            metrics: MetricVector::from_array(a),
            label: label_raw > 0.5,
        });
    }
    Ok(out)
}
