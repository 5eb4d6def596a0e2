//! Top-level simulator configuration: platform sizing, scheme selection,
//! and the nested SM/timing/reconfiguration parameter blocks.

use crate::reconfig::ReconfigParams;
use crate::smcore::{SmConfig, Timing};
use crate::Error;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Scale-out: independent 32-wide SMs, no controller.
    Baseline,
    /// Unconditional scale-up: every pair fused from cycle 0.
    ScaleUp,
    /// Sample, predict, then fuse (or not) for the whole kernel.
    StaticFuse,
    /// StaticFuse plus dynamic splitting, halving each binned warp.
    DirectSplit,
    /// StaticFuse plus dynamic splitting into fast/slow regrouped warps.
    WarpRegroup,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Baseline,
        Scheme::ScaleUp,
        Scheme::StaticFuse,
        Scheme::DirectSplit,
        Scheme::WarpRegroup,
    ];

    /// Does this scheme ever run SMs fused?
    pub fn can_fuse(self) -> bool {
        self != Scheme::Baseline
    }

    /// Does this scheme split fused SMs at runtime?
    pub fn dynamic_split(self) -> bool {
        matches!(self, Scheme::DirectSplit | Scheme::WarpRegroup)
    }

    /// Does this scheme run the sampling/prediction controller?
    pub fn uses_predictor(self) -> bool {
        matches!(
            self,
            Scheme::StaticFuse | Scheme::DirectSplit | Scheme::WarpRegroup
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::Baseline => "baseline",
            Scheme::ScaleUp => "scale_up",
            Scheme::StaticFuse => "static_fuse",
            Scheme::DirectSplit => "direct_split",
            Scheme::WarpRegroup => "warp_regroup",
        };
        f.write_str(s)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "baseline" => Ok(Scheme::Baseline),
            "scale_up" => Ok(Scheme::ScaleUp),
            "static_fuse" => Ok(Scheme::StaticFuse),
            "direct_split" => Ok(Scheme::DirectSplit),
            "warp_regroup" => Ok(Scheme::WarpRegroup),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected baseline, scale_up, \
                 static_fuse, direct_split, or warp_regroup)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GpuConfig {
    pub sm_count: usize,
    pub mc_count: usize,
    pub scheme: Scheme,
    pub perfect_noc: bool,
    /// Predictor model file; the built-in coefficients apply when absent.
    pub model_path: Option<String>,
    pub seed: u64,
    pub mc_queue_cap: usize,
    /// Initial sampling window in cycles (doubles when inconclusive).
    pub sample_window: u64,
    pub sample_max_doublings: u32,
    pub sm: SmConfig,
    pub timing: Timing,
    pub reconfig: ReconfigParams,
}

impl Default for GpuConfig {
    fn default() -> Self {
        GpuConfig {
            sm_count: 48,
            mc_count: 8,
            scheme: Scheme::Baseline,
            perfect_noc: false,
            model_path: None,
            seed: 0,
            mc_queue_cap: 64,
            sample_window: 10_000,
            sample_max_doublings: 3,
            sm: SmConfig::default(),
            timing: Timing::default(),
            reconfig: ReconfigParams::default(),
        }
    }
}

impl GpuConfig {
    /// Small platform used by fast experiments and the test suite; the
    /// full-size default stays the documented configuration.
    pub fn desk_scale() -> Self {
        GpuConfig {
            sm_count: 8,
            mc_count: 4,
            ..GpuConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.sm_count == 0 {
            return Err(Error::Config("sm_count must be positive".into()));
        }
        if self.mc_count == 0 {
            return Err(Error::Config("mc_count must be positive".into()));
        }
        if self.scheme.can_fuse() && !self.sm_count.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "scheme {} fuses SM pairs and needs an even sm_count, got {}",
                self.scheme, self.sm_count
            )));
        }
        if self.sm.warp_size != 32 {
            return Err(Error::Config(format!(
                "warp_size must be 32, got {}",
                self.sm.warp_size
            )));
        }
        if self.sm.simd_width == 0 {
            return Err(Error::Config("simd_width must be positive".into()));
        }
        if self.sm.max_ctas == 0 || self.sm.max_threads < self.sm.warp_size {
            return Err(Error::Config(
                "per-SM CTA/thread capacities are too small".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.reconfig.split_threshold) {
            return Err(Error::Config(format!(
                "split_threshold must be in [0,1], got {}",
                self.reconfig.split_threshold
            )));
        }
        if self.reconfig.group_size == 0 || 32 % self.reconfig.group_size != 0 {
            return Err(Error::Config(format!(
                "group_size must divide 32, got {}",
                self.reconfig.group_size
            )));
        }
        if self.reconfig.check_period == 0 || self.reconfig.migration_period == 0 {
            return Err(Error::Config(
                "check_period and migration_period must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: GpuConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_file(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
