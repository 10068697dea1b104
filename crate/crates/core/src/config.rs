//! Run configuration: a JSON document whose fields can be overridden one by
//! one from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::DEFAULT_TIMEOUT_MS;
use crate::gating::{GateConfig, GateMode};
use crate::metrics::HistogramSpec;
use crate::model::RsConfig;
use crate::scoring::{ScorerConfig, ScorerKind, DEFAULT_BOTTOM_T};

/// Every field is optional so that a file and a set of flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_mode: Option<GateMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_penalty: Option<RsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_grid: Option<Vec<RsConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_bin_width: Option<f64>,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn has_gate_params(&self) -> bool {
        self.gate_mode.is_some() || self.k.is_some() || self.fraction.is_some() || self.absolute_threshold.is_some()
    }

    /// Layer `overrides` on top of `self`: every field set there wins.
    ///
    /// Gate parameters are replaced as a group, so overriding `k` on top of a
    /// fraction-mode file switches the run to fixed-k instead of leaving two
    /// conflicting thresholds.
    pub fn merged(mut self, overrides: RunConfig) -> Self {
        if overrides.has_gate_params() {
            self.gate_mode = overrides.gate_mode;
            self.k = overrides.k;
            self.fraction = overrides.fraction;
            self.absolute_threshold = overrides.absolute_threshold;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if overrides.$field.is_some() { self.$field = overrides.$field; })*
            };
        }
        take!(
            scorer,
            t,
            sweep_penalty,
            penalty_grid,
            db_path,
            exec_timeout_ms,
            generations,
            labels,
            out_dir,
            lexicon,
            histogram_bin_width
        );
        self
    }

    pub fn scorer_config(&self) -> Result<ScorerConfig> {
        ScorerConfig::new(self.t.unwrap_or(DEFAULT_BOTTOM_T), self.scorer.unwrap_or_default())
    }

    /// The gate, checking that exactly the parameter for its mode is present.
    /// Without an explicit mode it is inferred from the single parameter set.
    pub fn gate_config(&self) -> Result<GateConfig> {
        let set: Vec<GateMode> = [
            (self.k.is_some(), GateMode::FixedK),
            (self.fraction.is_some(), GateMode::Fraction),
            (self.absolute_threshold.is_some(), GateMode::Absolute),
        ]
        .into_iter()
        .filter_map(|(present, mode)| present.then_some(mode))
        .collect();

        let mode = match (self.gate_mode, set.as_slice()) {
            (Some(mode), _) => mode,
            (None, [only]) => *only,
            (None, []) => return Err(Error::Config("no gate configured: set k, fraction or absolute_threshold".into())),
            (None, _) => return Err(Error::Config(format!("conflicting gate parameters {set:?}"))),
        };
        let stray: Vec<GateMode> = set.iter().copied().filter(|m| *m != mode).collect();
        if !stray.is_empty() {
            return Err(Error::Config(format!("gate mode {mode:?} conflicts with parameters for {stray:?}")));
        }
        let missing = |what: &str| Error::Config(format!("gate mode {mode:?} requires `{what}`"));
        let gate = match mode {
            GateMode::FixedK => GateConfig::FixedK(self.k.ok_or_else(|| missing("k"))?),
            GateMode::Fraction => GateConfig::Fraction(self.fraction.ok_or_else(|| missing("fraction"))?),
            GateMode::Absolute => {
                GateConfig::Absolute(self.absolute_threshold.ok_or_else(|| missing("absolute_threshold"))?)
            }
            GateMode::Sweep => GateConfig::Sweep(self.sweep_penalty.ok_or_else(|| missing("sweep_penalty"))?),
        };
        gate.validate()?;
        Ok(gate)
    }

    pub fn penalty_grid(&self) -> Vec<RsConfig> {
        self.penalty_grid.clone().unwrap_or_else(RsConfig::default_grid)
    }

    pub fn exec_timeout_ms(&self) -> u64 {
        self.exec_timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS)
    }

    pub fn histogram_spec(&self) -> HistogramSpec {
        self.histogram_bin_width
            .map(|bin_width| HistogramSpec { bin_width })
            .unwrap_or_default()
    }
}
