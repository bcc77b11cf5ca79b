//! Declarative experiment configuration: TOML documents with strict schema
//! validation (unknown keys are rejected).

use crate::coefficients::{
    derive_scheme_bounds, CoefficientField, ConstantsReport, InitialLaw, SdeSpec, SpatialGrid,
};
use crate::error::{Error, Result};
use crate::euler::{SchemeConfig, Variant};
use crate::functionals::TestFunctional;
use crate::ordering::{ExperimentSpec, Mode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub family: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub drift: CoefficientSection,
    pub diffusion: CoefficientSection,
    pub horizon: f64,
    pub initial: InitialSection,
}

/// "auto" resolves to s_default via the constants report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdField {
    Auto(String),
    Value(f64),
}

impl Default for ThresholdField {
    fn default() -> Self {
        ThresholdField::Auto("auto".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub m: usize,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub threshold: ThresholdField,
}

fn default_variant() -> String {
    "point_frozen".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSection {
    pub id: String,
    #[serde(default)]
    pub params: Vec<f64>,
    /// Marginal times for multi-marginal functionals.
    #[serde(default)]
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub override_hypotheses: bool,
}

fn default_confidence() -> f64 {
    0.99
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_formats() -> Vec<String> {
    vec!["json".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateSection {
    pub grid: GridSection,
    /// Paths for the optional MC cross-check; 0 runs the kernel only.
    #[serde(default)]
    pub mc_paths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub m_list: Vec<usize>,
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default)]
    pub policy_value: Option<f64>,
    /// Parameters of the GBM reference (theta, x0).
    pub theta: f64,
    pub x0: f64,
    /// Truncation-event study size (m, s); optional.
    #[serde(default)]
    pub tail_m: Option<usize>,
    #[serde(default)]
    pub tail_s: Option<f64>,
}

fn default_policy() -> String {
    "default".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSection {
    pub h: f64,
    pub threshold: f64,
    #[serde(default)]
    pub grid: Option<GridSection>,
}

/// Top-level experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Option<String>,
    pub sde_x: SdeSection,
    #[serde(default)]
    pub sde_y: Option<SdeSection>,
    pub scheme: SchemeSection,
    #[serde(default)]
    pub suite: Vec<FunctionalSection>,
    pub run: RunSection,
    #[serde(default)]
    pub output: Option<OutputSection>,
    #[serde(default)]
    pub propagate: Option<PropagateSection>,
    #[serde(default)]
    pub converge: Option<ConvergeSection>,
    #[serde(default)]
    pub counterexample: Option<CounterexampleSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sde_spec(section: &SdeSection) -> Result<SdeSpec> {
        let drift = CoefficientField::from_config(&section.drift.family, &section.drift.params)?;
        let diffusion =
            CoefficientField::from_config(&section.diffusion.family, &section.diffusion.params)?;
        let initial = match (section.initial.kind.as_str(), section.initial.params.as_slice()) {
            ("dirac", [x0]) => InitialLaw::Dirac { x0: *x0 },
            ("two_point", [p, lo, hi]) => InitialLaw::TwoPoint { p: *p, lo: *lo, hi: *hi },
            ("sample_table", values) if values.len() >= 2 => {
                InitialLaw::SampleTable { values: values.to_vec() }
            }
            (kind, _) => {
                return Err(Error::Config(format!(
                    "initial law '{kind}' expects dirac [x0], two_point [p, lo, hi] or sample_table [values..]"
                )))
            }
        };
        Ok(SdeSpec::new(drift, diffusion, section.horizon, initial))
    }

    pub fn spec_x(&self) -> Result<SdeSpec> {
        Self::sde_spec(&self.sde_x)
    }

    pub fn spec_y(&self) -> Result<SdeSpec> {
        match &self.sde_y {
            Some(sec) => Self::sde_spec(sec),
            None => self.spec_x(),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        match self.scheme.variant.as_str() {
            "time_integrated" => Ok(Variant::TimeIntegrated),
            "point_frozen" => Ok(Variant::PointFrozen),
            other => Err(Error::Config(format!("unknown scheme variant '{other}'"))),
        }
    }

    /// Resolves the scheme; "auto" thresholds use s_default of sde_x.
    pub fn scheme_config(&self) -> Result<SchemeConfig> {
        let spec = self.spec_x()?;
        let threshold = match &self.scheme.threshold {
            ThresholdField::Value(v) => {
                if *v < 0.0 {
                    return Err(Error::Config("threshold must be >= 0".into()));
                }
                *v
            }
            ThresholdField::Auto(word) if word == "auto" => {
                let constants = ConstantsReport::with_default_grid(&spec)?;
                derive_scheme_bounds(&constants, spec.horizon, self.scheme.m)?.s_default
            }
            ThresholdField::Auto(other) => {
                return Err(Error::Config(format!(
                    "threshold must be a number or \"auto\", got '{other}'"
                )))
            }
        };
        Ok(SchemeConfig::new(self.scheme.m, self.variant()?, threshold, spec.horizon))
    }

    pub fn suite(&self) -> Result<Vec<TestFunctional>> {
        self.suite
            .iter()
            .map(|s| TestFunctional::from_config(&s.id, &s.params, &s.times))
            .collect()
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.mode.as_deref() {
            Some("icv") => Ok(Mode::Icv),
            Some("cvx") => Ok(Mode::Cvx),
            Some("diricv") => Ok(Mode::Diricv),
            Some("dircvx") => Ok(Mode::Dircvx),
            Some(other) => Err(Error::Config(format!("unknown mode '{other}'"))),
            None => Err(Error::Config("compare needs a 'mode' key".into())),
        }
    }

    pub fn experiment(&self) -> Result<ExperimentSpec> {
        Ok(ExperimentSpec {
            spec_x: self.spec_x()?,
            spec_y: self.spec_y()?,
            mode: self.mode()?,
            scheme: self.scheme_config()?,
            suite: self.suite()?,
            n_paths: self.run.paths,
            seed: self.run.seed,
            confidence: self.run.confidence,
            override_hypotheses: self.run.override_hypotheses,
            couple_initial: true,
        })
    }

    pub fn propagate_grid(&self) -> Result<SpatialGrid> {
        let section = self
            .propagate
            .as_ref()
            .ok_or_else(|| Error::Config("propagate command needs a [propagate] section".into()))?;
        SpatialGrid::new(section.grid.lo, section.grid.hi, section.grid.n)
    }
}
