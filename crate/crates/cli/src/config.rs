//! Run configuration: a JSON file whose fields are overridden by flags.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, flags.

use std::path::{Path, PathBuf};

use nosetori::models::{HamiltonianModel, ModelKind, OmegaJet, TrigPotential};
use nosetori::simulate::{near_xi1, Direction, ExperimentGrid, Method, SectionSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    State(Vec<f64>),
    NearXi1 { radius: f64, angle: f64 },
}

impl InitialCondition {
    pub fn state(&self) -> Vec<f64> {
        match self {
            InitialCondition::State(x) => x.clone(),
            InitialCondition::NearXi1 { radius, angle } => near_xi1(*radius, *angle),
        }
    }
}

/// Parameters of the exact paths, kept as `p/q` strings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcommand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<HamiltonianModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<InitialCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    /// Record every n-th step in `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<SectionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ExperimentGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path, subcommand: &str) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        if let Some(s) = &cfg.subcommand {
            if s != subcommand {
                return Err(CliError::Usage(format!(
                    "config is for `{s}`, not `{subcommand}`"
                )));
            }
        }
        Ok(cfg)
    }

    pub fn from_optional(path: Option<&Path>, subcommand: &str) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p, subcommand)?,
            None => RunConfig::default(),
        };
        cfg.subcommand = Some(subcommand.to_string());
        Ok(cfg)
    }
}

pub fn model_kind(name: &str) -> Result<ModelKind, CliError> {
    Ok(match name {
        "nose" | "nose_full" => ModelKind::NoseFull,
        "rescaled" | "rescaled_F_beta" => ModelKind::RescaledFBeta,
        "nose-hoover" | "nose_hoover_reduced" => ModelKind::NoseHooverReduced,
        "nose-like" | "nose_like" => ModelKind::NoseLike,
        "oscillator" | "oscillator_G_kappa" => ModelKind::OscillatorGKappa,
        other => {
            return Err(CliError::Usage(format!(
                "unknown model `{other}`; expected nose, rescaled, nose-hoover, nose-like or oscillator"
            )))
        }
    })
}

/// Defaults for a model named on the command line: `V = cos` where a
/// potential enters (the Nose-Hoover system is the harmonic one).
pub fn base_model(kind: ModelKind) -> HamiltonianModel {
    match kind {
        ModelKind::RescaledFBeta | ModelKind::NoseLike => HamiltonianModel {
            kind,
            ..HamiltonianModel::rescaled(0.0)
        },
        ModelKind::NoseFull => HamiltonianModel {
            potential: TrigPotential::cosine(),
            ..HamiltonianModel::new(kind)
        },
        ModelKind::NoseHooverReduced | ModelKind::OscillatorGKappa => HamiltonianModel::new(kind),
    }
}

/// Model flags shared by the numerical subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ModelFlags {
    /// nose, rescaled, nose-hoover, nose-like or oscillator
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Thermostat mass M
    #[arg(long)]
    pub mass: Option<f64>,
    /// Temperature T
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Inverse-mass jet of the Nose-like model
    #[arg(long, allow_hyphen_values = true)]
    pub a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b: Option<f64>,
}

impl ModelFlags {
    pub fn resolve(&self, from_config: Option<HamiltonianModel>) -> Result<HamiltonianModel, CliError> {
        let mut m = match (&self.model, from_config) {
            (Some(name), Some(m)) if model_kind(name)? == m.kind => m,
            (Some(name), _) => base_model(model_kind(name)?),
            (None, Some(m)) => m,
            (None, None) => HamiltonianModel::rescaled(0.0),
        };
        if let Some(x) = self.beta {
            m.beta = x;
        }
        if let Some(x) = self.mass {
            m.mass = x;
        }
        if let Some(x) = self.temperature {
            m.temperature = x;
        }
        if let Some(x) = self.kappa {
            m.kappa = x;
        }
        if self.a.is_some() || self.b.is_some() {
            m.omega_jet = OmegaJet {
                a: self.a.unwrap_or(m.omega_jet.a),
                b: self.b.unwrap_or(m.omega_jet.b),
            };
        }
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }
}

/// Integration and initial-condition flags.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunFlags {
    /// `near-xi1` or a comma-separated state
    #[arg(long, allow_hyphen_values = true)]
    pub ic: Option<String>,
    /// Distance from the periodic orbit for `--ic near-xi1`
    #[arg(long)]
    pub radius: Option<f64>,
    /// Direction in the (sigma, Sigma) plane for `--ic near-xi1`
    #[arg(long, allow_hyphen_values = true)]
    pub angle: Option<f64>,
    /// Implicit midpoint with this step
    #[arg(long, conflicts_with = "tol")]
    pub dt: Option<f64>,
    /// Adaptive embedded Runge-Kutta with this tolerance
    #[arg(long)]
    pub tol: Option<f64>,
}

pub const DEFAULT_DT: f64 = 1e-2;
pub const DEFAULT_RADIUS: f64 = 0.05;

impl RunFlags {
    pub fn method(&self, from_config: Option<Method>) -> Method {
        match (self.dt, self.tol) {
            (Some(dt), _) => Method::ImplicitMidpoint { dt },
            (None, Some(tol)) => Method::EmbeddedRk { tol },
            (None, None) => from_config.unwrap_or(Method::ImplicitMidpoint { dt: DEFAULT_DT }),
        }
    }

    pub fn ic(&self, from_config: Option<InitialCondition>, model: &HamiltonianModel) -> Result<InitialCondition, CliError> {
        let ic = match self.ic.as_deref() {
            Some("near-xi1") => InitialCondition::NearXi1 {
                radius: DEFAULT_RADIUS,
                angle: 0.0,
            },
            Some(list) => InitialCondition::State(
                list.split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Usage(format!("bad --ic `{list}`: {e}")))?,
            ),
            None => from_config.unwrap_or(if model.dim() == 3 {
                InitialCondition::State(vec![0.0, 1.0, 0.0])
            } else {
                InitialCondition::NearXi1 {
                    radius: DEFAULT_RADIUS,
                    angle: 0.0,
                }
            }),
        };
        let ic = match ic {
            InitialCondition::NearXi1 { radius, angle } => InitialCondition::NearXi1 {
                radius: self.radius.unwrap_or(radius),
                angle: self.angle.unwrap_or(angle),
            },
            InitialCondition::State(x) => {
                if self.radius.is_some() || self.angle.is_some() {
                    return Err(CliError::Usage("--radius and --angle apply to --ic near-xi1".into()));
                }
                InitialCondition::State(x)
            }
        };
        if ic.state().len() != model.dim() {
            return Err(CliError::Usage(format!(
                "{} needs a state of dimension {}",
                model.kind.name(),
                model.dim()
            )));
        }
        Ok(ic)
    }
}

/// `angle` (w = level mod 2 pi), `momentum-zero` (Sigma = 0 at maxima of
/// sigma) or `momentum-zero-increasing`.
pub fn section_named(name: &str, level: f64) -> Result<SectionSpec, CliError> {
    Ok(match name {
        "angle" => SectionSpec::angle(level),
        "momentum-zero" => SectionSpec::momentum_zero(Direction::Decreasing),
        "momentum-zero-increasing" => SectionSpec::momentum_zero(Direction::Increasing),
        other => return Err(CliError::Usage(format!("unknown section `{other}`"))),
    })
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad list `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            subcommand: Some("poincare".into()),
            model: Some(HamiltonianModel::rescaled(0.01)),
            method: Some(Method::EmbeddedRk { tol: 1e-10 }),
            ic: Some(InitialCondition::NearXi1 { radius: 0.1, angle: 1.0 }),
            n_points: Some(64),
            section: Some(SectionSpec::momentum_zero(Direction::Decreasing)),
            grid: Some(ExperimentGrid::default()),
            exact: Some(ExactParams {
                model: Some("hat-g".into()),
                kappa: Some("1/10".into()),
                ..ExactParams::default()
            }),
            seed: Some(7),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        // absent fields stay absent
        assert!(!text.contains("t_end"));
        let state = RunConfig {
            ic: Some(InitialCondition::State(vec![0.0, 1.0, 1.0, 0.0])),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&state).unwrap();
        assert_eq!(text, r#"{"ic":{"state":[0.0,1.0,1.0,0.0]}}"#);
    }

    #[test]
    fn model_names() {
        for (name, kind) in [
            ("nose", ModelKind::NoseFull),
            ("rescaled", ModelKind::RescaledFBeta),
            ("nose-hoover", ModelKind::NoseHooverReduced),
            ("nose-like", ModelKind::NoseLike),
            ("oscillator", ModelKind::OscillatorGKappa),
        ] {
            assert_eq!(model_kind(name).unwrap(), kind);
            assert_eq!(model_kind(kind.name()).unwrap(), kind);
        }
        assert!(model_kind("nosé").is_err());
    }
}
