use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backward_solver::BasisSpec;
use crate::coefficients::{appendix_ode, linear_family, zero_instance, CoefficientSet, LinearParams, LipschitzConstants, SamplerConfig};
use crate::error::{Error, Result};
use crate::forward_sim::{NoiseSpec, TimeGrid};
use crate::lq_benchmark::{benchmark_fbsde, LqParams};
use crate::mf_solver::PicardConfig;
use crate::random_measure::JumpIntensity;
use crate::smart_grid::{assemble_mfc_fbsde, CouplingMode, GridModel, Policy};

/// Full run description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub check: SamplerConfig,
    #[serde(default)]
    pub instance: InstanceConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: None,
            simulation: SimulationConfig::default(),
            basis: BasisSpec::default(),
            picard: PicardConfig::default(),
            check: SamplerConfig::default(),
            instance: InstanceConfig::default(),
            benchmark: BenchmarkConfig::default(),
            grid: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub particles: usize,
    pub steps: usize,
    pub horizon: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { particles: 1000, steps: 50, horizon: 1.0 }
    }
}

impl SimulationConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        if self.particles == 0 {
            return Err(Error::InvalidParameter("simulation.particles must be at least 1".into()));
        }
        TimeGrid::new(self.horizon, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceConfig {
    Zero,
    Linear {
        #[serde(default)]
        params: LinearParams,
        #[serde(default)]
        jumps: Option<JumpIntensity>,
    },
    AppendixOde {
        #[serde(default = "unit")]
        x0: f64,
    },
    LqBenchmark {
        #[serde(default)]
        params: LqParams,
    },
    Grid {
        model: GridModel,
        coupling: CouplingMode,
    },
}

fn unit() -> f64 {
    1.0
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig::Zero
    }
}

/// A built instance ready for the solvers.
pub struct Instance {
    pub coeffs: CoefficientSet,
    pub constants: Option<LipschitzConstants>,
    pub noise: NoiseSpec,
    pub intensity: Option<JumpIntensity>,
}

impl InstanceConfig {
    pub fn build(&self) -> Result<Instance> {
        let with_constants = |(coeffs, constants): (CoefficientSet, LipschitzConstants), intensity: Option<JumpIntensity>| {
            let noise = NoiseSpec { jumps: intensity.clone(), ..NoiseSpec::brownian(1) };
            Instance { coeffs, constants: Some(constants), noise, intensity }
        };
        Ok(match self {
            InstanceConfig::Zero => with_constants(zero_instance(), None),
            InstanceConfig::Linear { params, jumps } => with_constants(linear_family(params, jumps.as_ref())?, jumps.clone()),
            InstanceConfig::AppendixOde { x0 } => with_constants(appendix_ode(*x0), None),
            InstanceConfig::LqBenchmark { params } => {
                Instance { coeffs: benchmark_fbsde(params)?, constants: None, noise: NoiseSpec::default(), intensity: None }
            }
            InstanceConfig::Grid { model, coupling } => {
                let noise = model.noise_spec();
                let intensity = noise.intensity();
                Instance { coeffs: assemble_mfc_fbsde(model, coupling)?, constants: None, noise, intensity }
            }
        })
    }

    /// Horizon fixed by the instance itself, if any.
    pub fn horizon(&self) -> Option<f64> {
        match self {
            InstanceConfig::LqBenchmark { params } => Some(params.horizon),
            _ => None,
        }
    }
}

/// Closed-form LQ pipeline and its solver comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub params: LqParams,
    /// Quadrature intervals of the closed form.
    pub intervals: usize,
    pub solve: bool,
    pub particles: usize,
    pub steps: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { params: LqParams::default(), intervals: 2000, solve: true, particles: 1, steps: 200 }
    }
}

/// Storage-network simulation under a policy, or solved under a coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub model: GridModel,
    #[serde(default)]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub coupling: Option<CouplingMode>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
