use serde::{Deserialize, Serialize};

use crate::dynsys::{aligned_steps, SystemKind, SystemSpec, TimeGrid};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Recover the unobserved components on the observation window.
    Smoothing,
    /// Predict the observed components on the window that follows.
    Forecasting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub(crate) fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Everything needed to turn a seed into an input–output pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub system: SystemSpec,
    pub input_window: [f64; 2],
    pub output_window: [f64; 2],
    pub dt: f64,
    /// KS only: keep Fourier modes with `|k| < filter_modes` in the observed field.
    #[serde(default)]
    pub filter_modes: Option<usize>,
    /// Transient discarded before `t = 0`; defaults to 20 for Lorenz '63 and
    /// 200 otherwise.
    #[serde(default)]
    pub burn_in: Option<f64>,
}

/// Named task settings.
pub const PRESETS: [&str; 7] = [
    "l63-smoothing",
    "l63-smoothing-z",
    "l63-forecasting",
    "l96-smoothing",
    "l96-forecasting",
    "ks-smoothing",
    "ks-forecasting",
];

/// Observed Lorenz '96 components (zero-based): `u1..u21, u23, u25, …, u39`.
pub fn l96_observed() -> Vec<usize> {
    (0..21).chain((22..39).step_by(2)).collect()
}

impl TaskSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let l63 = |obs: &[usize]| SystemSpec::lorenz63(obs);
        let ks = || SystemSpec::kuramoto_sivashinsky(32.0 * std::f64::consts::PI, 128);
        let spec = match name {
            "l63-smoothing" => Self::smoothing(l63(&[0])?, [0.0, 5.0], 0.02),
            "l63-smoothing-z" => Self::smoothing(l63(&[2])?, [0.0, 5.0], 0.02),
            "l63-forecasting" => Self::forecasting(l63(&[0])?, [0.0, 2.0], 2.0, 0.01),
            "l96-smoothing" => Self::smoothing(SystemSpec::lorenz96(8.0, 40, &l96_observed())?, [0.0, 5.0], 0.02),
            "l96-forecasting" => {
                Self::forecasting(SystemSpec::lorenz96(8.0, 40, &l96_observed())?, [0.0, 5.0], 0.2, 0.02)
            }
            "ks-smoothing" => Self { filter_modes: Some(64), ..Self::smoothing(ks()?, [0.0, 100.0], 0.25) },
            "ks-forecasting" => Self { filter_modes: Some(32), ..Self::forecasting(ks()?, [0.0, 100.0], 2.0, 0.25) },
            other => {
                return Err(Error::Config(format!("unknown task preset `{other}` (known: {})", PRESETS.join(", "))))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn smoothing(system: SystemSpec, window: [f64; 2], dt: f64) -> Self {
        TaskSpec {
            task: Task::Smoothing,
            system,
            input_window: window,
            output_window: window,
            dt,
            filter_modes: None,
            burn_in: None,
        }
    }

    /// Input on `window`, output on `[window[1], window[1] + horizon]`.
    pub fn forecasting(system: SystemSpec, window: [f64; 2], horizon: f64, dt: f64) -> Self {
        TaskSpec {
            task: Task::Forecasting,
            system,
            input_window: window,
            output_window: [window[1], window[1] + horizon],
            dt,
            filter_modes: None,
            burn_in: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let [ta, tb] = self.input_window;
        let [tc, td] = self.output_window;
        ensure!(self.dt > 0.0 && self.dt.is_finite(), Config, "dt must be positive");
        ensure!(ta >= 0.0 && tb > ta, Config, "input window [{ta}, {tb}] must satisfy 0 <= t_a < t_b");
        ensure!(td > tc, Config, "output window [{tc}, {td}] is empty");
        match self.task {
            Task::Smoothing => {
                ensure!(self.input_window == self.output_window, Config, "smoothing needs equal input and output windows")
            }
            Task::Forecasting => {
                ensure!(tc == tb, Config, "forecast window must start where the input window ends ({tc} vs {tb})")
            }
        }
        for t in [ta, tb, tc, td] {
            aligned_steps(t, self.dt)?;
        }
        ensure!(self.burn_in.is_none_or(|b| b >= 0.0 && b.is_finite()), Config, "burn-in must be nonnegative");
        match (self.filter_modes, &self.system.system) {
            (None, _) => {}
            (Some(k), SystemKind::KuramotoSivashinsky { grid, .. }) => {
                ensure!(k >= 1 && k <= grid / 2, Config, "filter_modes must lie in [1, {}], got {k}", grid / 2)
            }
            (Some(_), _) => return Err(Error::Config("spectral filtering applies to KS only".into())),
        }
        if self.task == Task::Smoothing && self.system.q_indices.is_empty() {
            ensure!(
                self.filter_modes.is_some(),
                Config,
                "smoothing with nothing unobserved needs a filtered observation"
            );
        }
        Ok(())
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in.unwrap_or(match self.system.system {
            SystemKind::Lorenz63 { .. } => 20.0,
            _ => 200.0,
        })
    }

    pub fn input_grid(&self) -> TimeGrid {
        let [a, b] = self.input_window;
        TimeGrid { t0: a, t1: b, points: aligned_steps(b - a, self.dt).unwrap_or(0) + 1 }
    }

    pub fn output_grid(&self) -> TimeGrid {
        let [a, b] = self.output_window;
        TimeGrid { t0: a, t1: b, points: aligned_steps(b - a, self.dt).unwrap_or(0) + 1 }
    }

    /// Channels of the observed input.
    pub fn in_channels(&self) -> usize {
        self.system.p_indices.len()
    }

    /// Channels of the target: `q` for smoothing (or the unfiltered field
    /// when everything is observed through a filter), `p` for forecasting.
    pub fn out_channels(&self) -> usize {
        match self.task {
            Task::Smoothing if self.system.q_indices.is_empty() => self.system.p_indices.len(),
            Task::Smoothing => self.system.q_indices.len(),
            Task::Forecasting => self.system.p_indices.len(),
        }
    }

    /// Stable identifier used to pair datasets with checkpoints.
    pub fn hash(&self) -> Result<String> {
        crate::formats::content_hash(self)
    }
}
