use std::path::Path;

use obsflow::autodiff::Activation;
use obsflow::formats::content_hash;
use obsflow::neuralop::{Architecture, ModelConfig};
use obsflow::{Error, Result, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// A run description as written by the user, in TOML or JSON.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Either a named preset or a full task specification, never both.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub preset: Option<String>,
    pub spec: Option<TaskSpec>,
    /// Overrides the preset's transient length.
    pub burn_in: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to a self-attention stack when input and output grids have
    /// the same number of points and to an encoder-decoder otherwise.
    pub arch: Option<Architecture>,
    pub layers: Option<usize>,
    pub channels: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub activation: Option<Activation>,
    pub layer_norm: Option<bool>,
}

/// Every setting after defaults and presets have been applied. Its hash
/// identifies a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Resolved {
    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
        }
    }

    pub fn task(&self) -> Result<TaskSpec> {
        let mut task = match (&self.task.preset, &self.task.spec) {
            (Some(name), None) => TaskSpec::preset(name)?,
            (None, Some(spec)) => spec.clone(),
            _ => return Err(Error::Config("[task] needs exactly one of `preset` or `spec`".into())),
        };
        if self.task.burn_in.is_some() {
            task.burn_in = self.task.burn_in;
        }
        task.validate()?;
        Ok(task)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let task = self.task()?;
        let model = model_config(&self.model, &task)?;
        self.train.validate()?;
        Ok(Resolved { seed: self.seed, task, model, train: self.train.clone() })
    }
}

pub fn model_config(m: &ModelSection, task: &TaskSpec) -> Result<ModelConfig> {
    let (gi, go) = (task.input_grid(), task.output_grid());
    let arch = m.arch.unwrap_or(if gi.points == go.points {
        Architecture::SelfAttnStack
    } else {
        Architecture::EncoderDecoder
    });
    let mut c = ModelConfig::new(arch, task.in_channels(), task.out_channels(), gi, go);
    c.layers = m.layers.unwrap_or(c.layers);
    c.channels = m.channels.unwrap_or(c.channels);
    c.heads = m.heads.unwrap_or(c.heads);
    c.mlp_hidden = m.mlp_hidden.unwrap_or(c.mlp_hidden);
    c.activation = m.activation.unwrap_or(c.activation);
    c.layer_norm = m.layer_norm.unwrap_or(c.layer_norm);
    c.validate()?;
    Ok(c)
}
