//! JSON config files. Every file carries `format_version`; omitted fields take
//! the defaults below and relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use percept_core::dataio::DegradationConfig;
use percept_core::enhance::EnhanceTrainConfig;
use percept_core::iqa::{IacaConfig, IqaTrainHyper};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

pub const CONFIG_FORMAT_VERSION: u64 = 1;

/// Parses `path`, or returns the defaults when no config was given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|msg| Failure::Validation(format!("{}: {msg}", path.display())))
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    match value.get("format_version").map(|v| v.as_u64()) {
        None => return Err("missing field `format_version`".into()),
        Some(Some(CONFIG_FORMAT_VERSION)) => {}
        Some(_) => {
            return Err(format!(
                "field `format_version`: unsupported value {}, expected {CONFIG_FORMAT_VERSION}",
                value["format_version"]
            ))
        }
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

/// `path` relative to the config file's directory, if it was relative.
pub fn resolve(config: Option<&Path>, path: &Path) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub format_version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Directory of real base images; procedural scenes when absent.
    pub base_images: Option<PathBuf>,
    pub degradation: DegradationConfig,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            format_version: 1,
            count: 10,
            height: 64,
            width: 64,
            base_images: None,
            degradation: DegradationConfig::default_recipes(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub format_version: u32,
    pub n_subjects: usize,
    pub temperature: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            format_version: 1,
            n_subjects: 30,
            temperature: 0.05,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub format_version: u32,
    pub study_id: String,
    pub sanity_rate: f64,
    pub min_consistency: f64,
    pub methods: Vec<String>,
    /// Static files served under `/ui/` and at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            format_version: 1,
            study_id: "study".into(),
            sanity_rate: 0.1,
            min_consistency: 0.8,
            methods: Vec::new(),
            ui_dir: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub format_version: u32,
    pub min_consistency: f64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            format_version: 1,
            min_consistency: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Preset {
    Full,
    Tiny,
}

/// A preset name (`"full"`, `"tiny"`) or a complete model config.
#[derive(Debug)]
pub enum ModelSpec {
    Preset(Preset),
    Custom(Box<IacaConfig>),
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(name) => match name.as_str() {
                "full" => Ok(ModelSpec::Preset(Preset::Full)),
                "tiny" => Ok(ModelSpec::Preset(Preset::Tiny)),
                other => Err(D::Error::custom(format!("unknown model preset `{other}`, expected `full` or `tiny`"))),
            },
            other => serde_json::from_value(other)
                .map(|c| ModelSpec::Custom(Box::new(c)))
                .map_err(|e| D::Error::custom(format!("model: {e}"))),
        }
    }
}

impl ModelSpec {
    pub fn resolve(self) -> IacaConfig {
        match self {
            ModelSpec::Preset(Preset::Full) => IacaConfig::full(),
            ModelSpec::Preset(Preset::Tiny) => IacaConfig::tiny(),
            ModelSpec::Custom(c) => *c,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqaTrainConfig {
    pub format_version: u32,
    pub model: ModelSpec,
    pub hyper: IqaTrainHyper,
    /// Split JSON; training uses its train contents. All contents when absent.
    pub split: Option<PathBuf>,
}

impl Default for IqaTrainConfig {
    fn default() -> Self {
        IqaTrainConfig {
            format_version: 1,
            model: ModelSpec::Preset(Preset::Full),
            hyper: IqaTrainHyper::default(),
            split: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub format_version: u32,
    pub train: EnhanceTrainConfig,
    pub split: Option<PathBuf>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            format_version: 1,
            train: EnhanceTrainConfig::default(),
            split: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationsConfig {
    pub format_version: u32,
    /// Split JSON; evaluation uses its test contents. All contents when absent.
    pub split: Option<PathBuf>,
}

impl Default for CorrelationsConfig {
    fn default() -> Self {
        CorrelationsConfig {
            format_version: 1,
            split: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub format_version: u32,
    pub ours: String,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            format_version: 1,
            ours: "ours".into(),
        }
    }
}
