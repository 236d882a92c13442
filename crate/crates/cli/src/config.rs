//! The run configuration: one TOML document, every section optional.

use std::fs;
use std::path::{Path, PathBuf};

use meaflow::baselines::{BaselineConfig, BaselineMethod};
use meaflow::dataset::Dpi;
use meaflow::eval::{Averaging, PipelineSpec};
use meaflow::gbt::GbtConfig;
use meaflow::nn::CnnConfig;
use meaflow::preprocess::PreprocessConfig;
use meaflow::signal::DetectorConfig;
use meaflow::synth::{SynthRecordingConfig, SynthTableConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub filter_order: usize,
    pub cutoff_hz: f64,
    pub detector: DetectorConfig,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            filter_order: 2,
            cutoff_hz: 200.0,
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Method for `train`, `eval` and the per-dpi summary of `pipeline`.
    pub method: BaselineMethod,
    /// Methods for `compare` and `pipeline --compare`.
    pub methods: Vec<BaselineMethod>,
    pub k: usize,
    pub seed: u64,
    pub averaging: Averaging,
    pub pr_thresholds: usize,
    /// Days post-infection covered by `synth` and `pipeline`.
    pub dpis: Vec<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: BaselineMethod::Fused,
            methods: BaselineMethod::ALL.to_vec(),
            k: 10,
            seed: 0,
            averaging: Averaging::Weighted,
            pr_thresholds: 100,
            dpis: Dpi::all().iter().map(|d| d.day()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Parent of the per-run output directories.
    pub runs_dir: PathBuf,
    /// Feature table or recording read by single-input commands.
    pub input: Option<PathBuf>,
    /// Directory of per-dpi tables for `pipeline`, named like `synth` names them.
    pub input_dir: Option<PathBuf>,
    /// Also render SVG plots next to the CSV reports.
    pub svg: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            runs_dir: PathBuf::from("runs"),
            input: None,
            input_dir: None,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthTableConfig,
    pub recording: SynthRecordingConfig,
    pub signal: SignalConfig,
    pub preprocess: PreprocessConfig,
    pub nn: CnnConfig,
    pub gbt: GbtConfig,
    pub baselines: BaselineConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
    /// Serial execution and zeroed wall-clock fields, so that every output
    /// file is a pure function of the configuration and inputs.
    pub deterministic: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        let s = |e: meaflow::Error| e.to_string();
        self.synth.validate().map_err(s)?;
        self.recording.validate().map_err(s)?;
        self.nn.validate().map_err(s)?;
        self.gbt.validate().map_err(s)?;
        if !(self.preprocess.tau >= 0.0 && self.preprocess.tau.is_finite()) {
            return Err("preprocess.tau must be finite and ≥ 0".into());
        }
        if self.preprocess.n_components == Some(0) {
            return Err("preprocess.n_components must be positive".into());
        }
        if self.signal.filter_order != 2 {
            return Err("signal.filter_order: only 2nd-order designs are supported".into());
        }
        if !(self.signal.cutoff_hz > 0.0 && self.signal.cutoff_hz < self.recording.fs_hz / 2.0) {
            return Err("signal.cutoff_hz must lie in (0, fs/2)".into());
        }
        let d = &self.signal.detector;
        if !(d.k_sigma > 0.0 && d.window_ms > 0.0 && d.refractory_ms >= 0.0) {
            return Err("signal.detector: k_sigma and window_ms must be positive".into());
        }
        if self.eval.k < 2 {
            return Err("eval.k must be at least 2".into());
        }
        if self.eval.pr_thresholds < 2 {
            return Err("eval.pr_thresholds must be at least 2".into());
        }
        if self.eval.methods.is_empty() {
            return Err("eval.methods must not be empty".into());
        }
        if self.eval.dpis.is_empty() {
            return Err("eval.dpis must not be empty".into());
        }
        for &day in &self.eval.dpis {
            Dpi::new(day).map_err(s)?;
        }
        Ok(())
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    pub fn pipeline_spec(&self, method: BaselineMethod) -> PipelineSpec {
        PipelineSpec {
            method,
            k: self.eval.k,
            seed: self.eval.seed,
            averaging: self.eval.averaging,
            pr_thresholds: self.eval.pr_thresholds,
            preprocess: self.preprocess.clone(),
            nn: self.nn.clone(),
            gbt: self.gbt.clone(),
            baselines: self.baselines.clone(),
        }
    }
}
