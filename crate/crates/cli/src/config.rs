use std::path::{Path, PathBuf};

use ciar_core::decoder::{DecodeConfig, Policy};
use ciar_core::experiment::SweepGrid;
use ciar_core::netsim::{profile_by_name, ComputeCost, NetworkProfile, PayloadModel};
use ciar_core::toy::{AnalyticHeadConfig, InterHeadParams, ModelParams, SceneSpec};
use ciar_core::training::InterDroConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Toy model generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub seed: u64,
    /// Give the device the cloud's decoder and readout weights.
    pub shared: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            seed: 0,
            shared: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSource {
    Analytic(AnalyticHeadConfig),
    /// A head written by `train`.
    File { path: PathBuf },
}

impl Default for HeadSource {
    fn default() -> Self {
        HeadSource::Analytic(AnalyticHeadConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Named(String),
    Inline(NetworkProfile),
}

impl Default for NetworkChoice {
    fn default() -> Self {
        NetworkChoice::Named("5G".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelSettings,
    pub head: HeadSource,
    pub decode: DecodeConfig,
    pub policies: Vec<Policy>,
    /// Consecutive seeds starting at `decode.seed` used by `simulate` and
    /// `netsim` when there is no seed grid.
    pub episodes: usize,
    pub network: NetworkChoice,
    /// Overrides `decode.payload` when present.
    pub payload: Option<PayloadModel>,
    pub compute: ComputeCost,
    pub training: Option<InterDroConfig>,
    pub sweep: Option<SweepGrid>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            model: ModelSettings::default(),
            head: HeadSource::default(),
            decode: DecodeConfig::default(),
            policies: vec![Policy::Ciar, Policy::Uniform, Policy::BaseCloud, Policy::BaseDevice],
            episodes: 1,
            network: NetworkChoice::default(),
            payload: None,
            compute: ComputeCost::default(),
            training: None,
            sweep: None,
            output_dir: PathBuf::from("ciar-out"),
        }
    }
}

/// 1-based line and column to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let parse_err = |e: serde_json::Error| {
            let at = byte_offset(text, e.line(), e.column());
            CliError::Config(format!("{e} (byte offset {at})"))
        };
        let mut raw: Value = serde_json::from_str(text).map_err(parse_err)?;
        // seq_len follows the scene unless given explicitly.
        if let Some(obj) = raw.as_object_mut() {
            let scene: SceneSpec = match obj.get("scene") {
                Some(s) => serde_json::from_value(s.clone()).map_err(|e| CliError::Config(format!("scene: {e}")))?,
                None => SceneSpec::default(),
            };
            let decode = obj.entry("decode").or_insert_with(|| Value::Object(Default::default()));
            if let Some(d) = decode.as_object_mut() {
                d.entry("seq_len").or_insert_with(|| Value::from(scene.seq_len()));
            }
        }
        let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `payload` to the decode settings and checks every block.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        if let Some(p) = self.payload {
            self.decode.payload = p;
        }
        let field = |name: &str, e: ciar_core::Error| CliError::Config(format!("{name}: {e}"));
        self.scene.validate().map_err(|e| field("scene", e))?;
        self.decode.validate().map_err(|e| field("decode", e))?;
        if self.decode.seq_len != self.scene.seq_len() {
            return Err(CliError::Config(format!(
                "decode.seq_len: {} does not match scene h*w = {}",
                self.decode.seq_len,
                self.scene.seq_len()
            )));
        }
        if self.model.hidden_dim == 0 {
            return Err(CliError::Config("model.hidden_dim: must be positive".into()));
        }
        if self.policies.is_empty() {
            return Err(CliError::Config("policies: must not be empty".into()));
        }
        if self.episodes == 0 {
            return Err(CliError::Config("episodes: must be positive".into()));
        }
        self.network_profile()?;
        self.compute.validate().map_err(|e| field("compute", e))?;
        if let Some(t) = &self.training {
            t.validate().map_err(|e| field("training", e))?;
        }
        if let Some(s) = &self.sweep {
            s.validate().map_err(|e| field("sweep", e))?;
        }
        Ok(self)
    }

    pub fn network_profile(&self) -> Result<NetworkProfile, CliError> {
        match &self.network {
            NetworkChoice::Named(name) => profile_by_name(name)
                .ok_or_else(|| CliError::Config(format!("network: unknown profile {name:?} (expected 5G, 4G or WiFi)"))),
            NetworkChoice::Inline(p) => {
                p.validate().map_err(|e| CliError::Config(format!("network: {e}")))?;
                Ok(*p)
            }
        }
    }

    pub fn model_params(&self) -> Result<ModelParams, CliError> {
        let (n, d, seed) = (self.scene.vocab_size, self.model.hidden_dim, self.model.seed);
        let p = if self.model.shared {
            ModelParams::generate_shared(n, d, seed)
        } else {
            ModelParams::generate(n, d, seed)
        };
        p.map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn head(&self, params: &ModelParams) -> Result<InterHeadParams, CliError> {
        match &self.head {
            HeadSource::Analytic(cfg) => Ok(InterHeadParams::analytic(params, cfg)),
            HeadSource::File { path } => {
                let f = std::fs::File::open(path)
                    .map_err(|e| CliError::Config(format!("head.path: cannot open {}: {e}", path.display())))?;
                let head = InterHeadParams::read_binary(std::io::BufReader::new(f))
                    .map_err(|e| CliError::Config(format!("head.path: {e}")))?;
                if head.vocab_size() != params.vocab_size || head.input_dim() != params.head_input_dim() {
                    return Err(CliError::Config(format!(
                        "head.path: head is {}x{}, model needs {}x{}",
                        head.vocab_size(),
                        head.input_dim(),
                        params.vocab_size,
                        params.head_input_dim()
                    )));
                }
                Ok(head)
            }
        }
    }

    /// Seeds for non-sweep commands.
    pub fn episode_seeds(&self) -> Vec<u64> {
        match self.sweep.as_ref().and_then(|s| s.seed.clone()) {
            Some(seeds) => seeds,
            None => (0..self.episodes as u64).map(|i| self.decode.seed.wrapping_add(i)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_offsets() {
        let text = "{\n  \"a\": 1,\n  x\n}";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 3, 3), 14);
        assert_eq!(&text[14..15], "x");
    }

    #[test]
    fn seq_len_follows_scene() {
        let cfg = RunConfig::from_json(r#"{"scene": {"h": 4, "w": 5}}"#).unwrap();
        assert_eq!(cfg.decode.seq_len, 20);
        let cfg = cfg.finalize().unwrap();
        assert_eq!(cfg.decode.seq_len, 20);
        let bad = RunConfig::from_json(r#"{"scene": {"h": 4, "w": 5}, "decode": {"seq_len": 7}}"#).unwrap();
        assert!(bad.finalize().unwrap_err().to_string().contains("decode.seq_len"));
    }

    #[test]
    fn policies_and_network_parse() {
        let cfg = RunConfig::from_json(
            r#"{"policies": ["ciar", {"fixed_split": 0.5}], "network": {"bandwidth_mbps": 50, "rtt_ms": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.policies, vec![Policy::Ciar, Policy::FixedSplit(0.5)]);
        assert_eq!(cfg.network_profile().unwrap().rtt_ms, 5.0);
        let named = RunConfig::from_json(r#"{"network": "3G"}"#).unwrap();
        assert!(named.finalize().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"decode": {"tua": 0.1}}"#).is_err());
    }
}
