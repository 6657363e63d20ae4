//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::WeightNetConfig;
use crate::env::{EnvConfig, EnvName};
use crate::error::{Error, Result};
use crate::infocomp::{DiscriminatorConfig, GeneratorConfig};
use crate::policy::{DecoderConfig, MixerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned weights, generated-state conditioning.
    Pagnet,
    /// Weight network bypassed: `W = 0`, every receiver sees raw messages.
    PagnetFc,
    /// Pretrained weight and generative networks, frozen.
    PagnetPt,
    /// No communication; mixer conditioned on the true state.
    Qmix,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Pagnet, Mode::PagnetFc, Mode::PagnetPt, Mode::Qmix];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pagnet => "pagnet",
            Mode::PagnetFc => "pagnet_fc",
            Mode::PagnetPt => "pagnet_pt",
            Mode::Qmix => "qmix",
        }
    }

    pub fn uses_generator(self) -> bool {
        self != Mode::Qmix
    }

    pub fn uses_weight_net(self) -> bool {
        matches!(self, Mode::Pagnet | Mode::PagnetPt)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected pagnet, pagnet_fc, pagnet_pt or qmix)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Episodes.
    pub buffer_capacity: usize,
    /// Episodes per update.
    pub batch_size: usize,
    /// New episodes collected between consecutive updates.
    pub episodes_per_update: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    /// Training updates between target syncs (and checkpoint writes).
    pub target_sync_interval: u64,
    pub alpha: f64,
    pub total_env_steps: u64,
    /// Env steps between evaluation pauses; defaults per environment.
    pub eval_interval: Option<u64>,
    pub eval_episodes: usize,
    /// Timesteps drawn from the episode batch for each adversarial update (0 = all).
    pub gan_samples: usize,
    /// Pretrained checkpoint for `pagnet_pt`.
    pub checkpoint_path: Option<PathBuf>,
    pub unfreeze_generator: bool,
    pub pretrain_updates: usize,
    pub pretrain_batch: usize,
    pub heldout_fraction: f64,
    pub collect_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            buffer_capacity: 5000,
            batch_size: 32,
            episodes_per_update: 1,
            learning_rate: 5e-4,
            grad_clip: 10.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            target_sync_interval: 200,
            alpha: 0.0004,
            total_env_steps: 2_000_000,
            eval_interval: None,
            eval_episodes: 100,
            gan_samples: 0,
            checkpoint_path: None,
            unfreeze_generator: false,
            pretrain_updates: 2000,
            pretrain_batch: 256,
            heldout_fraction: 0.1,
            collect_episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub weight_net: WeightNetConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub decoder: DecoderConfig,
    pub mixer: MixerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Pagnet,
            out_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl Config {
    /// Parses TOML text, then applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Env steps between evaluation pauses.
    pub fn eval_interval(&self) -> u64 {
        self.train.eval_interval.unwrap_or(match self.env.name {
            EnvName::Hallway => 10_000,
            EnvName::Lbf => 50_000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&t.gamma) {
            return bad(format!("train.gamma must be in [0, 1), got {}", t.gamma));
        }
        for (name, v) in [
            ("train.buffer_capacity", t.buffer_capacity as u64),
            ("train.batch_size", t.batch_size as u64),
            ("train.episodes_per_update", t.episodes_per_update as u64),
            ("train.target_sync_interval", t.target_sync_interval),
            ("train.eval_episodes", t.eval_episodes as u64),
            ("train.pretrain_batch", t.pretrain_batch as u64),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if t.batch_size > t.buffer_capacity {
            return bad(format!("train.batch_size {} exceeds train.buffer_capacity {}", t.batch_size, t.buffer_capacity));
        }
        if !(t.learning_rate > 0.0) || !(t.grad_clip > 0.0) || !(t.alpha >= 0.0) {
            return bad("train.learning_rate and train.grad_clip must be positive, train.alpha non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.epsilon_start) || !(0.0..=1.0).contains(&t.epsilon_end) || t.epsilon_end > t.epsilon_start {
            return bad(format!("epsilon schedule must satisfy 0 <= end <= start <= 1, got {} -> {}", t.epsilon_start, t.epsilon_end));
        }
        if t.eval_interval == Some(0) {
            return bad("train.eval_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&t.heldout_fraction) {
            return bad(format!("train.heldout_fraction must be in [0, 1), got {}", t.heldout_fraction));
        }
        if self.mode == Mode::PagnetPt && t.checkpoint_path.is_none() {
            return bad("mode pagnet_pt needs train.checkpoint_path pointing at a pretrained checkpoint".into());
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let value = parse_literal(raw.trim());
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is inside a non-table value")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("key has at least one segment")
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.eval_interval(), 10_000);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = Config::from_toml_str(
            "seed = 3\n[env]\nname = \"lbf\"\n",
            &["train.batch_size=8".into(), "env.lbf.grid=6".into(), "mode=qmix".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!((c.seed, c.mode, c.train.batch_size, c.env.lbf.grid), (9, Mode::Qmix, 8, 6));
        assert_eq!(c.eval_interval(), 50_000);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(Config::from_toml_str("", &["train.gamma=1.0".into()]), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml_str("", &["mode=pagnet_pt".into()]), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml_str("", &["train.typo=1".into()]), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml_str("", &["nokey".into()]), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml_str("", &["train.epsilon_end=0.9".into(), "train.epsilon_start=0.5".into()]), Err(Error::Config(_))));
        assert!("bogus".parse::<Mode>().is_err());
    }
}
