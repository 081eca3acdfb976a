//! Run configuration: defaults, ablation presets and the user's TOML file,
//! resolved in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{CameraSpec, EnvParams};
use crate::error::{Error, Result};
use crate::mvdloss::{MvdConfig, Similarity};
use crate::rl::AgentConfig;

/// Names accepted by [`apply_preset`]. `single-camera-<id>` is accepted for
/// every known camera id.
pub const PRESETS: [&str; 7] = [
    "mvd",
    "mvd-sharedonly",
    "single-camera-<id>",
    "random-cameras",
    "no-shared-negatives",
    "no-private-negatives",
    "bilinear",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub cameras: Vec<String>,
    #[serde(flatten)]
    pub params: EnvParams,
    /// Keys no field claimed; rejected by [`resolve`].
    #[serde(flatten, skip_serializing)]
    unknown: toml::Table,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            cameras: vec!["ego".into(), "static".into()],
            params: EnvParams::default(),
            unknown: toml::Table::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvdSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: MvdConfig,
    #[serde(flatten, skip_serializing)]
    unknown: toml::Table,
}

impl Default for MvdSection {
    fn default() -> Self {
        MvdSection {
            enabled: true,
            config: MvdConfig::default(),
            unknown: toml::Table::new(),
        }
    }
}

/// How the camera pair is drawn under the "all cameras" evaluation condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPairs {
    #[default]
    PerStep,
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_pairs: EvalPairs,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write `step_<n>.ckpt` every this many env steps; 0 disables.
    pub checkpoint_interval: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            total_steps: 60_000,
            eval_interval: 2000,
            eval_episodes: 20,
            eval_pairs: EvalPairs::PerStep,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub env: EnvSection,
    pub algo: AgentConfig,
    pub mvd: MvdSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.params.validate()?;
        if self.env.cameras.is_empty() {
            return Err(Error::config("env.cameras", "at least one camera is required"));
        }
        for (i, id) in self.env.cameras.iter().enumerate() {
            CameraSpec::from_id(id).map_err(|_| Error::config("env.cameras", format!("unknown camera `{id}`")))?;
            if self.env.cameras[..i].contains(id) {
                return Err(Error::config("env.cameras", format!("camera `{id}` listed twice")));
            }
        }
        self.algo.validate()?;
        if self.mvd.enabled {
            self.mvd.config.validate()?;
            if self.env.cameras.len() < 2 {
                return Err(Error::config("mvd.enabled", "the multi-view losses need at least 2 cameras"));
            }
        }
        if self.run.eval_interval == 0 {
            return Err(Error::config("run.eval_interval", "must be positive"));
        }
        if self.run.eval_episodes == 0 {
            return Err(Error::config("run.eval_episodes", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// MVD settings handed to the agent, `None` when the losses are off.
    pub fn agent_mvd(&self) -> Option<MvdConfig> {
        self.mvd.enabled.then(|| self.mvd.config.clone())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved TOML text, lowercase hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Expand a preset on top of `cfg`.
pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let m = &mut cfg.mvd;
    match name {
        "mvd" => m.enabled = true,
        "mvd-sharedonly" => {
            m.enabled = true;
            m.config.shared_only = true;
        }
        "random-cameras" => m.enabled = false,
        "no-shared-negatives" => {
            m.enabled = true;
            m.config.use_shared_negatives = false;
        }
        "no-private-negatives" => {
            m.enabled = true;
            m.config.use_private_negatives = false;
        }
        "bilinear" => {
            m.enabled = true;
            m.config.similarity = Similarity::Bilinear;
        }
        _ => match name.strip_prefix("single-camera-") {
            Some(id) if CameraSpec::from_id(id).is_ok() => {
                m.enabled = false;
                cfg.env.cameras = vec![id.to_string()];
            }
            _ => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", ")),
                ))
            }
        },
    }
    cfg.preset = Some(name.to_string());
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolve config text: defaults, then the preset (`preset` argument or the
/// file's top-level `preset` key, the argument winning), then the file.
pub fn resolve(text: &str, source: &str, preset: Option<&str>) -> Result<RunConfig> {
    let located = |e: toml::de::Error| Error::config(source, e.to_string().trim_end().to_string());
    // Parse once on its own so that unknown keys and type errors carry the
    // file's line and column.
    let user: RunConfig = toml::from_str(text).map_err(located)?;
    for (section, unknown) in [("env", &user.env.unknown), ("mvd", &user.mvd.unknown)] {
        if let Some(key) = unknown.keys().next() {
            let line = text
                .lines()
                .position(|l| l.trim_start().strip_prefix(key.as_str()).is_some_and(|r| r.trim_start().starts_with('=')))
                .map_or(String::new(), |i| format!(" (line {})", i + 1));
            return Err(Error::config(
                format!("{section}.{key}"),
                format!("unknown key in {source}{line}"),
            ));
        }
    }
    let table: toml::Table = toml::from_str(text).map_err(located)?;
    let mut cfg = RunConfig::default();
    if let Some(name) = preset.or(user.preset.as_deref()) {
        apply_preset(&mut cfg, name)?;
    }
    let mut merged = toml::Table::try_from(&cfg).expect("run config serializes");
    merge(&mut merged, table);
    let mut cfg: RunConfig = merged.try_into().map_err(located)?;
    if let Some(name) = preset {
        cfg.preset = Some(name.to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, preset: Option<&str>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    resolve(&text, &path.display().to_string(), preset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::AlgoMode;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = resolve("", "empty.toml", None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.algo.gamma, 0.99);
        assert_eq!(cfg.algo.batch_size, 128);
        assert_eq!(cfg.mvd.config.temperature, 0.1);
        assert_eq!(cfg.run.eval_episodes, 20);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        for (text, needle) in [
            ("[algo]\nbatch_sise = 3\n", "batch_sise"),
            ("[env]\ncontrasts = 0.1\n", "contrasts"),
            ("[mvd]\ntemprature = 0.2\n", "temprature"),
            ("[runn]\n", "runn"),
        ] {
            let err = resolve(text, "cfg.toml", None).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
            assert!(err.contains("cfg.toml") && err.contains("line"), "{err}");
        }
    }

    #[test]
    fn type_and_value_errors_name_the_key() {
        let err = resolve("[algo]\ngamma = \"high\"\n", "c.toml", None).unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        let err = resolve("[algo]\nbatch_size = 0\n", "c.toml", None).unwrap_err().to_string();
        assert!(err.contains("algo.batch_size"), "{err}");
        let err = resolve("[env]\ncameras = [\"ego\", \"roof\"]\n", "c.toml", None).unwrap_err().to_string();
        assert!(err.contains("env.cameras"), "{err}");
    }

    #[test]
    fn presets_expand() {
        let so = resolve("", "-", Some("mvd-sharedonly")).unwrap();
        assert!(so.mvd.enabled && so.mvd.config.shared_only);
        let rc = resolve("", "-", Some("random-cameras")).unwrap();
        assert!(!rc.mvd.enabled);
        assert_eq!(rc.env.cameras.len(), 2);
        let sc = resolve("", "-", Some("single-camera-static")).unwrap();
        assert_eq!(sc.env.cameras, vec!["static".to_string()]);
        assert!(!sc.mvd.enabled);
        let bl = resolve("preset = \"bilinear\"\n", "-", None).unwrap();
        assert_eq!(bl.mvd.config.similarity, Similarity::Bilinear);
        assert!(resolve("", "-", Some("single-camera-roof")).is_err());
        assert!(resolve("", "-", Some("nope")).is_err());
    }

    #[test]
    fn file_overrides_preset() {
        let text = "[mvd]\nshared_only = false\n[algo]\nmode = \"drq\"\n";
        let cfg = resolve(text, "-", Some("mvd-sharedonly")).unwrap();
        assert!(!cfg.mvd.config.shared_only);
        assert_eq!(cfg.algo.mode, AlgoMode::Drq);
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = resolve("[run]\ntotal_steps = 10\n", "-", Some("no-private-negatives")).unwrap();
        let back = resolve(&cfg.to_toml(), "-", None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
