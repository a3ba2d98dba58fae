//! Run configuration: one TOML file, every key overridable by dotted path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sfanet::data::SceneSpec;
use sfanet::network::SfanetConfig;
use sfanet::training::TrainConfig;
use sfanet::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub width: f64,
    pub input_h: usize,
    pub input_w: usize,
    /// Auxiliary loss weights of decoder stages 1..4.
    pub lambda: [f64; 4],
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = SfanetConfig::default();
        ModelSection {
            num_classes: d.num_classes,
            width: d.width,
            input_h: d.input_h,
            input_w: d.input_w,
            lambda: d.lambda,
        }
    }
}

impl ModelSection {
    pub fn network(&self, mode: Mode) -> SfanetConfig {
        SfanetConfig {
            num_classes: self.num_classes,
            width: self.width,
            input_h: self.input_h,
            input_w: self.input_w,
            lambda: self.lambda,
            mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scene: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// Per-channel pixel mean; computed from the training split when unset.
    pub mean: Option<[f32; 3]>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scene: SceneSpec::default(),
            train_count: 1000,
            val_count: 100,
            mean: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset_dir: "data".into(),
            checkpoint_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup: usize,
    pub iters: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            warmup: 10,
            iters: 5000,
            height: 64,
            width: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub paths: PathsSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets `key` (dotted path such as `train.ohem.threshold`) to `value`,
    /// read as a TOML literal or, failing that, a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let mut root = toml::Table::try_from(&*self)?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            bail!("malformed key `{key}`");
        }
        let (last, parents) = parts.split_last().expect("non-empty split");
        let mut table = &mut root;
        for p in parents {
            table = match table.get_mut(*p) {
                Some(toml::Value::Table(t)) => t,
                _ => bail!("unknown config key `{key}`"),
            };
        }
        table.insert((*last).to_string(), parse_literal(value));
        let updated: RunConfig = toml::Value::Table(root)
            .try_into()
            .with_context(|| format!("invalid value for `{key}`"))?;
        *self = updated;
        Ok(())
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.network(Mode::Train).validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        if self.data.scene.num_classes != self.model.num_classes {
            bail!(
                "data.scene.num_classes = {} but model.num_classes = {}",
                self.data.scene.num_classes,
                self.model.num_classes
            );
        }
        if self.data.train_count == 0 {
            bail!("data.train_count must be positive");
        }
        Ok(())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// `(dotted key, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b=v` and `--a.b v` overrides out of an argument list.
pub fn extract_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(kv) => match kv.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().with_context(|| format!("missing value for --{kv}"))?;
                    overrides.push((kv.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[model]\nwidht = 0.5\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::default().set("train.no_such", "1").is_err());
        assert!(RunConfig::default().set("nope.x", "1").is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("train.ohem.threshold", "0.5").unwrap();
        cfg.set("model.lambda", "[0, 0, 0, 0]").unwrap();
        cfg.set("train.ohem.min_kept", "12").unwrap();
        cfg.set("paths.dataset_dir", "/tmp/x").unwrap();
        cfg.set("data.mean", "[1.0, 2.0, 3.0]").unwrap();
        assert_eq!(cfg.train.ohem.threshold, 0.5);
        assert_eq!(cfg.train.ohem.min_kept, Some(12));
        assert_eq!(cfg.model.lambda, [0.0; 4]);
        assert_eq!(cfg.paths.dataset_dir, PathBuf::from("/tmp/x"));
        assert!(cfg.set("train.batch_size", "many").is_err());
    }

    #[test]
    fn every_default_is_overridable() {
        fn leaves(prefix: &str, t: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    toml::Value::Table(sub) => leaves(&key, sub, out),
                    v => out.push((key, v.clone())),
                }
            }
        }
        let cfg = RunConfig::default();
        let mut all = Vec::new();
        leaves("", &toml::Table::try_from(&cfg).unwrap(), &mut all);
        assert!(all.len() > 20);
        for (key, value) in all {
            let mut c = cfg.clone();
            c.set(&key, &value.to_string()).unwrap_or_else(|e| panic!("{key}: {e:#}"));
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn override_extraction() {
        let args = ["train", "--model.width=0.5", "--force", "--train.seed", "3", "--config", "a.toml"];
        let (rest, ov) = extract_overrides(args.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(rest, vec!["train", "--force", "--config", "a.toml"]);
        assert_eq!(
            ov,
            vec![("model.width".into(), "0.5".into()), ("train.seed".into(), "3".into())]
        );
    }

    #[test]
    fn class_mismatch_is_reported() {
        let mut cfg = RunConfig::default();
        cfg.model.num_classes = 5;
        assert!(cfg.validate().is_err());
    }
}
