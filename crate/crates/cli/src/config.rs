//! Flat `key=value` run configuration: model keys, training keys and the
//! embedding provider, one schema for files and `--override` flags.

use std::fs;
use std::path::Path;

use docparse_core::embed::EmbeddingProvider;
use docparse_core::model::ModelConfig;
use docparse_core::train::TrainConfig;
use docparse_core::{Error, Result};

pub const PROVIDER_KEY: &str = "provider";
pub const DEFAULT_PROVIDER: &str = "hash:0";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub provider: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), provider: DEFAULT_PROVIDER.into() }
    }
}

impl RunConfig {
    /// Every schema key, in display order.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = ModelConfig::KEYS.to_vec();
        keys.extend(TrainConfig::KEYS);
        keys.push(PROVIDER_KEY);
        keys
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key == PROVIDER_KEY {
            return Some(self.provider.clone());
        }
        self.model.get(key).or_else(|| self.train.get(key))
    }

    /// `seed` drives both model initialization and the training stream.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == PROVIDER_KEY {
            self.provider = value.trim().to_string();
            return Ok(());
        }
        if self.model.set(key, value)? {
            if key == "seed" {
                self.train.seed = self.model.seed;
            }
            return Ok(());
        }
        if self.train.set(key, value)? {
            return Ok(());
        }
        Err(Error::Config(format!("unknown config key `{key}` (see --help for the list)")))
    }

    pub fn apply_line(&mut self, line: &str, origin: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}: expected key=value, got `{line}`")))?;
        self.set(k.trim(), v.trim()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{origin}: {m}")),
            other => other,
        })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let key = line.split_once('=').map(|(k, _)| k.trim().to_string()).unwrap_or_default();
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("{at}: key `{key}` given twice")));
            }
            cfg.apply_line(line, &at)?;
        }
        Ok(cfg)
    }

    /// Optional config file, then overrides in order, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
                RunConfig::parse(&text, &p.display().to_string())?
            }
            None => RunConfig::default(),
        };
        for o in overrides {
            cfg.apply_line(o, "--override")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.provider()?;
        Ok(())
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        EmbeddingProvider::parse(&self.provider, self.model.embed_dim)
    }

    pub fn to_text(&self) -> String {
        Self::keys().into_iter().map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default())).collect()
    }

    /// `key = default` lines for `--help`.
    pub fn help_text() -> String {
        let d = RunConfig::default();
        let mut s = String::from("Config keys (flat key=value file, `#` comments; override with --override key=value):\n");
        for k in Self::keys() {
            s.push_str(&format!("  {k} = {}\n", d.get(k).unwrap_or_default()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = RunConfig::default();
        c.set("seed", "7").unwrap();
        c.set("lr", "0.01").unwrap();
        c.set("crop", "64x96").unwrap();
        let back = RunConfig::parse(&c.to_text(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 7);
        assert_eq!(RunConfig::keys().len(), 27);
        for k in RunConfig::keys() {
            assert!(RunConfig::help_text().contains(&format!("  {k} = ")), "{k}");
        }
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        assert!(matches!(RunConfig::parse("bogus=1", "f"), Err(Error::Config(m)) if m.contains("bogus") && m.contains("f:1")));
        assert!(RunConfig::parse("lr=1\n# c\nlr=2", "f").is_err());
        assert!(RunConfig::parse("lr", "f").is_err());
        assert!(RunConfig::load(None, &["crop=100".into()]).is_err());
        assert!(RunConfig::load(None, &["provider=nope".into()]).is_err());
        let c = RunConfig::load(None, &["epochs=3".into(), "batch_size = 2 ".into()]).unwrap();
        assert_eq!((c.train.epochs, c.train.batch_size), (3, 2));
    }
}
