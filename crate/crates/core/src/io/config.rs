//! Run configuration: a flat `key = value` text file.
//!
//! ```text
//! # comments start with '#'
//! network = toy-classify     # builtin: full-classify, full-segment, toy-classify, toy-segment
//! data = data/manifest.txt   # relative to this file
//! out = runs/toy             # relative to this file
//! epochs = 30
//! batch = 16
//! lr = 0.001
//! schedule = cosine          # constant or cosine (annealed to 0 over the epochs)
//! seed = 7
//! dropout = 0.3              # optional, overrides the network's rate
//! ablation = full            # full, nS, nP, ndot, nsub
//! rotate = none              # training augmentation: none or z
//! ```
//!
//! Network keys (`task`, `heads`, `head_hidden`, `bias`, repeated `stage`
//! lines) customize or replace the builtin; see [`NetworkSpec::from_pairs`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::NetworkSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    RotateZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning rate for 1-based `epoch` out of `epochs`.
    pub fn rate(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => lr,
            Schedule::Cosine => {
                let t = (epoch - 1) as f64 / epochs as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub augment: Augment,
}

const RUN_KEYS: [&str; 9] = ["data", "out", "epochs", "batch", "lr", "schedule", "seed", "rotate", "network"];
const NET_KEYS: [&str; 8] = ["name", "task", "heads", "head_hidden", "dropout", "bias", "ablation", "stage"];

/// Splits text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source, format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !RUN_KEYS.contains(&k) && !NET_KEYS.contains(&k) {
            return Err(Error::parse(source, format!("line {}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Paths in the text are resolved against `base`.
    pub fn parse(text: &str, base: &Path, source: &str) -> Result<Self> {
        let pairs = parse_pairs(text, source)?;
        let get = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let num = |k: &str, default: &str| -> Result<f64> {
            let v = get(k).unwrap_or(default);
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("{k} must be a number, got {v:?}")))
        };
        let int = |k: &str, default: usize| -> Result<usize> {
            match get(k) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("{k} must be a non-negative integer, got {v:?}"))),
            }
        };
        let network = NetworkSpec::from_pairs(&pairs)?;
        let data = base.join(get("data").ok_or_else(|| Error::Config("missing data = <manifest>".into()))?);
        let out = base.join(get("out").unwrap_or("run"));
        let epochs = int("epochs", 1)?;
        let batch = int("batch", 16)?;
        let lr = num("lr", "0.001")?;
        let seed = int("seed", 0)? as u64;
        let augment = match get("rotate").unwrap_or("none") {
            "none" => Augment::None,
            "z" => Augment::RotateZ,
            other => return Err(Error::Config(format!("rotate must be none or z, got {other:?}"))),
        };
        let schedule = match get("schedule").unwrap_or("constant") {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine,
            other => return Err(Error::Config(format!("schedule must be constant or cosine, got {other:?}"))),
        };
        if epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        Ok(RunConfig {
            network,
            data,
            out,
            epochs,
            batch,
            lr,
            schedule,
            seed,
            augment,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let c = RunConfig::parse(
            "network = toy-classify\ndata = d/m.txt\nepochs = 3\ndropout = 0.5 # note\n",
            Path::new("/base"),
            "c",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch, 16);
        assert_eq!(c.data, Path::new("/base/d/m.txt"));
        assert_eq!(c.network.dropout, 0.5);
    }

    #[test]
    fn rejects_invalid_values() {
        let base = Path::new(".");
        for text in [
            "network = toy-classify\ndata = m\nepochs = 0\n",
            "network = toy-classify\ndata = m\nbatch = 0\n",
            "network = toy-classify\ndata = m\nlr = -1\n",
            "network = toy-classify\nepochs = 1\n",
            "network = toy-classify\ndata = m\ncolour = red\n",
            "network = toy-classify\ndata m\n",
        ] {
            assert!(RunConfig::parse(text, base, "c").is_err(), "{text}");
        }
    }
}
