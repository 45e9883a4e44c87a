//! Experiment configuration: training, data generation and run plumbing in
//! one flat `key=value` file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::model::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Size of the held-out split written next to the training split.
    pub n_test: usize,
    /// Fraction of training pairs whose partner is shuffled before training.
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            n_test: 512,
            noise_ratio: 0.0,
            noise_seed: 1,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n",
        "latent_dim",
        "dx",
        "dy",
        "noise_sigma",
        "data_seed",
        "n_test",
        "noise_ratio",
        "noise_seed",
        "data_dir",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n" => self.synth.n = parse(key, value)?,
            "latent_dim" => self.synth.latent_dim = parse(key, value)?,
            "dx" => self.synth.dx = parse(key, value)?,
            "dy" => self.synth.dy = parse(key, value)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, value)?,
            "data_seed" => self.synth.seed = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "noise_ratio" => self.noise_ratio = parse(key, value)?,
            "noise_seed" => self.noise_seed = parse(key, value)?,
            "data_dir" => self.data_dir = non_empty(value),
            "out_dir" => self.out_dir = non_empty(value),
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = self.train.render();
        let own = [
            self.synth.n.to_string(),
            self.synth.latent_dim.to_string(),
            self.synth.dx.to_string(),
            self.synth.dy.to_string(),
            self.synth.noise_sigma.to_string(),
            self.synth.seed.to_string(),
            self.n_test.to_string(),
            self.noise_ratio.to_string(),
            self.noise_seed.to_string(),
            path(&self.data_dir),
            path(&self.out_dir),
        ];
        for (k, v) in Self::KEYS.iter().zip(own) {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::RatioOutOfRange(format!("{} is outside [0, 1)", self.noise_ratio)));
        }
        Ok(())
    }
}

fn non_empty(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("noise_ratio", "0.4").unwrap();
        c.set("mass", "0.6").unwrap();
        c.set("data_dir", "/tmp/x").unwrap();
        c.set("n", "100").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.apply_text("bogus = 1"), Err(Error::InvalidConfig(_))));
        assert!(c.apply_text("just text").is_err());
    }
}
