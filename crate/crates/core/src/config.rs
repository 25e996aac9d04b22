//! Run configuration files and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Dataset, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Which images a command reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset name, `synth[:...]` spec or manifest directory.
    pub source: String,
    pub split: Split,
    pub limit: Option<usize>,
    pub resize: Option<usize>,
    pub data_dir: Option<PathBuf>,
    /// Keep only these classes (applied before `limit`).
    pub classes: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            split: Split::All,
            limit: None,
            resize: None,
            data_dir: None,
            classes: None,
        }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            resize: self.resize,
            data_dir: self.data_dir.clone(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let Some(classes) = &self.classes else {
            return load_dataset(&self.source, self.split, self.limit, &self.load_options());
        };
        let mut ds = load_dataset(&self.source, self.split, None, &self.load_options())?.retain_classes(classes)?;
        if let Some(n) = self.limit {
            ds.truncate(n);
        }
        Ok(ds)
    }
}

/// Settings for the reports written after training or by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbourhood sizes for the kNN probe.
    pub knn_k: Vec<usize>,
    /// Images generated per cluster.
    pub per_cluster: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: vec![1, 5, 10, 50, 100],
            per_cluster: 8,
        }
    }
}

/// Contents of a run configuration file. Every table is optional and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub split: Option<Split>,
    pub limit: Option<usize>,
    pub lambda: Option<f64>,
    pub latent_dim: Option<usize>,
    pub timesteps: Option<usize>,
    pub em_rounds: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub knn_k: Option<Vec<usize>>,
    pub per_cluster: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// `--seed` drives both the training streams and parameter initialization.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.dataset {
            self.data.source = v.clone();
        }
        if let Some(v) = o.split {
            self.data.split = v;
        }
        if let Some(v) = o.limit {
            self.data.limit = Some(v);
        }
        if let Some(v) = o.lambda {
            self.train.lambda = v;
        }
        if let Some(v) = o.latent_dim {
            self.train.network.latent_dim = v;
        }
        if let Some(v) = o.timesteps {
            self.train.schedule.timesteps = v;
        }
        if let Some(v) = o.em_rounds {
            self.train.em_rounds = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
            self.train.network.param_seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.knn_k {
            self.eval.knn_k = v.clone();
        }
        if let Some(v) = o.per_cluster {
            self.eval.per_cluster = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.knn_k.contains(&0) {
            return Err(Error::Config("knn_k entries must be positive".into()));
        }
        if self.eval.per_cluster == 0 {
            return Err(Error::Config("per_cluster must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data.limit = Some(100);
        cfg.train = TrainConfig::desk();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("output_dir = \"out\"\n[train]\nlambda = 0.05\n[train.network]\nlatent_dim = 4\n").unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.train.lambda, 0.05);
        assert_eq!(cfg.train.network.latent_dim, 4);
        assert_eq!(cfg.train.k, TrainConfig::default().k);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1\n", "[train]\nlamda = 0.1\n", "[train.network]\ndepth = 3\n", "[data]\nsplit = \"dev\"\n"] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(err.is_usage(), "{text}: {err}");
        }
    }

    #[test]
    fn flags_win_over_the_file() {
        let mut cfg = RunConfig::from_toml("[train]\nlambda = 0.2\nseed = 1\n").unwrap();
        cfg.apply(&Overrides {
            lambda: Some(0.05),
            seed: Some(9),
            timesteps: Some(50),
            knn_k: Some(vec![3]),
            ..Overrides::default()
        });
        assert_eq!(cfg.train.lambda, 0.05);
        assert_eq!((cfg.train.seed, cfg.train.network.param_seed), (9, 9));
        assert_eq!(cfg.train.schedule.timesteps, 50);
        assert_eq!(cfg.eval.knn_k, vec![3]);
        let echoed = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(echoed.train.lambda, 0.05);
    }

    #[test]
    fn class_filter_keeps_order_and_applies_limit_after() {
        let data = DataConfig {
            source: "synth:k=3,n=4,size=8".into(),
            classes: Some(vec![0, 2]),
            limit: Some(5),
            ..DataConfig::default()
        };
        let (images, labels) = data.load().unwrap().split();
        assert_eq!(images.len(), 5);
        assert_eq!(labels.unwrap().as_slice(), &[0, 2, 0, 2, 0]);
    }

    #[test]
    fn shipped_configs_parse() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = RunConfig::load(&root.join("desk.toml")).unwrap();
        assert_eq!(desk.train, TrainConfig::desk());
        assert_eq!(desk.eval, EvalConfig::default());
        desk.validate().unwrap();
        RunConfig::load(&root.join("mnist3.toml")).unwrap().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_report_settings() {
        let mut cfg = RunConfig::default();
        cfg.eval.knn_k = vec![0];
        assert!(cfg.validate().is_err());
        cfg.eval.knn_k = vec![1];
        cfg.eval.per_cluster = 0;
        assert!(cfg.validate().is_err());
    }
}
