//! Checkpoint directories and the on-disk training sink.
//!
//! A checkpoint is a directory holding `manifest.json` (format version,
//! config echo, round, seed, parameter shapes), `networks.safetensors`,
//! `optimizer.safetensors` and, once an E-step has run, `gmm.json` plus a
//! plain-text `gmm.txt`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::networks::Networks;
use crate::nn::Adam;
use crate::trainer::{EpochSummary, LogRecord, TrainConfig, TrainSink, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub round: usize,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub config: TrainConfig,
    pub parameters: Vec<ParamInfo>,
    pub epochs: Vec<EpochSummary>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_tensors(path: &Path, named: &[(String, &Tensor)]) -> Result<()> {
    let bytes: Vec<Vec<u8>> = named.iter().map(|(_, t)| to_bytes(t)).collect();
    let views = named
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| Ok((name.clone(), TensorView::new(Dtype::F64, t.shape().to_vec(), b).map_err(|e| bad(path, e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let buffer = safetensors::serialize(views, None::<HashMap<String, String>>).map_err(|e| bad(path, e.to_string()))?;
    fs::write(path, buffer).map_err(|e| Error::io(path, e))
}

fn read_tensors(path: &Path, names: &[String]) -> Result<Vec<(String, Tensor)>> {
    let buffer = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buffer).map_err(|e| bad(path, e.to_string()))?;
    names
        .iter()
        .map(|name| {
            let view = st.tensor(name).map_err(|e| bad(path, e.to_string()))?;
            if view.dtype() != Dtype::F64 {
                return Err(bad(path, format!("{name} is not f64")));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((name.clone(), Tensor::new(view.shape().to_vec(), data)?))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `state` to `dir`, replacing any previous checkpoint there.
///
/// Files go to a sibling staging directory first, so an interrupted write
/// never leaves a half-written checkpoint under `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let params = state.networks.params();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        round: state.round,
        seed: config.seed,
        optimizer_steps: state.optimizer.steps(),
        config: config.clone(),
        parameters: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| ParamInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        epochs: state.epochs.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    write_text(&staging.join("manifest.json"), &(json + "\n"))?;
    let named: Vec<(String, &Tensor)> = params.names().iter().cloned().zip(params.tensors()).collect();
    write_tensors(&staging.join("networks.safetensors"), &named)?;
    let (m, v) = state.optimizer.moments();
    let mut moments: Vec<(String, &Tensor)> = Vec::new();
    for (name, (mt, vt)) in params.names().iter().zip(m.iter().zip(v)) {
        moments.push((format!("m.{name}"), mt));
        moments.push((format!("v.{name}"), vt));
    }
    write_tensors(&staging.join("optimizer.safetensors"), &moments)?;
    if let Some(gmm) = &state.gmm {
        let json = serde_json::to_string_pretty(gmm).map_err(|e| Error::Serde(e.to_string()))?;
        write_text(&staging.join("gmm.json"), &(json + "\n"))?;
        write_text(&staging.join("gmm.txt"), &gmm.to_text())?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            &path,
            format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Restores the config and training state saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, TrainState)> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config;
    let mut networks = Networks::new(config.network.clone())?;
    let expected: Vec<ParamInfo> = networks
        .params()
        .names()
        .iter()
        .zip(networks.params().tensors())
        .map(|(name, t)| ParamInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != manifest.parameters {
        return Err(bad(dir, "parameter layout does not match the recorded network config"));
    }
    let names = networks.params().names().to_vec();
    networks
        .params_mut()
        .load(read_tensors(&dir.join("networks.safetensors"), &names)?)?;
    let mut optimizer = Adam::new(networks.params(), config.learning_rate);
    let moment_names: Vec<String> = names.iter().flat_map(|n| [format!("m.{n}"), format!("v.{n}")]).collect();
    let moments = read_tensors(&dir.join("optimizer.safetensors"), &moment_names)?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for pair in moments.chunks(2) {
        m.push(pair[0].1.clone());
        v.push(pair[1].1.clone());
    }
    optimizer.restore(manifest.optimizer_steps, m, v)?;
    let gmm_path = dir.join("gmm.json");
    let gmm = if gmm_path.exists() {
        let text = fs::read_to_string(&gmm_path).map_err(|e| Error::io(&gmm_path, e))?;
        let params: GmmParams = serde_json::from_str(&text).map_err(|e| bad(&gmm_path, e.to_string()))?;
        params.validate()?;
        Some(params)
    } else {
        None
    };
    let state = TrainState {
        networks,
        optimizer,
        gmm,
        round: manifest.round,
        epochs: manifest.epochs,
    };
    Ok((config, state))
}

/// Accepts either a checkpoint directory or a run directory, in which case
/// the checkpoint named by `checkpoints/latest` is used.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").exists() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join("checkpoints").join("latest");
    if latest.exists() {
        let name = fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
        return Ok(path.join("checkpoints").join(name.trim()));
    }
    Err(bad(path, "no manifest.json and no checkpoints/latest"))
}

/// Writes the step log as JSON lines and checkpoints under a run directory.
pub struct RunSink {
    root: PathBuf,
    log: BufWriter<fs::File>,
}

impl RunSink {
    /// Appends to `root/train_log.jsonl` so a resumed run keeps one log.
    pub fn new(root: &Path) -> Result<Self> {
        let path = root.join("train_log.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log: BufWriter::new(file),
        })
    }
}

impl TrainSink for RunSink {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.root.join("train_log.jsonl"), e))
    }

    fn checkpoint(&mut self, state: &TrainState, config: &TrainConfig) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.root.join("train_log.jsonl"), e))?;
        let dir = self.root.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = format!("round-{:04}", state.round);
        save_checkpoint(&dir.join(&name), state, config)?;
        write_text(&dir.join("latest"), &format!("{name}\n"))
    }
}

impl Drop for RunSink {
    fn drop(&mut self) {
        let _ = self.log.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_mixture_images, SynthSpec};
    use crate::networks::NetworkConfig;
    use crate::schedule::ScheduleSpec;
    use crate::trainer::{resume, train, NullSink};

    fn config() -> TrainConfig {
        TrainConfig {
            k: 2,
            learning_rate: 1e-3,
            batch_size: 4,
            mstep_epochs: 1,
            em_rounds: 2,
            warmup_epochs: 1,
            checkpoint_every: 1,
            schedule: ScheduleSpec {
                timesteps: 10,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            network: NetworkConfig {
                image_shape: [1, 8, 8],
                latent_dim: 2,
                base_channels: 4,
                channel_mults: vec![1, 2],
                groups: 2,
                time_embed_dim: 8,
                param_seed: 0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let images = synth_mixture_images(&SynthSpec {
            k: 2,
            n_per_class: 5,
            size: 8,
            seed: 2,
        })
        .unwrap()
        .images;
        let cfg = config();
        let mut sink = RunSink::new(dir.path()).unwrap();
        let full = train(&images, &cfg, &mut sink).unwrap();
        drop(sink);
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let first: LogRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.em_round, 0);

        let latest = resolve_checkpoint(dir.path()).unwrap();
        assert!(latest.ends_with("round-0002"));
        let (cfg2, state) = load_checkpoint(&latest).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state.networks.params(), full.state.networks.params());
        assert_eq!(state.optimizer, full.state.optimizer);
        assert_eq!(state.gmm, full.state.gmm);
        assert!(fs::read_to_string(latest.join("gmm.txt")).unwrap().starts_with("# K=2"));

        // Resume from round 1 and land on the same parameters.
        let (_, mid) = load_checkpoint(&dir.path().join("checkpoints/round-0001")).unwrap();
        let resumed = resume(&images, &cfg, mid, &mut NullSink).unwrap();
        assert_eq!(resumed.state.networks.params(), full.state.networks.params());
        assert_eq!(resumed.assignments, full.assignments);
    }

    #[test]
    fn rejects_mismatched_layout_and_missing_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let state = TrainState::new(&cfg).unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&ck, &state, &cfg).unwrap();
        let mut manifest = read_manifest(&ck).unwrap();
        manifest.config.network.base_channels = 8;
        fs::write(ck.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_checkpoint(&ck).is_err());
        assert!(resolve_checkpoint(&dir.path().join("nothing")).is_err());
    }
}
