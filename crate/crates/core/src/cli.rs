//! Command-line entry points: `train`, `eval`, `generate`, `embed` and
//! `visualize`.
//!
//! Every command writes into an output directory guarded by a lock file and
//! stamped with the output format version. Structured outputs are plain
//! text with fixed formatting, so equal inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, resolve_checkpoint, save_checkpoint, RunSink, FORMAT_VERSION};
use crate::config::{Overrides, RunConfig};
use crate::data::{save_image_grid, Dataset, ImageSet, Labels, Split};
use crate::diffusion::{generate, Condition};
use crate::error::{Error, Result};
use crate::evaluation::{knn_table_csv, latent_vs_raw_knn, misclustered, tsne_plot, MetricReport};
use crate::gmm::GmmParams;
use crate::rng;
use crate::trainer::{extract_latents, resume, train, EpochSummary, LatentSource, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "clusterddpm", version, about = "Clustering with a latent-conditioned diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm up, alternate E/M rounds and write the final clustering.
    Train(CommonArgs),
    /// Cluster a dataset with a checkpoint and report metrics and kNN accuracy.
    Eval(CommonArgs),
    /// Sample images conditioned on each mixture component.
    Generate(CommonArgs),
    /// Write latent means and cluster assignments as a table.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        /// Table path (default: <output-dir>/embed/embeddings.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Plot a t-SNE map of the latents, marking misclustered points in red.
    Visualize {
        #[command(flatten)]
        common: CommonArgs,
        /// Table written by `embed`; otherwise --checkpoint and the dataset are used.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Image path (default: <output-dir>/visualize/tsne.png).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip the misclustered overlay.
        #[arg(long)]
        no_overlay: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset name, `synth[:k=..,n=..,size=..,seed=..]` or manifest directory.
    #[arg(long)]
    pub dataset: Option<String>,
    /// train, test or all.
    #[arg(long)]
    pub split: Option<Split>,
    /// Keep at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Weight of the prior-matching term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Latent dimension J.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Diffusion steps T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Number of E/M rounds after warm-up.
    #[arg(long)]
    pub em_rounds: Option<usize>,
    /// Seed for training streams and parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory that receives the outputs.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Checkpoint or run directory. For `train` this resumes the run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated kNN neighbourhood sizes.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Images generated per cluster.
    #[arg(long)]
    pub per_cluster: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            split: self.split,
            limit: self.limit,
            lambda: self.lambda,
            latent_dim: self.latent_dim,
            timesteps: self.timesteps,
            em_rounds: self.em_rounds,
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            knn_k: self.k.clone(),
            per_cluster: self.per_cluster,
        }
    }

    /// The `--config` file, else the configuration saved next to the
    /// `--checkpoint` run, else defaults; flags are applied on top.
    fn resolve(&self) -> Result<RunConfig> {
        let saved = || {
            let ck = resolve_checkpoint(self.checkpoint.as_deref()?).ok()?;
            Some(run_dir_of(&ck).join("config.resolved.toml")).filter(|p| p.is_file())
        };
        let mut cfg = match self.config.clone().or_else(saved) {
            Some(path) => RunConfig::load(&path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))
    }

    fn reject_training_flags(&self, command: &str) -> Result<()> {
        if self.lambda.is_some() || self.latent_dim.is_some() || self.timesteps.is_some() || self.em_rounds.is_some() {
            return Err(Error::InvalidArgument(format!(
                "{command} takes training settings from the checkpoint"
            )));
        }
        Ok(())
    }
}

/// Version string written to `FORMAT_VERSION` in every output directory.
pub fn format_stamp() -> String {
    format!("clusterddpm-output {FORMAT_VERSION}\n")
}

/// An output directory held for the lifetime of a command.
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(path.to_path_buf())),
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let dir = Self {
            path: path.to_path_buf(),
            lock,
        };
        dir.write("FORMAT_VERSION", &format_stamp())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage or configuration errors, 2 for runtime failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Embed { common, output } => cmd_embed(&common, output.as_deref()),
        Command::Visualize {
            common,
            embeddings,
            output,
            no_overlay,
        } => cmd_visualize(&common, embeddings.as_deref(), output.as_deref(), !no_overlay),
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    cfg.data.load()
}

fn assignments_csv(assignments: &[usize]) -> String {
    let mut out = String::from("index,cluster\n");
    for (i, c) in assignments.iter().enumerate() {
        let _ = writeln!(out, "{i},{c}");
    }
    out
}

fn epochs_csv(epochs: &[EpochSummary]) -> String {
    let mut out = String::from("em_round,epoch,mean_total\n");
    for e in epochs {
        let _ = writeln!(out, "{},{},{}", e.em_round, e.epoch, e.mean_total);
    }
    out
}

fn assign_all(gmm: &GmmParams, latents: &[Vec<f64>]) -> Result<Vec<usize>> {
    latents.iter().map(|z| gmm.assign(z)).collect()
}

/// Writes `metrics.json` and `knn.csv` under `prefix` when labels exist.
fn write_reports(
    dir: &RunDir,
    prefix: &str,
    images: &ImageSet,
    labels: Option<&Labels>,
    latents: &[Vec<f64>],
    assignments: &[usize],
    ks: &[usize],
) -> Result<Option<MetricReport>> {
    let Some(labels) = labels else {
        log::info!("dataset has no labels; skipping metrics");
        return Ok(None);
    };
    let report = MetricReport::new(assignments, labels.as_slice())?;
    dir.write(&format!("{prefix}metrics.json"), &report.to_json())?;
    let rows = latent_vs_raw_knn(latents, &images.rows(), labels.as_slice(), ks)?;
    dir.write(&format!("{prefix}knn.csv"), &knn_table_csv(&rows))?;
    log::info!("ACC {:.4} NMI {:.4}", report.acc, report.nmi);
    Ok(Some(report))
}

/// The run directory a checkpoint path belongs to.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    if checkpoint.join("checkpoints").is_dir() {
        return checkpoint.to_path_buf();
    }
    match checkpoint.parent() {
        Some(p) if p.file_name().is_some_and(|n| n == "checkpoints") => p.parent().unwrap_or(p).to_path_buf(),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    }
}

fn load_trained(args: &CommonArgs) -> Result<(PathBuf, TrainConfig, TrainState, GmmParams)> {
    let ck = resolve_checkpoint(args.checkpoint()?)?;
    let (train_cfg, state) = load_checkpoint(&ck)?;
    let gmm = state
        .gmm
        .clone()
        .ok_or_else(|| Error::Checkpoint {
            path: ck.clone(),
            reason: "no mixture fitted yet".into(),
        })?;
    Ok((ck, train_cfg, state, gmm))
}

fn output_dir_for(args: &CommonArgs, checkpoint: &Path) -> PathBuf {
    args.output_dir.clone().unwrap_or_else(|| run_dir_of(checkpoint))
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let mut cfg = args.resolve()?;
    let resumed = match &args.checkpoint {
        Some(path) => {
            if args.lambda.is_some() || args.latent_dim.is_some() || args.timesteps.is_some() || args.seed.is_some() {
                return Err(Error::InvalidArgument("only --em-rounds may change when resuming".into()));
            }
            let ck = resolve_checkpoint(path)?;
            let (train_cfg, state) = load_checkpoint(&ck)?;
            cfg.train = TrainConfig {
                em_rounds: args.em_rounds.unwrap_or(train_cfg.em_rounds),
                ..train_cfg
            };
            if args.output_dir.is_none() && args.config.is_none() {
                cfg.output_dir = run_dir_of(&ck);
            }
            Some(state)
        }
        None => None,
    };
    cfg.validate()?;
    let (images, labels) = load_data(&cfg)?.split();
    let dir = RunDir::open(&cfg.output_dir)?;
    dir.write("config.resolved.toml", &cfg.to_toml()?)?;
    let mut sink = RunSink::new(dir.path())?;
    let outcome = match resumed {
        Some(state) => resume(&images, &cfg.train, state, &mut sink)?,
        None => train(&images, &cfg.train, &mut sink)?,
    };
    drop(sink);

    let mut state = outcome.state;
    state.gmm = Some(outcome.final_gmm.clone());
    let checkpoints = dir.path().join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
    save_checkpoint(&checkpoints.join("final"), &state, &cfg.train)?;
    dir.write("checkpoints/latest", "final\n")?;
    dir.write("assignments.csv", &assignments_csv(&outcome.assignments))?;
    dir.write("epochs.csv", &epochs_csv(&state.epochs))?;
    write_reports(&dir, "", &images, labels.as_ref(), &outcome.latents, &outcome.assignments, &cfg.eval.knn_k)?;
    println!("{}", dir.path().display());
    Ok(())
}

pub fn cmd_eval(args: &CommonArgs) -> Result<()> {
    args.reject_training_flags("eval")?;
    let mut cfg = args.resolve()?;
    let (ck, train_cfg, state, gmm) = load_trained(args)?;
    cfg.train = train_cfg;
    cfg.validate()?;
    let (images, labels) = load_data(&cfg)?.split();
    let labels = labels.ok_or_else(|| Error::InvalidArgument(format!("dataset {} has no labels", cfg.data.source)))?;
    let latents = extract_latents(&images, &state.networks, LatentSource::Mean, cfg.train.seed, 0)?;
    let assignments = assign_all(&gmm, &latents)?;
    let dir = RunDir::open(&output_dir_for(args, &ck))?;
    dir.write("eval/config.resolved.toml", &cfg.to_toml()?)?;
    dir.write("eval/assignments.csv", &assignments_csv(&assignments))?;
    write_reports(&dir, "eval/", &images, Some(&labels), &latents, &assignments, &cfg.eval.knn_k)?;
    println!("{}", dir.path().join("eval").display());
    Ok(())
}

/// Fraction of generated images that the encoder and mixture send back to
/// their conditioning cluster, per cluster and overall.
fn consistency_csv(conditioned: &[usize], assigned: &[usize], k: usize) -> String {
    let mut out = String::from("cluster,samples,agreeing,fraction\n");
    let mut row = |name: String, pairs: Vec<(usize, usize)>| {
        let agree = pairs.iter().filter(|(a, b)| a == b).count();
        let frac = if pairs.is_empty() { 0.0 } else { agree as f64 / pairs.len() as f64 };
        let _ = writeln!(out, "{name},{},{agree},{frac:.6}", pairs.len());
    };
    let pairs: Vec<(usize, usize)> = conditioned.iter().copied().zip(assigned.iter().copied()).collect();
    for c in 0..k {
        row(c.to_string(), pairs.iter().copied().filter(|p| p.0 == c).collect());
    }
    row("all".into(), pairs);
    out
}

pub fn cmd_generate(args: &CommonArgs) -> Result<()> {
    args.reject_training_flags("generate")?;
    let mut cfg = args.resolve()?;
    let (ck, train_cfg, state, gmm) = load_trained(args)?;
    cfg.train = train_cfg;
    cfg.validate()?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let per = cfg.eval.per_cluster;
    let shape = cfg.train.network.image_shape;
    let schedule = cfg.train.schedule.build()?;
    let indices: Vec<usize> = (0..gmm.k()).flat_map(|c| std::iter::repeat_n(c, per)).collect();
    let mut rng = rng::stream(seed, "generate", 0);
    let out = generate(shape, Condition::Clusters { params: &gmm, indices: indices.clone() }, &state.networks, &schedule, &mut rng)?;
    let clipped: Vec<f64> = out.images.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let len: usize = shape.iter().product();
    let images = ImageSet::new("generated", Split::All, shape, clipped)?;
    let latents = extract_latents(&images, &state.networks, LatentSource::Mean, seed, 0)?;
    let assigned = assign_all(&gmm, &latents)?;

    let dir = RunDir::open(&output_dir_for(args, &ck))?;
    dir.write("generate/config.resolved.toml", &cfg.to_toml()?)?;
    let rows: Vec<Vec<&[f64]>> = images.pixels().chunks(len * per).map(|c| c.chunks(len).collect()).collect();
    for (c, row) in rows.iter().enumerate() {
        save_image_grid(&dir.path().join(format!("generate/cluster-{c:02}.png")), shape, std::slice::from_ref(row))?;
    }
    save_image_grid(&dir.path().join("generate/grid.png"), shape, &rows)?;
    dir.write("generate/consistency.csv", &consistency_csv(&indices, &assigned, gmm.k()))?;
    println!("{}", dir.path().join("generate").display());
    Ok(())
}

fn embeddings_csv(latents: &[Vec<f64>], assignments: &[usize], labels: Option<&Labels>) -> String {
    let j = latents.first().map_or(0, Vec::len);
    let mut out = String::from("index,label,cluster");
    for d in 0..j {
        let _ = write!(out, ",z{d}");
    }
    out.push('\n');
    for (i, (z, c)) in latents.iter().zip(assignments).enumerate() {
        let label = labels.map(|l| l.as_slice()[i].to_string()).unwrap_or_default();
        let _ = write!(out, "{i},{label},{c}");
        for v in z {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Rows of an embeddings table: `(latent, label, cluster)`.
pub fn read_embeddings(path: &Path) -> Result<Vec<(Vec<f64>, Option<usize>, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::InvalidArgument(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines();
    if !lines.next().is_some_and(|h| h.starts_with("index,label,cluster")) {
        return Err(bad(1, "expected header index,label,cluster,z0,..."));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(bad(n + 2, "too few columns"));
            }
            let label = match fields[1] {
                "" => None,
                l => Some(l.parse().map_err(|_| bad(n + 2, "bad label"))?),
            };
            let cluster = fields[2].parse().map_err(|_| bad(n + 2, "bad cluster"))?;
            let z = fields[3..]
                .iter()
                .map(|v| v.parse().map_err(|_| bad(n + 2, "bad latent value")))
                .collect::<Result<Vec<f64>>>()?;
            Ok((z, label, cluster))
        })
        .collect()
}

pub fn cmd_embed(args: &CommonArgs, output: Option<&Path>) -> Result<()> {
    args.reject_training_flags("embed")?;
    let mut cfg = args.resolve()?;
    let (ck, train_cfg, state, gmm) = load_trained(args)?;
    cfg.train = train_cfg;
    let (images, labels) = load_data(&cfg)?.split();
    let latents = extract_latents(&images, &state.networks, LatentSource::Mean, cfg.train.seed, 0)?;
    let assignments = assign_all(&gmm, &latents)?;
    let dir = RunDir::open(&output_dir_for(args, &ck))?;
    let table = embeddings_csv(&latents, &assignments, labels.as_ref());
    let path = match output {
        Some(p) => {
            fs::write(p, &table).map_err(|e| Error::io(p, e))?;
            p.to_path_buf()
        }
        None => dir.write("embed/embeddings.csv", &table)?,
    };
    dir.write("embed/config.resolved.toml", &cfg.to_toml()?)?;
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_visualize(args: &CommonArgs, embeddings: Option<&Path>, output: Option<&Path>, overlay: bool) -> Result<()> {
    let (rows, out_dir) = match embeddings {
        Some(path) => {
            let dir = args
                .output_dir
                .clone()
                .unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            (read_embeddings(path)?, dir)
        }
        None => {
            args.reject_training_flags("visualize")?;
            let mut cfg = args.resolve()?;
            let (ck, train_cfg, state, gmm) = load_trained(args)?;
            cfg.train = train_cfg;
            let (images, labels) = load_data(&cfg)?.split();
            let latents = extract_latents(&images, &state.networks, LatentSource::Mean, cfg.train.seed, 0)?;
            let assignments = assign_all(&gmm, &latents)?;
            let rows = latents
                .into_iter()
                .zip(assignments)
                .enumerate()
                .map(|(i, (z, c))| (z, labels.as_ref().map(|l| l.as_slice()[i]), c))
                .collect();
            (rows, output_dir_for(args, &ck))
        }
    };
    let latents: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let clusters: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let labels: Option<Vec<usize>> = rows.iter().map(|r| r.1).collect();
    let (colours, mask) = match &labels {
        Some(labels) => (labels.clone(), if overlay { Some(misclustered(&clusters, labels)?) } else { None }),
        None => (clusters, None),
    };
    let dir = RunDir::open(&out_dir)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(dir.path().join("visualize")).map_err(|e| Error::io(dir.path(), e))?;
            dir.path().join("visualize/tsne.png")
        }
    };
    let plot = tsne_plot(&latents, &colours, mask.as_deref(), &path, args.seed.unwrap_or(0))?;
    println!("{}", plot.image.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_for_parse_errors() {
        assert_eq!(main_with_args(["clusterddpm", "bogus"]), 1);
        assert_eq!(main_with_args(["clusterddpm", "train", "--lambda", "x"]), 1);
        assert_eq!(main_with_args(["clusterddpm", "--help"]), 0);
    }

    #[test]
    fn eval_requires_a_checkpoint() {
        assert_eq!(main_with_args(["clusterddpm", "eval"]), 1);
    }

    #[test]
    fn run_dir_lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::open(tmp.path()).unwrap();
        assert!(matches!(RunDir::open(tmp.path()), Err(Error::Locked(_))));
        drop(a);
        let b = RunDir::open(tmp.path()).unwrap();
        assert_eq!(fs::read_to_string(b.path().join("FORMAT_VERSION")).unwrap(), format_stamp());
    }

    #[test]
    fn run_dir_of_checkpoint_paths() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("checkpoints/final")).unwrap();
        assert_eq!(run_dir_of(tmp.path()), tmp.path());
        assert_eq!(run_dir_of(&tmp.path().join("checkpoints/final")), tmp.path());
        assert_eq!(run_dir_of(Path::new("x/ck")), PathBuf::from("x"));
    }

    #[test]
    fn embeddings_round_trip() {
        let latents = vec![vec![0.5, -1.25], vec![1e-17, 3.0]];
        let labels = Labels::new(vec![1, 0]);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("e.csv");
        fs::write(&path, embeddings_csv(&latents, &[0, 1], Some(&labels))).unwrap();
        let rows = read_embeddings(&path).unwrap();
        assert_eq!(rows, vec![(latents[0].clone(), Some(1), 0), (latents[1].clone(), Some(0), 1)]);
        fs::write(&path, embeddings_csv(&latents, &[0, 1], None)).unwrap();
        assert!(read_embeddings(&path).unwrap().iter().all(|r| r.1.is_none()));
        fs::write(&path, "nope\n").unwrap();
        assert!(read_embeddings(&path).is_err());
    }

    #[test]
    fn consistency_counts() {
        let csv = consistency_csv(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(csv, "cluster,samples,agreeing,fraction\n0,2,1,0.500000\n1,2,2,1.000000\nall,4,3,0.750000\n");
    }
}
