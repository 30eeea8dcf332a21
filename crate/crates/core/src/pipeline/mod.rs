//! Orchestration behind the `dmfuse` CLI: training runs, fusion inference,
//! evaluation and the ablation harness. Every command writes a run manifest
//! listing its artifacts with sha256 digests.

mod ablate;
pub mod checkpoint;
mod commands;
pub mod config;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{file_digest, SourcePair, Task};
use crate::diffusion::{NoiseSchedule, TimeStepSet};
use crate::error::{Error, Result};
use crate::fusionnet::{forward_fuse, FusionWeights};
use crate::imaging::{attach_chroma, rgb_to_ycbcr, GrayImage, SourceImage};
use crate::reconstructor::ReconstructorWeights;

pub use ablate::{cmd_ablate, AblationMode, AblationReport};
pub use commands::{
    cmd_eval, cmd_fuse, cmd_phantom, cmd_train_fusion, cmd_train_recon, load_models, EvalOutput,
    FuseInput, FuseOutput, FUSION_CKPT, RECON_CKPT,
};
pub use config::FusionConfig;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DMFUSE_THREADS";

/// A file with its digest; paths inside the output directory are relative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub name: String,
    pub csv: String,
    pub steps: usize,
    pub head_mean_100: f64,
    pub tail_mean_100: f64,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_digest: String,
    pub seed: u64,
    /// Unix seconds; `SOURCE_DATE_EPOCH` pins both for reproducible builds.
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Files read by the command.
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub curves: Vec<CurveSummary>,
}

fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Worker threads: `DMFUSE_THREADS`, then `eval.threads`, then all cores.
pub fn thread_count(cfg: &FusionConfig) -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        };
    }
    if cfg.eval.threads > 0 {
        return Ok(cfg.eval.threads);
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Validated config plus output directory shared by all commands.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: FusionConfig,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn new(config: FusionConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Self { config, out_dir })
    }

    pub fn threads(&self) -> Result<usize> {
        thread_count(&self.config)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn artifact(&self, path: &Path) -> Result<Artifact> {
        Ok(Artifact {
            path: self.rel(path),
            sha256: file_digest(path)?,
        })
    }

    fn write(&self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<Artifact> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.artifact(path)
    }

    fn start(&self, command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: self.config.digest(),
            seed: self.config.seed,
            started_unix: now_unix(),
            finished_unix: 0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            curves: Vec::new(),
        }
    }

    /// Stamp and write `<out>/<name>.manifest.json`.
    fn finish(&self, mut m: RunManifest, name: &str) -> Result<RunManifest> {
        m.finished_unix = now_unix();
        let path = self.out_dir.join(format!("{name}.manifest.json"));
        let json = serde_json::to_string_pretty(&m).expect("manifest is serializable");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

/// Reorder pairs so tasks alternate (first of each task, then second, ...).
pub fn interleave_tasks(pairs: Vec<SourcePair>) -> Vec<SourcePair> {
    let mut queues: Vec<VecDeque<SourcePair>> = Task::ALL.iter().map(|_| VecDeque::new()).collect();
    for p in pairs {
        let k = Task::ALL
            .iter()
            .position(|t| *t == p.task)
            .expect("known task");
        queues[k].push_back(p);
    }
    let mut out = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        for q in &mut queues {
            if let Some(p) = q.pop_front() {
                out.push(p);
            }
        }
    }
    out
}

/// Noise seed for one pair, independent of its position in a batch.
pub fn pair_noise_seed(seed: u64, pair_id: &str) -> u64 {
    let h = Sha256::digest(pair_id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Reattach the functional image's chroma to the fused luma; grayscale
/// sources give a grayscale output.
pub fn compose_output(luma: &GrayImage, b: &SourceImage) -> Result<SourceImage> {
    match b {
        SourceImage::Gray(_) => Ok(SourceImage::Gray(luma.clone())),
        SourceImage::Color(c) => {
            let ycc = rgb_to_ycbcr(c);
            Ok(SourceImage::Color(attach_chroma(luma, &ycc.cb, &ycc.cr)?))
        }
    }
}

/// A fused pair: network luma and the composed output image.
#[derive(Clone, Debug)]
pub struct FusedPair {
    pub id: String,
    pub luma: GrayImage,
    pub image: SourceImage,
}

/// Fuse many pairs with one network on up to `threads` workers.
pub fn fuse_pairs(
    recon: &ReconstructorWeights,
    fusion: &FusionWeights,
    steps: &TimeStepSet,
    schedule: &NoiseSchedule,
    pairs: &[SourcePair],
    seed: u64,
    threads: usize,
) -> Result<Vec<FusedPair>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        pairs
            .par_iter()
            .map(|p| {
                let luma = forward_fuse(
                    recon,
                    fusion,
                    &p.a,
                    &p.b_luma(),
                    steps,
                    schedule,
                    pair_noise_seed(seed, &p.id),
                )?;
                let image = compose_output(&luma, &p.b)?;
                Ok(FusedPair {
                    id: p.id.clone(),
                    luma,
                    image,
                })
            })
            .collect()
    })
}
