//! Persistent records behind the CLI and HTTP service: content-addressed run
//! directories with immutable manifests, and generation jobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{average_attention, DiffusionError, Sample, SamplerConfig};
use crate::query::Query;
use crate::scenegen::RasterImage;

pub const RUN_ROOT_ENV: &str = "LAYOUTDIFF_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("run {0} is already complete")]
    Complete(PathBuf),
    #[error("job status cannot move from {from:?} to {to:?}")]
    Transition { from: JobStatus, to: JobStatus },
    #[error("query has {regions} regions, no region {index}")]
    NoSuchRegion { index: usize, regions: usize },
}

/// Run-directory root from the environment, else `runs` in the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// First 16 hex digits of sha256 over the kind and the canonical JSON config.
/// serde_json maps are key-sorted, so field order does not matter.
pub fn content_id(kind: &str, config: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(config.to_string().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<ArtifactRef>,
    #[serde(default)]
    pub reports: BTreeMap<String, serde_json::Value>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, ServiceError> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// A run directory that has not been completed yet.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub run_id: String,
    kind: String,
    config: serde_json::Value,
    started_unix: u64,
}

pub enum RunState {
    Fresh(RunDir),
    Complete(RunManifest, PathBuf),
}

impl RunDir {
    /// Opens `<root>/<kind>-<id>`. A directory with a manifest is a finished
    /// run with identical config, returned as [`RunState::Complete`].
    pub fn open(root: &Path, kind: &str, config: &impl Serialize) -> Result<RunState, ServiceError> {
        let config = serde_json::to_value(config)?;
        let run_id = content_id(kind, &config);
        let path = root.join(format!("{kind}-{run_id}"));
        if path.join(MANIFEST_FILE).exists() {
            return Ok(RunState::Complete(RunManifest::load(&path)?, path));
        }
        fs::create_dir_all(&path)?;
        Ok(RunState::Fresh(Self { path, run_id, kind: kind.to_string(), config, started_unix: unix_now() }))
    }

    /// Writes the manifest; fails if another writer completed the run first.
    pub fn finish(
        self,
        dataset_hash: Option<String>,
        checkpoints: Vec<ArtifactRef>,
        reports: BTreeMap<String, serde_json::Value>,
    ) -> Result<RunManifest, ServiceError> {
        let m = RunManifest {
            run_id: self.run_id,
            kind: self.kind,
            config: self.config,
            dataset_hash,
            checkpoints,
            reports,
            started_unix: self.started_unix,
            finished_unix: unix_now(),
        };
        let file = self.path.join(MANIFEST_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&file).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                ServiceError::Complete(self.path.clone())
            } else {
                e.into()
            }
        })?;
        f.write_all(&serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    /// Forward only: queued -> running -> done | failed, and queued -> failed.
    pub fn can_advance_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!((self, next), (Queued, Running) | (Queued, Failed) | (Running, Done) | (Running, Failed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub image: PathBuf,
    /// One overlay per region, in query order.
    pub attention: Vec<PathBuf>,
    pub elapsed_ms: u64,
    pub image_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub id: String,
    pub query: Query,
    pub sampler: SamplerConfig,
    pub checkpoint_sha256: String,
    /// Rendered non-padding tokens of the encoded query.
    pub sequence: Vec<String>,
    pub status: JobStatus,
    pub result: Option<JobResult>,
    pub error: Option<String>,
    pub created_unix: u64,
}

impl GenerationJob {
    pub fn new(id: String, query: Query, sampler: SamplerConfig, checkpoint_sha256: String, sequence: Vec<String>) -> Self {
        Self {
            id,
            query,
            sampler,
            checkpoint_sha256,
            sequence,
            status: JobStatus::Queued,
            result: None,
            error: None,
            created_unix: unix_now(),
        }
    }

    pub fn advance(&mut self, next: JobStatus) -> Result<(), ServiceError> {
        if !self.status.can_advance_to(next) {
            return Err(ServiceError::Transition { from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }

    pub fn complete(&mut self, result: JobResult) -> Result<(), ServiceError> {
        self.advance(JobStatus::Done)?;
        self.result = Some(result);
        Ok(())
    }

    pub fn fail(&mut self, error: String) -> Result<(), ServiceError> {
        self.advance(JobStatus::Failed)?;
        self.error = Some(error);
        Ok(())
    }
}

/// Opacity of the heatmap at the hottest pixel.
pub const OVERLAY_ALPHA: f64 = 0.6;

/// Mean attention of a region's four position tokens, max-normalized and
/// blended in red over the sample at image resolution.
pub fn region_overlay(sample: &Sample, query: &Query, region: usize) -> Result<RasterImage, ServiceError> {
    let groups = sample.sequence.position_groups();
    let keys = groups.get(region).ok_or(ServiceError::NoSuchRegion { index: region, regions: query.regions.len() })?;
    let (h, w) = (sample.image.height(), sample.image.width());
    let maps = average_attention(&sample.attention, keys, h, w)?;
    let mut mean = vec![0.0f64; h * w];
    for m in &maps {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v / maps.len() as f64;
        }
    }
    let peak = mean.iter().copied().fold(0.0, f64::max);
    let mut out = sample.image.clone();
    for r in 0..h {
        for c in 0..w {
            let a = if peak > 0.0 { OVERLAY_ALPHA * mean[r * w + c] / peak } else { 0.0 } as f32;
            let [pr, pg, pb] = out.get(r, c);
            out.set(r, c, [pr * (1.0 - a) + a, pg * (1.0 - a), pb * (1.0 - a)]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_moves_forward_only() {
        use JobStatus::*;
        let all = [Queued, Running, Done, Failed];
        for a in all {
            for b in all {
                let expected = matches!((a, b), (Queued, Running) | (Queued, Failed) | (Running, Done) | (Running, Failed));
                assert_eq!(a.can_advance_to(b), expected, "{a:?} -> {b:?}");
            }
        }
        let mut j = GenerationJob::new("j".into(), Query::null(), SamplerConfig::default(), String::new(), vec![]);
        assert!(j.advance(Done).is_err());
        j.advance(Running).unwrap();
        j.fail("boom".into()).unwrap();
        assert!(j.advance(Running).is_err());
        assert_eq!(j.error.as_deref(), Some("boom"));
    }

    #[test]
    fn run_dirs_are_content_addressed_and_immutable() {
        let root = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"b": 1, "a": [1, 2]});
        let RunState::Fresh(run) = RunDir::open(root.path(), "train", &cfg).unwrap() else { panic!("fresh") };
        let id = run.run_id.clone();
        assert_eq!(id, content_id("train", &serde_json::json!({"a": [1, 2], "b": 1})));
        assert_ne!(id, content_id("eval", &cfg));
        let path = run.path.clone();
        run.finish(Some("h".into()), vec![], BTreeMap::new()).unwrap();
        match RunDir::open(root.path(), "train", &cfg).unwrap() {
            RunState::Complete(m, p) => {
                assert_eq!((m.run_id, m.dataset_hash.as_deref()), (id, Some("h")));
                assert_eq!(p, path);
            }
            RunState::Fresh(_) => panic!("expected a completed run"),
        }
    }
}
