//! HTTP API over a loaded checkpoint. Handlers never sample; a bounded queue
//! feeds a fixed pool of worker threads that share the read-only model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crossbeam_channel::{Receiver, Sender, TrySendError};
use layoutdiff_core::diffusion::{bytes_hash, DiffusionError, DiffusionModel, SamplerConfig};
use layoutdiff_core::query::{parse, Query, QueryError};
use layoutdiff_core::service::{region_overlay, GenerationJob, JobResult, JobStatus};
use serde::Deserialize;
use serde_json::{json, Value};

pub struct AppState {
    model: DiffusionModel,
    pub checkpoint_sha256: String,
    jobs: RwLock<HashMap<String, GenerationJob>>,
    queue: Sender<String>,
    /// Keeps the channel connected when no worker holds a receiver.
    _drain: Receiver<String>,
    job_dir: PathBuf,
    next_id: AtomicU64,
    workers: usize,
}

/// Builds the state and spawns `workers` sampling threads. With zero workers
/// jobs stay queued, which only makes sense in tests.
pub fn start(
    model: DiffusionModel,
    checkpoint_sha256: String,
    job_dir: PathBuf,
    workers: usize,
    queue_capacity: usize,
) -> Arc<AppState> {
    let (tx, rx) = crossbeam_channel::bounded(queue_capacity);
    let state = Arc::new(AppState {
        model,
        checkpoint_sha256,
        jobs: RwLock::new(HashMap::new()),
        queue: tx,
        _drain: rx.clone(),
        job_dir,
        next_id: AtomicU64::new(1),
        workers,
    });
    for _ in 0..workers {
        let (state, rx) = (Arc::clone(&state), rx.clone());
        std::thread::spawn(move || {
            for id in rx.iter() {
                state.run_job(&id);
            }
        });
    }
    state
}

impl AppState {
    pub fn job(&self, id: &str) -> Option<GenerationJob> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    fn run_job(&self, id: &str) {
        let (query, sampler) = {
            let mut jobs = self.jobs.write().unwrap();
            let Some(job) = jobs.get_mut(id) else { return };
            if job.advance(JobStatus::Running).is_err() {
                return;
            }
            (job.query.clone(), job.sampler.clone())
        };
        let t0 = Instant::now();
        let outcome = self.generate(id, &query, &sampler, t0);
        let mut jobs = self.jobs.write().unwrap();
        let Some(job) = jobs.get_mut(id) else { return };
        let step = match outcome {
            Ok(r) => job.complete(r),
            Err(e) => job.fail(e),
        };
        if let Err(e) = step {
            log::error!("job {id}: {e}");
        }
        if let Err(e) = std::fs::write(self.job_dir.join(id).join("job.json"), serde_json::to_vec_pretty(job).unwrap_or_default()) {
            log::warn!("job {id}: cannot persist record: {e}");
        }
    }

    fn generate(&self, id: &str, query: &Query, sampler: &SamplerConfig, t0: Instant) -> Result<JobResult, String> {
        let dir = self.job_dir.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let sample = self.model.sample(query, sampler).map_err(|e| e.to_string())?;
        let png = sample.image.png_bytes().map_err(|e| e.to_string())?;
        let image = dir.join("image.png");
        std::fs::write(&image, &png).map_err(|e| e.to_string())?;
        let mut attention = Vec::new();
        for r in 0..query.regions.len() {
            let overlay = region_overlay(&sample, query, r).map_err(|e| e.to_string())?;
            let path = dir.join(format!("attention_{r}.png"));
            overlay.save_png(&path).map_err(|e| e.to_string())?;
            attention.push(path);
        }
        Ok(JobResult { image, attention, elapsed_ms: t0.elapsed().as_millis() as u64, image_sha256: bytes_hash(&png) })
    }
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    /// Canonical grammar text or the JSON query form.
    query: Value,
    #[serde(default)]
    sampler: Option<Value>,
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let quant = state.model.config().quantizer;
    let query = match req.query {
        Value::String(text) => match parse(&text, &quant) {
            Ok(q) => q,
            Err(e) => {
                return (StatusCode::BAD_REQUEST, Json(json!({ "error": e.to_string(), "offset": e.offset }))).into_response()
            }
        },
        other => match serde_json::from_value::<Query>(other) {
            Ok(q) => q,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid query: {e}")),
        },
    };
    let mut sampler = SamplerConfig::default();
    if let Some(v) = req.sampler {
        let mut base = serde_json::to_value(&sampler).expect("sampler config serializes");
        let (Value::Object(b), Value::Object(o)) = (&mut base, v) else {
            return error(StatusCode::BAD_REQUEST, "sampler must be a JSON object");
        };
        b.extend(o);
        sampler = match serde_json::from_value(base) {
            Ok(s) => s,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid sampler config: {e}")),
        };
    }
    sampler.record_attention = !query.regions.is_empty();
    if let Err(e) = sampler.validate(state.model.schedule().len()) {
        return error(StatusCode::BAD_REQUEST, e);
    }
    let seq = match state.model.encode(&query) {
        Ok(s) => s,
        Err(DiffusionError::Query(e @ QueryError::Overflow { .. })) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let vocab = state.model.vocab();
    let sequence = seq.tokens()[..seq.unpadded_len()].iter().map(|t| vocab.render(t)).collect();
    let id = format!("job-{:06}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let job = GenerationJob::new(id.clone(), query, sampler, state.checkpoint_sha256.clone(), sequence);
    state.jobs.write().unwrap().insert(id.clone(), job);
    match state.queue.try_send(id.clone()) {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "job_id": id, "status": "queued" }))).into_response(),
        Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
            state.jobs.write().unwrap().remove(&id);
            error(StatusCode::TOO_MANY_REQUESTS, "generation queue is full")
        }
    }
}

async fn job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.job(&id) {
        Some(j) => Json(j).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no job {id}")),
    }
}

fn png(path: &Path) -> Response {
    match std::fs::read(path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// The finished result of a job, or the response explaining why there is none.
fn finished(state: &AppState, id: &str) -> Result<JobResult, Response> {
    let job = state.job(id).ok_or_else(|| error(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    match (job.status, job.result) {
        (JobStatus::Done, Some(r)) => Ok(r),
        (JobStatus::Failed, _) => Err(error(StatusCode::NOT_FOUND, format!("job {id} failed: {}", job.error.unwrap_or_default()))),
        (s, _) => Err(error(StatusCode::CONFLICT, format!("job {id} is {s:?}"))),
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match finished(&state, &id) {
        Ok(r) => png(&r.image),
        Err(resp) => resp,
    }
}

async fn attention(State(state): State<Arc<AppState>>, UrlPath((id, region)): UrlPath<(String, usize)>) -> Response {
    match finished(&state, &id) {
        Ok(r) => match r.attention.get(region) {
            Some(p) => png(p),
            None => error(StatusCode::NOT_FOUND, format!("job {id} has {} regions", r.attention.len())),
        },
        Err(resp) => resp,
    }
}

async fn model(State(state): State<Arc<AppState>>) -> Json<Value> {
    let m = &state.model;
    let cfg = m.config();
    Json(json!({
        "vocabulary": m.vocab().words(),
        "n_bins": cfg.quantizer.n_bins(),
        "max_len": cfg.max_len,
        "canvas": { "height": cfg.image_size, "width": cfg.image_size },
        "schedule_steps": m.schedule().len(),
        "parameters": m.parameter_count(),
        "checkpoint_sha256": state.checkpoint_sha256,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let queued = state.jobs.read().unwrap().values().filter(|j| j.status == JobStatus::Queued).count();
    Json(json!({ "status": "ok", "workers": state.workers, "queued": queued }))
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let r = Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/images/{id}", get(image))
        .route("/v1/attention/{id}/{region}", get(attention))
        .route("/v1/model", get(model))
        .route("/v1/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => r.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => r,
    }
}

pub async fn serve(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
