//! HTTP and WebSocket inference service over one read-only checkpoint.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::{DType, Device};
use ngs_core::audio::{read_wav_bytes, resample_integer, wav_bytes};
use ngs_core::synthesis::{self, PathSpec};
use ngs_core::temporal::sample_prior;
use ngs_core::{Error, GranularModel, LatentSeries, SequenceEmbedding};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_ENV: &str = "NGS_CHECKPOINT";

/// Samples per binary frame on `/stream`.
pub const STREAM_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub bind: SocketAddr,
    pub max_concurrent_renders: usize,
    /// Seed used when a request does not carry one.
    pub default_seed: u64,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            bind: SocketAddr::from(([127, 0, 0, 1], 8750)),
            max_concurrent_renders: 2,
            default_seed: 0,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<GranularModel>,
    renders: Arc<Semaphore>,
    default_seed: u64,
}

impl AppState {
    pub fn new(model: GranularModel, max_concurrent_renders: usize, default_seed: u64) -> Self {
        Self {
            model: Arc::new(model),
            renders: Arc::new(Semaphore::new(max_concurrent_renders.max(1))),
            default_seed,
        }
    }

    pub fn load(config: &ServiceConfig) -> ngs_core::Result<Self> {
        let model = GranularModel::load(&config.checkpoint, DType::F32, &Device::Cpu)?;
        Ok(Self::new(model, config.max_concurrent_renders, config.default_seed))
    }

    pub fn model(&self) -> &GranularModel {
        &self.model
    }

    /// Runs a render on the blocking pool once a render slot is free.
    async fn render<T, F>(&self, job: F) -> Result<T, ApiError>
    where
        F: FnOnce(&GranularModel) -> ngs_core::Result<T> + Send + 'static,
        T: Send + 'static,
    {
        let _permit = self.renders.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let model = self.model.clone();
        tokio::task::spawn_blocking(move || job(&model))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::from)
    }
}

/// Structured error body `{error, detail}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    detail: String,
}

impl ApiError {
    fn bad_request(kind: &str, detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: kind.into(),
            detail: detail.into(),
        }
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal".into(),
            detail: detail.into(),
        }
    }

    fn body(&self) -> Value {
        json!({ "error": self.kind, "detail": self.detail })
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Tensor(_) | Error::Io(_) | Error::Checkpoint { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            kind: e.kind().into(),
            detail: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("json", e.to_string()))
}

fn wav_response(samples: &[f32], sample_rate: u32) -> Result<Response, ApiError> {
    let bytes = wav_bytes(samples, sample_rate)?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

/// Category given by index or by label name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConditionRef {
    Index(usize),
    Name(String),
}

fn resolve_condition(model: &GranularModel, c: &Option<ConditionRef>) -> Result<Option<usize>, ApiError> {
    match c {
        None => Ok(None),
        Some(ConditionRef::Index(i)) => Ok(Some(*i)),
        Some(ConditionRef::Name(n)) => Ok(Some(model.config.label_index(n)?)),
    }
}

/// Row-major latent matrix on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl LatentMatrix {
    fn to_rows(&self, latent_dim: usize) -> Result<Vec<Vec<f32>>, ApiError> {
        if self.rows == 0 || self.cols != latent_dim || self.data.len() != self.rows * self.cols {
            return Err(ApiError::bad_request(
                "shape",
                format!(
                    "expected rows x {latent_dim} values, got rows={} cols={} with {} values",
                    self.rows,
                    self.cols,
                    self.data.len()
                ),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::bad_request("shape", "latent values must be finite"));
        }
        Ok(self.data.chunks(self.cols).map(<[f32]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct DecodeRequest {
    #[serde(flatten)]
    pub latents: LatentMatrix,
    #[serde(default)]
    pub condition: Option<ConditionRef>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SampleRequest {
    #[serde(default)]
    pub condition: Option<ConditionRef>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Interpolation between two embeddings, given explicitly or as prior seeds.
/// The excitation seed defaults to `seed1`, so `alpha = 0` matches `/sample`
/// with that seed.
#[derive(Debug, Clone, Deserialize)]
pub struct InterpRequest {
    #[serde(default)]
    pub e1: Option<Vec<f32>>,
    #[serde(default)]
    pub e2: Option<Vec<f32>>,
    #[serde(default)]
    pub seed1: Option<u64>,
    #[serde(default)]
    pub seed2: Option<u64>,
    pub alpha: f32,
    #[serde(default)]
    pub condition: Option<ConditionRef>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PathRequest {
    pub spec: PathSpec,
    #[serde(default)]
    pub condition: Option<ConditionRef>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Request envelope of `/stream`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StreamRequest {
    Sample(SampleRequest),
    Decode(DecodeRequest),
    Interp(InterpRequest),
    Path(PathRequest),
}

fn embedding(
    model: &GranularModel,
    explicit: &Option<Vec<f32>>,
    seed: Option<u64>,
    name: &str,
) -> Result<SequenceEmbedding, ApiError> {
    let d_e = model.config.model.embedding_dim;
    match (explicit, seed) {
        (Some(v), _) if v.len() != d_e => Err(ApiError::bad_request(
            "shape",
            format!("{name} has {} dimensions, model expects {d_e}", v.len()),
        )),
        (Some(v), _) => Ok(SequenceEmbedding(v.clone())),
        (None, Some(s)) => Ok(sample_prior(d_e, s)),
        (None, None) => Err(ApiError::bad_request("config", format!("{name} or its seed is required"))),
    }
}

/// Validates a request and returns the render job.
fn plan(state: &AppState, req: StreamRequest) -> Result<RenderJob, ApiError> {
    let model = state.model();
    let default_seed = state.default_seed;
    Ok(match req {
        StreamRequest::Sample(r) => RenderJob::Sample {
            condition: resolve_condition(model, &r.condition)?,
            seed: r.seed.unwrap_or(default_seed),
        },
        StreamRequest::Decode(r) => RenderJob::Decode {
            rows: r.latents.to_rows(model.config.model.latent_dim)?,
            condition: resolve_condition(model, &r.condition)?,
            seed: r.seed.unwrap_or(default_seed),
        },
        StreamRequest::Interp(r) => {
            let e1 = embedding(model, &r.e1, r.seed1, "e1")?;
            let e2 = embedding(model, &r.e2, r.seed2, "e2")?;
            RenderJob::Interp {
                e1,
                e2,
                alpha: r.alpha,
                condition: resolve_condition(model, &r.condition)?,
                seed: r.seed.or(r.seed1).unwrap_or(default_seed),
            }
        }
        StreamRequest::Path(r) => RenderJob::Path {
            spec: r.spec,
            condition: resolve_condition(model, &r.condition)?,
            seed: r.seed.unwrap_or(default_seed),
        },
    })
}

enum RenderJob {
    Sample {
        condition: Option<usize>,
        seed: u64,
    },
    Decode {
        rows: Vec<Vec<f32>>,
        condition: Option<usize>,
        seed: u64,
    },
    Interp {
        e1: SequenceEmbedding,
        e2: SequenceEmbedding,
        alpha: f32,
        condition: Option<usize>,
        seed: u64,
    },
    Path {
        spec: PathSpec,
        condition: Option<usize>,
        seed: u64,
    },
}

impl RenderJob {
    fn run(self, model: &GranularModel) -> ngs_core::Result<Vec<f32>> {
        match self {
            RenderJob::Sample { condition, seed } => synthesis::sample(model, condition, seed),
            RenderJob::Decode { rows, condition, seed } => {
                let z = LatentSeries::from_rows(&rows, model.dtype(), model.device())?;
                synthesis::decode_latents(model, &z, condition, seed)
            }
            RenderJob::Interp {
                e1,
                e2,
                alpha,
                condition,
                seed,
            } => synthesis::interpolate_embeddings(&e1, &e2, alpha, model, condition, seed),
            RenderJob::Path { spec, condition, seed } => synthesis::free_path(&spec, model, condition, seed),
        }
    }
}

async fn render_wav(state: &AppState, req: StreamRequest) -> Result<Response, ApiError> {
    let job = plan(state, req)?;
    let samples = state.render(move |m| job.run(m)).await?;
    wav_response(&samples, state.model().config.grain.sample_rate)
}

fn summary(model: &GranularModel) -> Value {
    let c = &model.config;
    json!({
        "variant": c.model.variant,
        "sample_rate": c.grain.sample_rate,
        "grain_size": c.grain.grain_size,
        "hop": c.grain.hop(),
        "seq_len": c.grain.seq_len,
        "latent_dim": c.model.latent_dim,
        "embedding_dim": c.model.embedding_dim,
        "conditional": model.is_conditional(),
        "labels": c.label_schema,
    })
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "model": summary(state.model()) }))
}

async fn model_info(State(state): State<AppState>) -> Json<Value> {
    let m = state.model();
    Json(json!({
        "config": m.config,
        "hop": m.config.grain.hop(),
        "filter_size": m.config.grain.filter_size(),
        "chunk_samples": synthesis::chunk_len(m),
        "conditional": m.is_conditional(),
    }))
}

async fn encode(State(state): State<AppState>, body: Bytes) -> Result<Json<LatentMatrix>, ApiError> {
    let audio = read_wav_bytes(&body).map_err(|e| ApiError::bad_request("audio", e.to_string()))?;
    let rate = state.model().config.grain.sample_rate;
    let audio = resample_integer(&audio, rate).map_err(|e| ApiError::bad_request("audio", e.to_string()))?;
    let rows = state
        .render(move |m| synthesis::analyze(&audio.samples, m)?.to_rows())
        .await?;
    Ok(Json(LatentMatrix {
        rows: rows.len(),
        cols: rows.first().map_or(0, Vec::len),
        data: rows.into_iter().flatten().collect(),
    }))
}

async fn decode(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    render_wav(&state, StreamRequest::Decode(parse_json(&body)?)).await
}

async fn sample(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = if body.is_empty() {
        SampleRequest::default()
    } else {
        parse_json(&body)?
    };
    render_wav(&state, StreamRequest::Sample(req)).await
}

async fn interp(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    render_wav(&state, StreamRequest::Interp(parse_json(&body)?)).await
}

async fn path(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    render_wav(&state, StreamRequest::Path(parse_json(&body)?)).await
}

async fn stream(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_session(state, socket))
}

/// Each text message is a [`StreamRequest`]; the reply is a run of binary
/// frames of little-endian f32 samples followed by a `{"done": true}` message.
async fn stream_session(state: AppState, mut socket: WebSocket) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let result = match serde_json::from_str::<StreamRequest>(text.as_str()) {
            Ok(req) => match plan(&state, req) {
                Ok(job) => state.render(move |m| job.run(m)).await,
                Err(e) => Err(e),
            },
            Err(e) => Err(ApiError::bad_request("json", e.to_string())),
        };
        let reply = match result {
            Ok(samples) => {
                let mut ok = true;
                for chunk in samples.chunks(STREAM_CHUNK) {
                    let bytes: Vec<u8> = chunk.iter().flat_map(|s| s.to_le_bytes()).collect();
                    if socket.send(Message::Binary(bytes.into())).await.is_err() {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    return;
                }
                json!({
                    "done": true,
                    "samples": samples.len(),
                    "sample_rate": state.model().config.grain.sample_rate,
                })
            }
            Err(e) => e.body(),
        };
        if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
            return;
        }
    }
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        kind: "not_found".into(),
        detail: "no such endpoint".into(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/sample", post(sample))
        .route("/interp", post(interp))
        .route("/path", post(path))
        .route("/stream", get(stream))
        .fallback(not_found)
        .with_state(state)
}

/// Loads the checkpoint, binds and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let state = AppState::load(&config)
        .map_err(|e| anyhow::anyhow!(e).context(format!("loading checkpoint {}", config.checkpoint.display())))?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
