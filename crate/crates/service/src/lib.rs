//! HTTP front end over `kvcomm-core`.
//!
//! Models live in an in-memory registry keyed by their hex id. Every compute
//! endpoint resolves ids, then runs the core operation on the blocking pool.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kvcomm_core::api::{
    self, CalibrateRequest, CheckRequest, CheckResponse, ErrorBody, ExperimentRequest, ExtractRequest, FlopsRequest,
    FlopsResponse, LayerSet, MeasureRequest, ModelInfo, ModelSpec, PayloadResponse, ReceiveRequest, ReceiveResponse,
    RunRequest, RunResponse,
};
use kvcomm_core::cost::CostReport;
use kvcomm_core::experiments::{run_experiment, ExperimentGrid};
use kvcomm_core::model::Model;
use kvcomm_core::{Error, ErrorKind};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// Upper bound on request bodies; model uploads dominate.
pub const BODY_LIMIT: usize = 1 << 30;

#[derive(Default)]
pub struct Registry {
    models: RwLock<BTreeMap<u64, Arc<Model>>>,
}

impl Registry {
    pub fn insert(&self, model: Model) -> ModelInfo {
        let info = ModelInfo::of(&model);
        self.models
            .write()
            .expect("registry lock poisoned")
            .insert(model.model_id(), Arc::new(model));
        info
    }

    pub fn get(&self, id: &str) -> Result<Arc<Model>, ApiError> {
        let key = api::parse_id(id)?;
        self.models
            .read()
            .expect("registry lock poisoned")
            .get(&key)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no model with id {id}")))
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.models
            .read()
            .expect("registry lock poisoned")
            .values()
            .map(|m| ModelInfo::of(m))
            .collect()
    }
}

pub type AppState = Arc<Registry>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody {
                kind: ErrorKind::Config,
                message,
                stage: None,
                wire_code: None,
            },
        }
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Config => StatusCode::BAD_REQUEST,
        ErrorKind::Shape | ErrorKind::Protocol => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Transport => StatusCode::BAD_GATEWAY,
        ErrorKind::Numeric | ErrorKind::Io => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let body = ErrorBody::of(&e);
        ApiError {
            status: status_for(body.kind),
            body,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                kind: ErrorKind::Config,
                message: r.body_text(),
                stage: None,
                wire_code: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> kvcomm_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(Error::Numeric(format!("worker task failed: {e}")).into()),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn list_models(State(reg): State<AppState>) -> Json<Vec<ModelInfo>> {
    Json(reg.list())
}

async fn create_model(State(reg): State<AppState>, body: Result<Json<ModelSpec>, JsonRejection>) -> ApiResult<ModelInfo> {
    let spec = body?.0;
    let model = tokio::task::spawn_blocking(move || Model::build(spec.config, spec.seed))
        .await
        .map_err(|e| ApiError::from(Error::Numeric(e.to_string())))??;
    Ok(Json(reg.insert(model)))
}

async fn upload_model(State(reg): State<AppState>, bytes: Bytes) -> ApiResult<ModelInfo> {
    let model = tokio::task::spawn_blocking(move || Model::from_bytes(&bytes))
        .await
        .map_err(|e| ApiError::from(Error::Numeric(e.to_string())))??;
    Ok(Json(reg.insert(model)))
}

async fn get_model(State(reg): State<AppState>, Path(id): Path<String>) -> ApiResult<ModelInfo> {
    Ok(Json(ModelInfo::of(reg.get(&id)?.as_ref())))
}

async fn model_bytes(State(reg): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let model = reg.get(&id)?;
    let bytes = model.to_bytes();
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn calibrate(State(reg): State<AppState>, body: Result<Json<CalibrateRequest>, JsonRejection>) -> ApiResult<LayerSet> {
    let req = body?.0;
    let (s, r) = (reg.get(&req.sender)?, reg.get(&req.receiver)?);
    blocking(move || api::calibrate(&s, &r, &req.samples, &req.selection, req.score_source)).await
}

async fn run(State(reg): State<AppState>, body: Result<Json<RunRequest>, JsonRejection>) -> ApiResult<RunResponse> {
    let req = body?.0;
    let (s, r) = (reg.get(&req.sender)?, reg.get(&req.receiver)?);
    blocking(move || api::run(&s, &r, &req.settings)).await
}

async fn extract(State(reg): State<AppState>, body: Result<Json<ExtractRequest>, JsonRejection>) -> ApiResult<PayloadResponse> {
    let req = body?.0;
    let s = reg.get(&req.sender)?;
    blocking(move || api::extract(&s, &req)).await
}

async fn receive(State(reg): State<AppState>, body: Result<Json<ReceiveRequest>, JsonRejection>) -> ApiResult<ReceiveResponse> {
    let req = body?.0;
    let r = reg.get(&req.receiver)?;
    blocking(move || api::receive(&r, &req)).await
}

async fn experiment(State(reg): State<AppState>, body: Result<Json<ExperimentRequest>, JsonRejection>) -> ApiResult<ExperimentGrid> {
    let req = body?.0;
    let (s, r) = (reg.get(&req.sender)?, reg.get(&req.receiver)?);
    blocking(move || run_experiment(&req.config, &s, &r)).await
}

async fn flops(body: Result<Json<FlopsRequest>, JsonRejection>) -> ApiResult<FlopsResponse> {
    Ok(Json(api::flops(&body?.0)?))
}

async fn measure(State(reg): State<AppState>, body: Result<Json<MeasureRequest>, JsonRejection>) -> ApiResult<CostReport> {
    let req = body?.0;
    let (s, r) = (reg.get(&req.sender)?, reg.get(&req.receiver)?);
    blocking(move || api::measure(&s, &r, &req)).await
}

async fn check(State(reg): State<AppState>, body: Result<Json<CheckRequest>, JsonRejection>) -> ApiResult<CheckResponse> {
    let req = body?.0;
    let m = reg.get(&req.model)?;
    blocking(move || api::check(&m, &req)).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/models", get(list_models).post(create_model))
        .route("/v1/models/upload", post(upload_model))
        .route("/v1/models/{id}", get(get_model))
        .route("/v1/models/{id}/bytes", get(model_bytes))
        .route("/v1/calibrate", post(calibrate))
        .route("/v1/run", post(run))
        .route("/v1/payload/extract", post(extract))
        .route("/v1/payload/receive", post(receive))
        .route("/v1/experiments", post(experiment))
        .route("/v1/flops", post(flops))
        .route("/v1/measure", post(measure))
        .route("/v1/check", post(check))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Bind `addr` and serve in the background on the current runtime.
pub async fn spawn(addr: &str) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!(%local, "kvcomm service listening");
    let handle = tokio::spawn(serve(listener, AppState::default()));
    Ok((local, handle))
}
