//! Async client for the kvcomm HTTP service.

use kvcomm_core::api::{
    CalibrateRequest, CheckRequest, CheckResponse, ErrorBody, ExperimentRequest, ExtractRequest, FlopsRequest,
    FlopsResponse, LayerSet, MeasureRequest, ModelInfo, ModelSpec, PayloadResponse, ReceiveRequest, ReceiveResponse,
    RunRequest, RunResponse,
};
use kvcomm_core::cost::CostReport;
use kvcomm_core::experiments::ExperimentGrid;
use kvcomm_core::ErrorKind;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Environment variable naming the service base URL.
pub const SERVER_ENV: &str = "KVCOMM_SERVER";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("server answered {status}: {}", body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status} with an unreadable body: {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ClientError::Api { body, .. } => body.kind,
            ClientError::Http(_) | ClientError::Unexpected { .. } => ErrorKind::Transport,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        let mut base = base.into();
        if !base.contains("://") {
            base = format!("http://{base}");
        }
        Client {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Unexpected {
                status: status.as_u16(),
                text: e.to_string(),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api {
                status: status.as_u16(),
                body,
            }),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                text: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(self.url(path)).send().await?).await
    }

    pub async fn health(&self) -> Result<()> {
        self.http.get(self.url("/healthz")).send().await?.error_for_status()?;
        Ok(())
    }

    pub async fn create_model(&self, spec: &ModelSpec) -> Result<ModelInfo> {
        self.post("/v1/models", spec).await
    }

    pub async fn upload_model(&self, bytes: Vec<u8>) -> Result<ModelInfo> {
        Self::decode(self.http.post(self.url("/v1/models/upload")).body(bytes).send().await?).await
    }

    pub async fn models(&self) -> Result<Vec<ModelInfo>> {
        self.get("/v1/models").await
    }

    pub async fn model(&self, id: &str) -> Result<ModelInfo> {
        self.get(&format!("/v1/models/{id}")).await
    }

    pub async fn model_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let resp = self.http.get(self.url(&format!("/v1/models/{id}/bytes"))).send().await?;
        if !resp.status().is_success() {
            return Self::decode(resp).await;
        }
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn calibrate(&self, req: &CalibrateRequest) -> Result<LayerSet> {
        self.post("/v1/calibrate", req).await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<RunResponse> {
        self.post("/v1/run", req).await
    }

    pub async fn extract(&self, req: &ExtractRequest) -> Result<PayloadResponse> {
        self.post("/v1/payload/extract", req).await
    }

    pub async fn receive(&self, req: &ReceiveRequest) -> Result<ReceiveResponse> {
        self.post("/v1/payload/receive", req).await
    }

    pub async fn experiment(&self, req: &ExperimentRequest) -> Result<ExperimentGrid> {
        self.post("/v1/experiments", req).await
    }

    pub async fn flops(&self, req: &FlopsRequest) -> Result<FlopsResponse> {
        self.post("/v1/flops", req).await
    }

    pub async fn measure(&self, req: &MeasureRequest) -> Result<CostReport> {
        self.post("/v1/measure", req).await
    }

    pub async fn check(&self, req: &CheckRequest) -> Result<CheckResponse> {
        self.post("/v1/check", req).await
    }
}
