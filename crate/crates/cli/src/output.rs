use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kvcomm_client::ClientError;
use kvcomm_core::api::{ModelSpec, ReceiveResponse};
use kvcomm_core::experiments::{ExperimentConfig, ExperimentGrid};
use kvcomm_core::ErrorKind;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config | ErrorKind::Shape => EXIT_CONFIG,
        ErrorKind::Protocol | ErrorKind::Transport => EXIT_PROTOCOL,
        ErrorKind::Numeric | ErrorKind::Io => 1,
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError {
            code: exit_code(e.kind()),
            message: e.to_string(),
        }
    }
}

impl From<kvcomm_core::Error> for CliError {
    fn from(e: kvcomm_core::Error) -> Self {
        CliError {
            code: exit_code(e.kind()),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A sweep grid together with everything needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub sender: ModelSpec,
    pub receiver: ModelSpec,
    pub config: ExperimentConfig,
    pub grid: ExperimentGrid,
}

/// Receiver-only decode of a payload file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiveReport {
    pub receiver: ModelSpec,
    pub query: Vec<u32>,
    pub payload: PathBuf,
    pub max_new: usize,
    pub result: ReceiveResponse,
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Write `bytes` to `path`, or stdout when there is none. Files get a
/// `.meta.json` sidecar holding the wall-clock time, so the file itself
/// stays byte-identical across reruns.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| CliError::other(format!("cannot write to stdout: {e}")))
        }
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::other(format!("cannot create {}: {e}", dir.display())))?;
            }
            std::fs::write(p, bytes).map_err(|e| CliError::other(format!("cannot write {}: {e}", p.display())))?;
            write_sidecar(p)
        }
    }
}

pub fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::other(e.to_string()))?;
    text.push(b'\n');
    emit(path, &text)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path) -> CliResult<()> {
    let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let meta = serde_json::json!({
        "file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "written_unix_ms": ms as u64,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    let side = sidecar_path(path);
    std::fs::write(&side, format!("{meta:#}\n")).map_err(|e| CliError::other(format!("cannot write {}: {e}", side.display())))
}
