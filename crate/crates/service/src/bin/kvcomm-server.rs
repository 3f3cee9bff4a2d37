use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let addr = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("KVCOMM_LISTEN").ok())
        .unwrap_or_else(|| "127.0.0.1:8787".to_string());
    let (_, handle) = kvcomm_service::spawn(&addr).await?;
    tokio::select! {
        r = handle => r.map_err(std::io::Error::other)?,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
