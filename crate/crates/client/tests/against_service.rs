use kvcomm_client::{Client, ClientError};
use kvcomm_core::api::{ModelSpec, RunRequest, RunSettings};
use kvcomm_core::model::ModelConfig;
use kvcomm_core::ErrorKind;

fn spec(seed: u64) -> ModelSpec {
    ModelSpec {
        config: ModelConfig {
            n_layers: 4,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            d_model: 16,
            d_ff: 32,
            vocab_size: 32,
            ..ModelConfig::micro()
        },
        seed,
    }
}

#[tokio::test]
async fn round_trips_through_a_live_server() {
    let (addr, _h) = kvcomm_service::spawn("127.0.0.1:0").await.unwrap();
    let c = Client::new(addr.to_string());
    c.health().await.unwrap();

    let info = c.create_model(&spec(3)).await.unwrap();
    assert_eq!(c.model(&info.id).await.unwrap(), info);
    let bytes = c.model_bytes(&info.id).await.unwrap();
    assert_eq!(c.upload_model(bytes).await.unwrap(), info);
    assert_eq!(c.models().await.unwrap(), vec![info.clone()]);

    let req = RunRequest {
        sender: info.id.clone(),
        receiver: info.id.clone(),
        settings: RunSettings::new(vec![1, 2, 3], vec![4, 5]),
    };
    let out = c.run(&req).await.unwrap();
    assert_eq!(out.tokens.len(), req.settings.max_new);

    let mut bad = req.clone();
    bad.settings.query = vec![99];
    match c.run(&bad).await {
        Err(e @ ClientError::Api { status: 400, .. }) => assert_eq!(e.kind(), ErrorKind::Config),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(addr.to_string()).health().await.unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Transport);
}
