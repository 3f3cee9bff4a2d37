use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use kvcomm_client::Client;
use kvcomm_core::api::{
    CalibrateRequest, CheckRequest, ExperimentRequest, ExtractRequest, FlopsRequest, LayerSet, MeasureRequest, Method,
    ModelInfo, ModelSpec, OutputPaths, ReceiveRequest, RunConfig, RunReport, RunRequest, RunSettings, Sample,
    ScoreSource,
};
use kvcomm_core::baselines::{AcMode, TokenMode};
use kvcomm_core::comm::Transport;
use kvcomm_core::cost::{CostConstants, CostParams};
use kvcomm_core::experiments::{sample_tokens, ExperimentConfig, ExperimentGrid, ExperimentKind};
use kvcomm_core::kv::DType;
use kvcomm_core::model::ModelConfig;
use kvcomm_core::selection::{resolve_m, Budget, SelectionConfig, Strategy};
use kvcomm_core::tokens;

use crate::output::{
    emit, emit_json, read_file, read_json, CliError, CliResult, ExperimentReport, ReceiveReport, EXIT_CHECK, EXIT_OK,
};
use crate::*;

pub async fn dispatch(cli: Cli) -> CliResult<u8> {
    if let Command::Serve(args) = &cli.command {
        return serve(args).await;
    }
    let client = connect(cli.server.as_deref()).await?;
    match cli.command {
        Command::GenModel(a) => gen_model(&client, a).await,
        Command::Calibrate(a) => calibrate(&client, a).await,
        Command::Run(a) => run(&client, a).await,
        Command::Experiment(a) => experiment(&client, a).await,
        Command::Flops(a) => flops(&client, a).await,
        Command::PlotData(a) => plot_data(a),
        Command::Check(a) => check(&client, a).await,
        Command::Serve(_) => unreachable!(),
    }
}

async fn connect(server: Option<&str>) -> CliResult<Client> {
    match server {
        Some(url) => Ok(Client::new(url)),
        None => {
            let (addr, _handle) = kvcomm_service::spawn("127.0.0.1:0")
                .await
                .map_err(|e| CliError::other(format!("cannot start embedded server: {e}")))?;
            Ok(Client::new(addr.to_string()))
        }
    }
}

async fn serve(args: &ServeArgs) -> CliResult<u8> {
    let (addr, handle) = kvcomm_service::spawn(&args.addr)
        .await
        .map_err(|e| CliError::config(format!("cannot bind {}: {e}", args.addr)))?;
    println!("listening on http://{addr}");
    match handle.await {
        Ok(Ok(())) => Ok(EXIT_OK),
        Ok(Err(e)) => Err(CliError::other(e.to_string())),
        Err(e) => Err(CliError::other(e.to_string())),
    }
}

fn spec_of(info: &ModelInfo) -> ModelSpec {
    ModelSpec {
        config: info.config.clone(),
        seed: info.seed,
    }
}

async fn upload(client: &Client, path: &Path) -> CliResult<ModelInfo> {
    Ok(client.upload_model(read_file(path)?).await?)
}

fn read_tokens(path: &Path, bytes: bool) -> CliResult<Vec<u32>> {
    if bytes {
        Ok(read_file(path)?.into_iter().map(u32::from).collect())
    } else {
        Ok(tokens::read_ids(path)?)
    }
}

fn required_tokens(path: Option<&PathBuf>, what: &str, bytes: bool) -> CliResult<Vec<u32>> {
    let path = path.ok_or_else(|| CliError::config(format!("--{what} is required")))?;
    read_tokens(path, bytes)
}

async fn gen_model(client: &Client, a: GenModelArgs) -> CliResult<u8> {
    let mut config = match &a.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => match a.preset {
            Preset::Micro => ModelConfig::micro(),
            Preset::Wide => ModelConfig {
                n_layers: 8,
                n_heads: 4,
                n_kv_heads: 2,
                head_dim: 32,
                d_model: 128,
                d_ff: 512,
                vocab_size: 256,
                ..ModelConfig::micro()
            },
        },
    };
    let overrides = [
        (a.layers, &mut config.n_layers),
        (a.heads, &mut config.n_heads),
        (a.kv_heads, &mut config.n_kv_heads),
        (a.head_dim, &mut config.head_dim),
        (a.d_model, &mut config.d_model),
        (a.d_ff, &mut config.d_ff),
        (a.vocab, &mut config.vocab_size),
    ];
    for (value, field) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    let info = client.create_model(&ModelSpec { config, seed: a.seed }).await?;
    let bytes = client.model_bytes(&info.id).await?;
    emit(Some(&a.out), &bytes)?;
    emit_json(None, &info)?;
    Ok(EXIT_OK)
}

fn selection(a: &SelectionArgs, mut cfg: SelectionConfig) -> CliResult<(SelectionConfig, ScoreSource)> {
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if a.mu.is_some() {
        cfg.mu = a.mu;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(r) = a.ratio {
        cfg.budget = Budget::Ratio(r);
    }
    if let Some(m) = a.m {
        cfg.budget = Budget::Count(m);
    }
    let strategy = match (a.strategy, a.chunk) {
        (None, Some(_)) => Some(StrategyArg::Chunk),
        (s, _) => s,
    };
    if let Some(s) = strategy {
        cfg.strategy = match s {
            StrategyArg::Score => Strategy::Score,
            StrategyArg::Chunk => {
                let (from, to) = a.chunk.ok_or_else(|| CliError::config("--strategy chunk needs --chunk FROM,TO"))?;
                Strategy::Chunk { from, to }
            }
            StrategyArg::Random => Strategy::Random { seed: a.random_seed },
            StrategyArg::AttentionLevel => Strategy::AttentionLevel {
                level: a
                    .level
                    .ok_or_else(|| CliError::config("--strategy attention-level needs --level"))?,
            },
            StrategyArg::None => Strategy::None,
        };
    }
    let source = if a.sender_scores {
        ScoreSource::Sender
    } else {
        ScoreSource::Receiver
    };
    Ok((cfg, source))
}

async fn calibrate(client: &Client, a: CalibrateArgs) -> CliResult<u8> {
    let sender = upload(client, &a.sender).await?;
    let receiver = upload(client, &a.receiver).await?;
    let context = required_tokens(a.inputs.context.as_ref(), "context", a.inputs.bytes)?;
    let query = required_tokens(a.inputs.query.as_ref(), "query", a.inputs.bytes)?;
    let (selection, score_source) = selection(&a.selection, SelectionConfig::default())?;
    let set = client
        .calibrate(&CalibrateRequest {
            sender: sender.id,
            receiver: receiver.id,
            samples: vec![Sample { context, query }],
            selection,
            score_source,
        })
        .await?;
    emit_json(a.out.as_deref(), &set)?;
    Ok(EXIT_OK)
}

fn parse_transport(s: &str) -> CliResult<Transport> {
    match s {
        "in-process" | "in_process" => Ok(Transport::InProcess),
        "tcp" => Ok(Transport::Tcp {
            addr: None,
            timeout_ms: None,
        }),
        _ => {
            if let Some(path) = s.strip_prefix("file:") {
                Ok(Transport::File { path: path.into() })
            } else if let Some(addr) = s.strip_prefix("tcp:") {
                Ok(Transport::Tcp {
                    addr: Some(addr.to_string()),
                    timeout_ms: None,
                })
            } else {
                Err(CliError::config(format!("unknown transport {s:?}")))
            }
        }
    }
}

fn method_of(a: &RunArgs) -> Method {
    if a.baseline {
        Method::Baseline
    } else if a.skyline {
        Method::Skyline
    } else if let Some(mode) = a.ac {
        Method::Ac {
            mode: match mode {
                AcModeArg::Replace => AcMode::Replace,
                AcModeArg::Mean => AcMode::Mean,
                AcModeArg::Sum => AcMode::Sum,
            },
            layer: a.ac_layer,
        }
    } else if let Some((layer_from, layer_to)) = a.hs_prepend {
        Method::HsPrepend { layer_from, layer_to }
    } else {
        Method::Kvcomm
    }
}

async fn run(client: &Client, a: RunArgs) -> CliResult<u8> {
    if let Some(payload) = &a.payload_in {
        return receive(client, &a, payload).await;
    }
    let (config, sender, receiver) = match &a.config {
        Some(path) => {
            let config: RunConfig = read_json(path)?;
            let s = client.create_model(&config.sender).await?;
            let r = client.create_model(&config.receiver).await?;
            (config, s, r)
        }
        None => {
            let s = upload(client, a.sender.as_deref().expect("required by clap")).await?;
            let r = upload(client, a.receiver.as_deref().expect("required by clap")).await?;
            let context = required_tokens(a.inputs.context.as_ref(), "context", a.inputs.bytes)?;
            let query = required_tokens(a.inputs.query.as_ref(), "query", a.inputs.bytes)?;
            let (selection, score_source) = selection(&a.selection, SelectionConfig::default())?;
            let layers = match (&a.layers, &a.layer_set) {
                (Some(l), _) => Some(l.clone()),
                (None, Some(p)) => Some(read_json::<LayerSet>(p)?.layers),
                (None, None) => None,
            };
            let settings = RunSettings {
                method: method_of(&a),
                layers,
                selection,
                score_source,
                transport: parse_transport(&a.transport)?,
                dtype: match a.dtype {
                    DTypeArg::F32 => DType::F32,
                    DTypeArg::F16 => DType::F16,
                },
                max_new: a.max_new,
                compare_skyline: a.compare_skyline,
                ..RunSettings::new(context, query)
            };
            let config = RunConfig {
                sender: spec_of(&s),
                receiver: spec_of(&r),
                settings,
                experiment: None,
                outputs: OutputPaths {
                    report: a.out.clone(),
                    csv: None,
                },
            };
            (config, s, r)
        }
    };
    let result = client
        .run(&RunRequest {
            sender: sender.id.clone(),
            receiver: receiver.id,
            settings: config.settings.clone(),
        })
        .await?;
    if let (Some(path), Some(layers)) = (&a.payload_out, &result.layers) {
        let p = client
            .extract(&ExtractRequest {
                sender: sender.id,
                context: config.settings.context.clone(),
                layers: layers.clone(),
                dtype: config.settings.dtype,
            })
            .await?;
        let bytes = B64.decode(&p.payload).map_err(|e| CliError::other(e.to_string()))?;
        emit(Some(path), &bytes)?;
    }
    let out = a.out.clone().or_else(|| config.outputs.report.clone());
    emit_json(out.as_deref(), &RunReport { config, result })?;
    Ok(EXIT_OK)
}

async fn receive(client: &Client, a: &RunArgs, payload: &Path) -> CliResult<u8> {
    let receiver_path = a
        .receiver
        .as_deref()
        .ok_or_else(|| CliError::config("--payload-in needs --receiver"))?;
    let receiver = upload(client, receiver_path).await?;
    let query = required_tokens(a.inputs.query.as_ref(), "query", a.inputs.bytes)?;
    let bytes = read_file(payload)?;
    let result = client
        .receive(&ReceiveRequest {
            receiver: receiver.id.clone(),
            query: query.clone(),
            payload: B64.encode(&bytes),
            max_new: a.max_new,
        })
        .await?;
    let report = ReceiveReport {
        receiver: spec_of(&receiver),
        query,
        payload: payload.to_path_buf(),
        max_new: a.max_new,
        result,
    };
    emit_json(a.out.as_deref(), &report)?;
    Ok(EXIT_OK)
}

async fn experiment(client: &Client, a: ExperimentArgs) -> CliResult<u8> {
    let kinds: Vec<ExperimentKind> = if a.kind == "all" {
        ExperimentKind::ALL.to_vec()
    } else {
        vec![a.kind.parse()?]
    };
    let base = match &a.config {
        Some(p) => Some(read_json::<ExperimentConfig>(p)?),
        None => None,
    };
    let sender = upload(client, &a.sender).await?;
    let receiver = upload(client, &a.receiver).await?;
    for kind in kinds {
        let mut cfg = base.clone().unwrap_or_else(|| ExperimentConfig::new(kind));
        cfg.kind = kind;
        if let Some(v) = a.context_len {
            cfg.context_len = v;
        }
        if let Some(v) = a.query_len {
            cfg.query_len = v;
        }
        if let Some(v) = a.data_seed {
            cfg.data_seed = v;
        }
        if let Some(v) = &a.token_mode {
            cfg.token_mode = v.parse::<TokenMode>()?;
        }
        if let Some(v) = a.levels {
            cfg.levels = v;
        }
        if let Some(v) = a.level_m {
            cfg.level_m = v;
        }
        if let Some(v) = &a.ratios {
            cfg.ratios = v.clone();
        }
        if let Some(v) = a.draws {
            cfg.draws = v;
        }
        if let Some(v) = a.decode_steps {
            cfg.decode_steps = v;
        }
        cfg.selection = selection(&a.selection, cfg.selection.clone())?.0;
        let grid = client
            .experiment(&ExperimentRequest {
                sender: sender.id.clone(),
                receiver: receiver.id.clone(),
                config: cfg.clone(),
            })
            .await?;
        let csv_path = a.out_dir.join(format!("{}.csv", kind.name()));
        let json_path = a.out_dir.join(format!("{}.json", kind.name()));
        emit(Some(&csv_path), grid.to_csv()?.as_bytes())?;
        let report = ExperimentReport {
            sender: spec_of(&sender),
            receiver: spec_of(&receiver),
            config: cfg,
            grid,
        };
        emit_json(Some(&json_path), &report)?;
        println!("{}\n{}", csv_path.display(), json_path.display());
    }
    Ok(EXIT_OK)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::other(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::other(e.to_string())
}

async fn flops(client: &Client, a: FlopsArgs) -> CliResult<u8> {
    let model = match &a.model {
        Some(p) => Some(upload(client, p).await?),
        None => None,
    };
    let (l, d) = match &model {
        Some(info) => (info.config.n_layers as u64, info.config.d_model as u64),
        None => (a.l.expect("required by clap"), a.d.expect("required by clap")),
    };
    if model.is_some() && (a.l.is_some_and(|v| v != l) || a.d.is_some_and(|v| v != d)) {
        return Err(CliError::config("--l and --d must match the model when --model is given"));
    }
    let constants = model.as_ref().map(|m| CostConstants::for_model(&m.config));
    let params = |m: u64| CostParams {
        l,
        m,
        d,
        c: a.c,
        q: a.q,
        t: a.t,
        t_s: a.t_s,
        t_r: a.t_r,
    };

    if let (Some(info), Some(ratios)) = (&model, &a.ratios) {
        let vocab = info.config.vocab_size;
        let context = sample_tokens(vocab, a.c as usize, a.data_seed);
        let query = sample_tokens(vocab, a.q as usize, a.data_seed.wrapping_add(1));
        let mut reports = Vec::new();
        for &ratio in ratios {
            let m = resolve_m(l as usize, ratio)?;
            let report = client
                .measure(&MeasureRequest {
                    sender: info.id.clone(),
                    receiver: info.id.clone(),
                    context: context.clone(),
                    query: query.clone(),
                    layers: (0..m).collect(),
                    t: a.t as usize,
                })
                .await?;
            reports.push((ratio, m, report));
        }
        if a.format == Format::Json {
            let rows: Vec<_> = reports
                .iter()
                .map(|(ratio, m, r)| serde_json::json!({"ratio": ratio, "m": m, "report": r}))
                .collect();
            emit_json(a.out.as_deref(), &rows)?;
            return Ok(EXIT_OK);
        }
        let mut w = csv_writer();
        w.write_record([
            "ratio",
            "m",
            "kvcomm_sender",
            "kvcomm_receiver",
            "skyline_receiver",
            "receiver_ratio",
            "total_ratio",
            "analytic_kvcomm_receiver",
            "analytic_skyline",
            "max_rel_error",
        ])
        .map_err(csv_err)?;
        for (ratio, m, r) in &reports {
            let sky = r.skyline_instrumented.unwrap_or_default();
            let analytic_receiver = r.kvcomm.term("receiver_prefill").unwrap_or(0) + r.kvcomm.term("receiver_decode").unwrap_or(0);
            let max_err = r.rows.iter().map(|x| x.rel_error).fold(0.0, f64::max);
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                ratio.to_string(),
                m.to_string(),
                r.kvcomm_instrumented.sender_prefill.to_string(),
                r.kvcomm_instrumented.receiver().to_string(),
                sky.receiver().to_string(),
                opt(r.receiver_ratio),
                opt(r.total_ratio),
                analytic_receiver.to_string(),
                r.skyline.total.to_string(),
                format!("{max_err:.6}"),
            ])
            .map_err(csv_err)?;
        }
        emit(a.out.as_deref(), &finish_csv(w)?)?;
        return Ok(EXIT_OK);
    }

    let m = a.m.ok_or_else(|| CliError::config("--m is required unless --ratios is given with --model"))?;
    let resp = client
        .flops(&FlopsRequest {
            params: params(m),
            constants,
        })
        .await?;
    if a.format == Format::Json {
        emit_json(a.out.as_deref(), &resp)?;
        return Ok(EXIT_OK);
    }
    let mut w = csv_writer();
    w.write_record(["method", "term", "flops"]).map_err(csv_err)?;
    for (name, b) in [("kvcomm", &resp.kvcomm), ("skyline", &resp.skyline), ("nld", &resp.nld)] {
        for t in &b.terms {
            w.write_record([name, t.name.as_str(), &t.flops.to_string()]).map_err(csv_err)?;
        }
        w.write_record([name, "total", &b.total.to_string()]).map_err(csv_err)?;
    }
    w.write_record(["margin", "over_skyline", &resp.margin_over_skyline.to_string()])
        .map_err(csv_err)?;
    w.write_record(["margin", "over_nld", &resp.margin_over_nld.to_string()])
        .map_err(csv_err)?;
    emit(a.out.as_deref(), &finish_csv(w)?)?;
    Ok(EXIT_OK)
}

fn plot_data(a: PlotDataArgs) -> CliResult<u8> {
    let value: serde_json::Value = read_json(&a.input)?;
    let grid: ExperimentGrid = match value.get("grid") {
        Some(g) => serde_json::from_value(g.clone()),
        None => serde_json::from_value(value),
    }
    .map_err(|e| CliError::config(format!("{}: not a grid: {e}", a.input.display())))?;
    grid.validate()?;
    let mut w = csv_writer();
    w.write_record([grid.row_axis.as_str(), grid.col_axis.as_str(), grid.metric.as_str()])
        .map_err(csv_err)?;
    for (r, row) in grid.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                w.write_record([grid.rows[r].as_str(), grid.cols[c].as_str(), &format!("{v:.9e}")])
                    .map_err(csv_err)?;
            }
        }
    }
    emit(a.out.as_deref(), &finish_csv(w)?)?;
    Ok(EXIT_OK)
}

async fn check(client: &Client, a: CheckArgs) -> CliResult<u8> {
    let info = upload(client, &a.model).await?;
    let resp = client
        .check(&CheckRequest {
            model: info.id,
            samples: a.samples,
            seed: a.seed,
            max_new: a.max_new,
        })
        .await?;
    emit_json(None, &resp)?;
    Ok(if resp.passed { EXIT_OK } else { EXIT_CHECK })
}
