//! HTTP service: board, model info and card prediction as JSON.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use picto_core::corpus::{Mode, Role};
use picto_core::mlm::Checkpoint;
use picto_core::prediction::{Board, CardDecoder, Prediction, Predictor, Query};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "PICTO_PORT";

/// Conventional Colourful Semantics palette.
pub fn default_role_colors() -> BTreeMap<Role, String> {
    [
        (Role::Quem, "orange"),
        (Role::Verbo, "yellow"),
        (Role::OQue, "green"),
        (Role::Como, "purple"),
        (Role::Onde, "blue"),
        (Role::Quando, "brown"),
    ]
    .into_iter()
    .map(|(r, c)| (r, c.to_owned()))
    .collect()
}

/// Body of `POST /predict`, also built by the `predict` subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub slots: BTreeMap<Role, String>,
    #[serde(default)]
    pub mask_role: Option<Role>,
    /// Flat mode only: free text to complete instead of `slots`.
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

impl PredictRequest {
    pub fn to_query(&self, default_mode: Mode, default_k: usize) -> picto_core::Result<Query> {
        let mode = self.mode.unwrap_or(default_mode);
        let k = self.k.unwrap_or(default_k);
        match (&self.prefix, mode) {
            (Some(_), Mode::Cs) => Err(invalid("`prefix` is only valid in flat mode")),
            (Some(_), Mode::Flat) if !self.slots.is_empty() => {
                Err(invalid("give either `prefix` or `slots`, not both"))
            }
            (Some(prefix), Mode::Flat) => Query::flat(prefix.clone(), k),
            (None, _) => Query::from_slots(mode, self.slots.clone(), self.mask_role, k),
        }
    }
}

fn invalid(msg: &str) -> picto_core::Error {
    picto_core::Error::Prediction(msg.to_owned())
}

/// Query mode used when a request does not name one: the mode the model
/// was trained for, else cs if its vocabulary has role tags.
pub fn model_mode(ckpt: &Checkpoint) -> Mode {
    ckpt.meta.mode.unwrap_or(if ckpt.vocab.has_role_tags() {
        Mode::Cs
    } else {
        Mode::Flat
    })
}

/// Loads the checkpoint and board and pairs them with a card decoder, read
/// from `decoder` when given (and checked against the model) or built.
pub fn load_predictor(model: &Path, board: &Path, decoder: Option<&Path>) -> anyhow::Result<Predictor> {
    let ckpt = Checkpoint::load(model).with_context(|| format!("loading model {}", model.display()))?;
    let board = Board::load(board).with_context(|| format!("loading board {}", board.display()))?;
    let predictor = match decoder {
        Some(path) => {
            let decoder = CardDecoder::load(path).with_context(|| format!("loading decoder {}", path.display()))?;
            Predictor::new(ckpt, board, decoder)?
        }
        None => Predictor::build(ckpt, board)?,
    };
    Ok(predictor)
}

/// Answers one request; the JSON encoding of the result is the response
/// body of `POST /predict` and the output of `picto predict --json`.
pub fn answer(predictor: &Predictor, request: &PredictRequest, default_k: usize) -> picto_core::Result<Prediction> {
    let query = request.to_query(model_mode(predictor.checkpoint()), default_k)?;
    predictor.predict(&query)
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub model: PathBuf,
    pub board: PathBuf,
    pub decoder: Option<PathBuf>,
    pub default_k: usize,
    pub static_dir: Option<PathBuf>,
    pub role_colors: BTreeMap<Role, String>,
}

pub struct AppState {
    predictor: Predictor,
    board_doc: Value,
    default_k: usize,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> anyhow::Result<Self> {
        let predictor = load_predictor(&config.model, &config.board, config.decoder.as_deref())?;
        let text = std::fs::read_to_string(&config.board)
            .with_context(|| format!("reading board {}", config.board.display()))?;
        let mut board_doc: Value = serde_json::from_str(&text)?;
        let colors: HashMap<&str, &str> = config
            .role_colors
            .iter()
            .map(|(r, c)| (r.as_str(), c.as_str()))
            .collect();
        board_doc
            .as_object_mut()
            .context("board document is not a JSON object")?
            .insert("role_colors".into(), json!(colors));
        Ok(AppState {
            predictor,
            board_doc,
            default_k: config.default_k,
        })
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<picto_core::Error> for ApiError {
    fn from(e: picto_core::Error) -> Self {
        use picto_core::Error as E;
        let (status, code) = match e {
            E::Prediction(_) | E::Config(_) | E::Parse { .. } => (StatusCode::BAD_REQUEST, "invalid_query"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError {
            status: e.status(),
            code: "invalid_body",
            message: e.body_text(),
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"status": "ok", "model": state.predictor.fingerprint()}))
}

async fn board(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.board_doc.clone())
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<Value> {
    let ckpt = state.predictor.checkpoint();
    Json(json!({
        "fingerprint": state.predictor.fingerprint(),
        "mode": model_mode(ckpt),
        "config": ckpt.config(),
        "vocab_size": ckpt.vocab.len(),
        "cards": state.predictor.decoder().len(),
        "default_k": state.default_k,
        "training": {
            "seed": ckpt.meta.seed,
            "epochs_completed": ckpt.meta.epochs_completed,
            "final_loss": ckpt.meta.final_loss,
        },
    }))
}

async fn predict(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> Result<Json<Prediction>, ApiError> {
    let Json(request) = body?;
    let predictor = state.clone();
    let prediction = tokio::task::spawn_blocking(move || answer(&predictor.predictor, &request, predictor.default_k))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    Ok(Json(prediction))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/board", get(board))
        .route("/model/info", get(model_info))
        .route("/predict", post(predict))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// A bound, not yet serving listener with its router.
pub struct Service {
    listener: TcpListener,
    router: Router,
}

impl Service {
    /// Loads every artifact, then binds. Fails before binding if anything
    /// does not load.
    pub async fn bind(config: &ServiceConfig) -> anyhow::Result<Self> {
        let state = Arc::new(AppState::load(config)?);
        let router = router(state, config.static_dir.as_deref());
        let listener = TcpListener::bind(config.addr)
            .await
            .with_context(|| format!("binding {}", config.addr))?;
        Ok(Service { listener, router })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
        axum::serve(self.listener, self.router)
            .with_graceful_shutdown(shutdown)
            .await?;
        Ok(())
    }
}
