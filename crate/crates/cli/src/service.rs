//! Read-only HTTP search over a loaded atlas.
//!
//! `GET /healthz` and `POST /search`. The atlas is loaded in the background
//! after the socket is bound; until then both endpoints answer 503.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use histoatlas_core::atlas_index::{Atlas, SearchHit};
use histoatlas_core::evaluation::{majority_vote, DEFAULT_N_VALUES};
use histoatlas_core::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Default)]
pub struct SearchService {
    atlas: Arc<RwLock<Option<Arc<Atlas>>>>,
}

impl SearchService {
    /// Service that answers 503 until [`SearchService::set_atlas`] is called.
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn with_atlas(atlas: Atlas) -> Self {
        let s = Self::default();
        s.set_atlas(atlas);
        s
    }

    pub fn set_atlas(&self, atlas: Atlas) {
        *self.atlas.write().expect("lock") = Some(Arc::new(atlas));
    }

    fn current(&self) -> Option<Arc<Atlas>> {
        self.atlas.read().expect("lock").clone()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub vector: Vec<f32>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub majority_n: Option<Vec<usize>>,
}

fn default_k() -> usize {
    7
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MajorityEntry {
    pub n: usize,
    pub predicted_label: u32,
    /// Votes received by the predicted label.
    pub votes: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelCount {
    pub label_id: u32,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SearchResponse {
    pub hits: Vec<SearchHit>,
    pub majority: Vec<MajorityEntry>,
    pub top_labels: Vec<LabelCount>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn unavailable() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "atlas is loading")
}

async fn healthz(State(s): State<SearchService>) -> Response {
    match s.current() {
        None => unavailable(),
        Some(a) => Json(serde_json::json!({
            "status": "ok",
            "atlas_checksum": a.checksum_hex(),
        }))
        .into_response(),
    }
}

/// Answers one search against `atlas`; errors carry their HTTP status.
pub fn search(atlas: &Atlas, req: &SearchRequest) -> Result<SearchResponse, (StatusCode, String)> {
    let status_of = |e: Error| match e {
        Error::KOutOfRange { .. } => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        other => (StatusCode::BAD_REQUEST, other.to_string()),
    };
    if req.vector.iter().any(|v| !v.is_finite()) {
        return Err((StatusCode::BAD_REQUEST, "vector contains non-finite values".into()));
    }
    let majority_n = match &req.majority_n {
        Some(ns) => ns.clone(),
        None => DEFAULT_N_VALUES.iter().copied().filter(|&n| n <= req.k).collect(),
    };
    if let Some(&bad) = majority_n.iter().find(|&&n| n < 1 || n > req.k) {
        return Err((
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("majority_n value {bad} outside 1..={}", req.k),
        ));
    }
    let hits = atlas.knn(&req.vector, req.k).map_err(status_of)?;
    let majority = majority_n
        .iter()
        .map(|&n| {
            let v = majority_vote(&hits, n).map_err(status_of)?;
            Ok(MajorityEntry {
                n,
                predicted_label: v.predicted_label,
                votes: v.votes[&v.predicted_label],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for h in &hits {
        *counts.entry(h.label_id).or_default() += 1;
    }
    let mut top_labels: Vec<LabelCount> = counts
        .into_iter()
        .map(|(label_id, count)| LabelCount { label_id, count })
        .collect();
    top_labels.sort_by(|a, b| b.count.cmp(&a.count).then(a.label_id.cmp(&b.label_id)));
    Ok(SearchResponse {
        hits,
        majority,
        top_labels,
    })
}

async fn search_handler(State(s): State<SearchService>, body: Bytes) -> Response {
    let Some(atlas) = s.current() else {
        return unavailable();
    };
    let req: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("bad JSON: {e}")),
    };
    match tokio::task::spawn_blocking(move || search(&atlas, &req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err((status, msg))) => error(status, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(service: SearchService) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/search", post(search_handler))
        .with_state(service)
}

/// Binds `addr`, loads the atlas in the background and serves until the
/// process is stopped.
pub async fn serve(atlas_path: PathBuf, addr: SocketAddr) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Io(format!("bind {addr}: {e}")))?;
    let service = SearchService::loading();
    let loader = service.clone();
    let path = atlas_path.clone();
    let load = tokio::task::spawn_blocking(move || Atlas::load(&path).map(|a| loader.set_atlas(a)));
    let bound = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    eprintln!("listening on http://{bound} (loading {})", atlas_path.display());
    let app = router(service);
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    match load.await {
        Ok(Ok(())) => eprintln!("atlas loaded"),
        Ok(Err(e)) => return Err(e.into()),
        Err(e) => return Err(CliError::Io(e.to_string())),
    }
    server
        .await
        .map_err(|e| CliError::Io(e.to_string()))?
        .map_err(|e| CliError::Io(e.to_string()))
}
