//! HTTP endpoints over a finished run directory.
//!
//! | method | path             | body                |
//! |--------|------------------|---------------------|
//! | GET    | `/contests`      |                     |
//! | GET    | `/contests/{id}` |                     |
//! | GET    | `/model`         |                     |
//! | POST   | `/simulate`      | `SimulateRequest`   |
//! | POST   | `/designs`       | `EnumerateRequest`  |
//!
//! Errors come back as `{"error": "..."}` with 400 for malformed input, 404
//! for unknown contests and 422 for requests over the compute budget.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use contest_ite::pipeline::{to_response_json, Artifacts, EnumerateRequest, RequestError, RequestErrorKind};
use contest_ite::types::ContestId;

type Shared = Arc<Artifacts>;

pub fn app(state: Shared) -> Router {
    Router::new()
        .route("/contests", get(list_contests))
        .route("/contests/{id}", get(get_contest))
        .route("/model", get(model_card))
        .route("/simulate", post(simulate))
        .route("/designs", post(designs))
        .with_state(state)
}

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, message: &str) -> Response {
    let body = serde_json::json!({ "error": message });
    json(status, format!("{body}\n"))
}

fn status_of(kind: RequestErrorKind) -> StatusCode {
    match kind {
        RequestErrorKind::BadRequest => StatusCode::BAD_REQUEST,
        RequestErrorKind::NotFound => StatusCode::NOT_FOUND,
        RequestErrorKind::OverBudget => StatusCode::UNPROCESSABLE_ENTITY,
        RequestErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn respond(r: Result<String, RequestError>) -> Response {
    match r {
        Ok(body) => json(StatusCode::OK, body),
        Err(e) => error(status_of(e.kind), &e.message),
    }
}

fn ok<T: serde::Serialize>(value: &T) -> Response {
    respond(to_response_json(value).map_err(RequestError::from))
}

async fn list_contests(State(art): State<Shared>) -> Response {
    ok(&art.contests)
}

async fn get_contest(State(art): State<Shared>, Path(id): Path<String>) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, &format!("contest id {id:?} is not a number"));
    };
    match art.contest(ContestId(id)) {
        Some(c) => ok(c),
        None => error(StatusCode::NOT_FOUND, &format!("unknown contest {id}")),
    }
}

async fn model_card(State(art): State<Shared>) -> Response {
    ok(&art.card)
}

async fn blocking(f: impl FnOnce() -> Result<String, RequestError> + Send + 'static) -> Response {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => respond(r),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, &format!("simulation task failed: {e}")),
    }
}

async fn simulate(State(art): State<Shared>, body: Bytes) -> Response {
    blocking(move || crate::simulate_body(&art, &body)).await
}

async fn designs(State(art): State<Shared>, body: Bytes) -> Response {
    blocking(move || {
        let req: EnumerateRequest = serde_json::from_slice(&body).map_err(|e| RequestError {
            kind: RequestErrorKind::BadRequest,
            message: format!("malformed designs request: {e}"),
        })?;
        to_response_json(&art.enumerate(&req)?).map_err(RequestError::from)
    })
    .await
}

/// Binds `address` and serves until interrupted.
pub async fn serve(state: Shared, address: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(address).await?;
    tracing::info!(address = %listener.local_addr()?, "serving");
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
