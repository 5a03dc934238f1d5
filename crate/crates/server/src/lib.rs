//! HTTP face of the control plane.
//!
//! Every route is a thin adapter over [`toolplane_core::ControlPlane`]:
//!
//! | Route                     | Handler                |
//! |---------------------------|------------------------|
//! | `POST /v1/invoke`         | the invoke pipeline    |
//! | `POST /v1/register/tool`  | tool registration      |
//! | `POST /v1/register/agent` | agent registration     |
//! | `POST /v1/register/rule`  | rule registration      |
//! | `POST /v1/feedback`       | feedback integration   |
//! | `GET  /v1/tools`          | tool listing (`?tag=`) |
//! | `GET  /v1/usage`          | usage aggregation      |
//! | `GET  /v1/manifest`       | the constant manifest  |
//!
//! Domain failures ride inside transport-success responses on `/v1/invoke`
//! (agents branch on typed codes, not HTTP statuses). Registration and
//! feedback endpoints use HTTP statuses conventionally: 400 for rejected
//! payloads, 404 for unknown references, 409 for duplicates, 500 for
//! server-side faults — always with a `{code, message}` JSON body.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use serde::Deserialize;
use toolplane_core::payload::Payload;
use toolplane_core::service::{manifest_json, ControlPlane, GatewayError, InvocationResponse};
use toolplane_core::tracker::{Outcome, RecordFilter};

/// Build the full API router over a shared control plane.
pub fn router(plane: Arc<ControlPlane>) -> axum::Router {
    axum::Router::new()
        .route("/v1/invoke", post(invoke))
        .route("/v1/register/tool", post(register_tool))
        .route("/v1/register/agent", post(register_agent))
        .route("/v1/register/rule", post(register_rule))
        .route("/v1/feedback", post(feedback))
        .route("/v1/tools", get(tools))
        .route("/v1/usage", get(usage))
        .route("/v1/manifest", get(manifest))
        .with_state(plane)
}

/// Bind to `addr` (use port 0 for an ephemeral port) and return the bound
/// address plus the serving future. Callers that just want to run forever
/// can use [`serve`].
pub async fn bind(
    plane: Arc<ControlPlane>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let app = router(plane);
    Ok((bound, async move { axum::serve(listener, app).await }))
}

/// Bind, announce the bound address on stdout, and serve until the process
/// is signaled.
pub async fn serve(plane: Arc<ControlPlane>, addr: SocketAddr) -> std::io::Result<()> {
    let (bound, server) = bind(plane, addr).await?;
    println!("listening on http://{bound}");
    server.await
}

async fn invoke(
    State(plane): State<Arc<ControlPlane>>,
    Json(raw): Json<Payload>,
) -> Json<InvocationResponse> {
    Json(plane.handle_invoke(raw).await)
}

/// Wraps a domain error with the HTTP status its code conventionally maps
/// to. The machine-readable part is the body; the status is a courtesy.
struct ApiError(GatewayError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.code.as_str() {
            "duplicate_id" => StatusCode::CONFLICT,
            "not_found" | "unknown_request" => StatusCode::NOT_FOUND,
            "internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(self.0)).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(err: GatewayError) -> Self {
        ApiError(err)
    }
}

async fn register_tool(
    State(plane): State<Arc<ControlPlane>>,
    Json(raw): Json<Payload>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(plane.handle_register_tool(raw)?))
}

async fn register_agent(
    State(plane): State<Arc<ControlPlane>>,
    Json(raw): Json<Payload>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(plane.handle_register_agent(raw)?))
}

async fn register_rule(
    State(plane): State<Arc<ControlPlane>>,
    Json(raw): Json<Payload>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(plane.handle_register_rule(raw)?))
}

async fn feedback(
    State(plane): State<Arc<ControlPlane>>,
    Json(raw): Json<Payload>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(plane.handle_feedback(raw)?))
}

#[derive(Debug, Default, Deserialize)]
struct ToolsParams {
    tag: Option<String>,
}

async fn tools(
    State(plane): State<Arc<ControlPlane>>,
    Query(params): Query<ToolsParams>,
) -> impl IntoResponse {
    Json(plane.tools(params.tag.as_deref()))
}

#[derive(Debug, Default, Deserialize)]
struct UsageParams {
    agent_id: Option<String>,
    tool_id: Option<String>,
    outcome: Option<String>,
    seq_min: Option<u64>,
    seq_max: Option<u64>,
}

impl UsageParams {
    fn into_filter(self) -> Result<RecordFilter, ApiError> {
        let outcome = match self.outcome.as_deref() {
            None => None,
            Some(text) => Some(text.parse::<Outcome>().map_err(|_| {
                ApiError(GatewayError {
                    code: "invalid_request".to_string(),
                    message: format!("unknown outcome {text:?}"),
                })
            })?),
        };
        let seq_range = match (self.seq_min, self.seq_max) {
            (None, None) => None,
            (min, max) => Some((min.unwrap_or(1), max.unwrap_or(u64::MAX))),
        };
        Ok(RecordFilter {
            agent_id: self.agent_id,
            tool_id: self.tool_id,
            outcome,
            seq_range,
        })
    }
}

async fn usage(
    State(plane): State<Arc<ControlPlane>>,
    Query(params): Query<UsageParams>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(plane.usage(&params.into_filter()?)))
}

/// Serves the pre-serialized manifest so responses are byte-identical no
/// matter what the registry currently holds.
async fn manifest() -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "application/json")],
        manifest_json(),
    )
}
