//! JSON-over-HTTP interface consumed by the labeling console.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/inspections` | multipart frames, or JSON `{"path": ...}` |
//! | GET | `/inspections/{id}` | |
//! | GET | `/queue?status=&page=&page_size=` | urgent first, then oldest |
//! | POST | `/inspections/{id}/label` | `{"raw_label", "operator"}` |
//! | GET | `/inspections/{id}/explanation?class=` | base64 PNG heatmaps and ledgers |
//! | GET | `/models`, `/models/production` | |
//! | POST | `/models/{version}/promote` | `{"approver"}` |
//! | POST | `/pipeline/run` | optional `{"requested_by"}`, answers 202 |
//! | GET | `/pipeline/runs`, `/pipeline/runs/{id}` | |

use std::path::PathBuf;

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sewer_core::dataset::RawLabel;

use crate::inspection::InspectionStatus;
use crate::service::{Service, Submission};
use crate::ServiceError;

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// A service error carried to the client with a status code.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::NotFound(_)
            | ServiceError::UnknownModel(_)
            | ServiceError::UnknownRun(_) => StatusCode::NOT_FOUND,
            ServiceError::IllegalTransition { .. }
            | ServiceError::NotPromotable { .. }
            | ServiceError::PipelineBusy(_) => StatusCode::CONFLICT,
            ServiceError::NoProductionModel => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::InvalidInput(_) => StatusCode::BAD_REQUEST,
            ServiceError::InvalidFrames(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Io(_)
            | ServiceError::Json(_)
            | ServiceError::Dataset(_)
            | ServiceError::Corrupt(_)
            | ServiceError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if code.is_server_error() && code != StatusCode::SERVICE_UNAVAILABLE {
            tracing::error!("request failed: {e}");
        }
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// Extractor rejections are plain text; the console expects every error as
/// `{"error": ...}`.
async fn json_errors(response: Response) -> Response {
    let is_json = response
        .headers()
        .get(header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/json"));
    if !(response.status().is_client_error() || response.status().is_server_error()) || is_json {
        return response;
    }
    let status = response.status();
    let text = match axum::body::to_bytes(response.into_body(), 64 * 1024).await {
        Ok(b) => String::from_utf8_lossy(&b).into_owned(),
        Err(_) => String::new(),
    };
    let text = if text.is_empty() {
        status.canonical_reason().unwrap_or("error").to_string()
    } else {
        text
    };
    ApiError(status, text).into_response()
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(service: Service, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(Service) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(service))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/inspections", post(submit))
        .route("/inspections/{id}", get(inspection))
        .route("/inspections/{id}/label", post(label))
        .route("/inspections/{id}/explanation", get(explanation))
        .route("/queue", get(queue))
        .route("/models", get(models))
        .route("/models/production", get(production))
        .route("/models/{version}/promote", post(promote))
        .route("/pipeline/run", post(start_run))
        .route("/pipeline/runs", get(runs))
        .route("/pipeline/runs/{id}", get(run))
        .layer(middleware::map_response(json_errors))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(service)
}

#[derive(Debug, Deserialize)]
struct PathSubmission {
    path: PathBuf,
}

async fn submit(
    State(service): State<Service>,
    request: Request,
) -> Result<impl IntoResponse, ApiError> {
    let content_type = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let submission = if content_type.starts_with("multipart/form-data") {
        let mut multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| bad_request(e.body_text()))?;
        let mut files = Vec::new();
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| bad_request(e.body_text()))?
        {
            let Some(name) = field.file_name().map(str::to_string) else {
                continue;
            };
            let bytes = field
                .bytes()
                .await
                .map_err(|e| bad_request(e.body_text()))?;
            files.push((name, bytes.to_vec()));
        }
        Submission::Upload(files)
    } else {
        let Json(body) = Json::<PathSubmission>::from_request(request, &())
            .await
            .map_err(|e| bad_request(e.body_text()))?;
        Submission::Directory(body.path)
    };
    let record = blocking(service, move |s| s.submit(submission)).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn inspection(
    State(service): State<Service>,
    Path(id): Path<String>,
) -> ApiResult<crate::InspectionRecord> {
    Ok(Json(service.inspection(&id)?))
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub raw_label: String,
    pub operator: String,
}

async fn label(
    State(service): State<Service>,
    Path(id): Path<String>,
    Json(body): Json<LabelRequest>,
) -> ApiResult<crate::InspectionRecord> {
    let raw: RawLabel = body
        .raw_label
        .parse()
        .map_err(|e| bad_request(format!("{e}")))?;
    Ok(Json(
        blocking(service, move |s| s.label(&id, raw, &body.operator)).await?,
    ))
}

#[derive(Debug, Deserialize)]
struct ClassQuery {
    class: Option<usize>,
}

async fn explanation(
    State(service): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<ClassQuery>,
) -> ApiResult<crate::Explanation> {
    Ok(Json(
        blocking(service, move |s| s.explain(&id, q.class)).await?,
    ))
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    status: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn queue(
    State(service): State<Service>,
    Query(q): Query<QueueQuery>,
) -> ApiResult<crate::QueuePage> {
    let status = match q.status.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => Some(
            s.parse::<InspectionStatus>()
                .map_err(|e| bad_request(e.to_string()))?,
        ),
        None => None,
    };
    Ok(Json(service.queue(
        status,
        q.page.unwrap_or(1),
        q.page_size,
    )?))
}

async fn models(State(service): State<Service>) -> Json<Vec<crate::ModelRegistryEntry>> {
    Json(service.models())
}

async fn production(State(service): State<Service>) -> ApiResult<crate::ModelRegistryEntry> {
    service
        .production()
        .map(Json)
        .ok_or_else(|| ServiceError::NoProductionModel.into())
}

#[derive(Debug, Deserialize)]
pub struct PromoteRequest {
    pub approver: String,
}

async fn promote(
    State(service): State<Service>,
    Path(version): Path<u64>,
    Json(body): Json<PromoteRequest>,
) -> ApiResult<crate::ModelRegistryEntry> {
    if body.approver.trim().is_empty() {
        return Err(bad_request("approver is required"));
    }
    Ok(Json(
        blocking(service, move |s| s.promote(version, &body.approver)).await?,
    ))
}

#[derive(Debug, Default, Deserialize)]
pub struct RunRequest {
    pub requested_by: Option<String>,
}

async fn start_run(
    State(service): State<Service>,
    body: Option<Json<RunRequest>>,
) -> Result<impl IntoResponse, ApiError> {
    let requested_by = body.and_then(|Json(b)| b.requested_by);
    let run = blocking(service, move |s| s.start_run(requested_by)).await?;
    Ok((StatusCode::ACCEPTED, Json(run)))
}

async fn runs(State(service): State<Service>) -> Json<Vec<crate::PipelineRun>> {
    Json(service.runs())
}

async fn run(State(service): State<Service>, Path(id): Path<u64>) -> ApiResult<crate::PipelineRun> {
    Ok(Json(service.run(id)?))
}
