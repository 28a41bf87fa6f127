//! REST surface over [`AuthService`](ccpauth_core::AuthService).
//!
//! Responses never carry key digits, labeling statuses, or anything that marks
//! the real image among the four shown at a level.

use std::collections::BTreeMap;
use std::str::FromStr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ccpauth_core::auth::{Challenge, LoginError, RegistrationError, SessionError};
use ccpauth_core::vault::{VaultError, MAX_IMAGE_BYTES};
use ccpauth_core::{ClickEvent, ClickOutcome, ContentType, ImageId, LabelingStatus, LoginOutcome, SessionId, UserId};
use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::AppState;
use crate::metrics::export_timings_csv;

/// Base64 inflates uploads by 4/3; leave room for the JSON around it.
const BODY_LIMIT: usize = MAX_IMAGE_BYTES / 3 * 4 + 64 * 1024;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/users", post(create_user))
        .route("/api/users/{user_id}/images", post(attach_image))
        .route("/api/sessions", post(start_session))
        .route("/api/sessions/{session_id}", get(current_challenge))
        .route("/api/sessions/{session_id}/images/{image_id}", get(session_image))
        .route("/api/sessions/{session_id}/clicks", post(submit_click))
        .route("/api/sessions/{session_id}/finalize", post(finalize))
        .route("/api/metrics/timings.csv", get(timings_csv))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<i64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            retry_after: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(json!({ "error": self.message }))).into_response();
        if let Some(secs) = self.retry_after {
            if let Ok(v) = HeaderValue::from_str(&secs.max(1).to_string()) {
                resp.headers_mut().insert(header::RETRY_AFTER, v);
            }
        }
        resp
    }
}

impl From<RegistrationError> for ApiError {
    fn from(e: RegistrationError) -> Self {
        let status = match &e {
            RegistrationError::InvalidUsername
            | RegistrationError::InvalidMobile
            | RegistrationError::InvalidLevel(_)
            | RegistrationError::Vault(VaultError::Empty | VaultError::TooLarge(_) | VaultError::UnsupportedType(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            RegistrationError::DuplicateUsername | RegistrationError::LevelAlreadyAttached(_) => StatusCode::CONFLICT,
            RegistrationError::UnknownUser => StatusCode::NOT_FOUND,
            RegistrationError::Vault(inner) => {
                tracing::error!(error = %inner, "vault write failed");
                return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage failure");
            }
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<LoginError> for ApiError {
    fn from(e: LoginError) -> Self {
        match e {
            LoginError::Unavailable => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "authentication unavailable"),
            LoginError::Locked { retry_after } => ApiError {
                status: StatusCode::LOCKED,
                message: "account locked".into(),
                retry_after: Some(retry_after.num_seconds()),
            },
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::NotFound | SessionError::ImageNotFound => StatusCode::NOT_FOUND,
            SessionError::Protocol => StatusCode::BAD_REQUEST,
            SessionError::InvalidClick(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::WrongState(_)
            | SessionError::ClicksComplete
            | SessionError::Incomplete(_)
            | SessionError::Expired => StatusCode::CONFLICT,
        };
        ApiError::new(status, e.to_string())
    }
}

/// JSON body extractor that reports every parse failure as 400.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(JsonRejection::BytesRejection(e)) => Err(ApiError::new(e.status(), e.body_text())),
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, e.body_text())),
        }
    }
}

#[derive(Deserialize)]
struct NewUser {
    username: String,
    mobile: String,
    #[serde(default)]
    details: BTreeMap<String, String>,
}

async fn create_user(State(app): State<AppState>, ApiJson(body): ApiJson<NewUser>) -> Result<Response, ApiError> {
    let user_id = app.auth.register_user(&body.username, &body.mobile, body.details, Utc::now())?;
    Ok((StatusCode::CREATED, Json(json!({ "user_id": user_id }))).into_response())
}

#[derive(Deserialize)]
struct NewImage {
    level: u8,
    status: String,
    content_type: String,
    image_base64: String,
}

#[derive(Serialize)]
struct AttachedImage {
    image_id: ImageId,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    registration_complete: bool,
}

async fn attach_image(
    State(app): State<AppState>,
    Path(user_id): Path<String>,
    ApiJson(body): ApiJson<NewImage>,
) -> Result<Response, ApiError> {
    let user_id = UserId::from(user_id);
    if app.auth.user(&user_id).is_none() {
        return Err(RegistrationError::UnknownUser.into());
    }
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    let status = LabelingStatus::from_str(&body.status).map_err(|e| unprocessable(e.to_string()))?;
    let content_type = ContentType::from_str(&body.content_type).map_err(|e| unprocessable(e.to_string()))?;
    let bytes = B64
        .decode(body.image_base64.trim())
        .map_err(|e| unprocessable(format!("image_base64: {e}")))?;
    let auth = app.auth.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        auth.attach_image_password(&user_id, body.level, &bytes, content_type, status, Utc::now())
    })
    .await
    .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error"))??;
    let body = AttachedImage {
        image_id: outcome.image_id,
        registration_complete: outcome.registration_complete,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
}

#[derive(Serialize)]
struct StartedSession<'a> {
    session_id: &'a SessionId,
    level: u8,
    images: &'a [ImageId],
}

async fn start_session(
    State(app): State<AppState>,
    ApiJson(body): ApiJson<LoginRequest>,
) -> Result<Response, ApiError> {
    // Key delivery may block on the network.
    let started = tokio::task::spawn_blocking(move || {
        app.rng.with(|rng| app.auth.start_login(&body.username, Utc::now(), rng))
    })
    .await
    .map_err(|_| ApiError::from(LoginError::Unavailable))??;
    let body = StartedSession {
        session_id: &started.session_id,
        level: started.challenge.level,
        images: &started.challenge.images,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

/// Wire shape of a click outcome; identical for right and wrong clicks.
#[derive(Serialize)]
#[serde(untagged)]
enum NextStep {
    Level(Challenge),
    Done { finalize_ready: bool },
}

impl From<ClickOutcome> for NextStep {
    fn from(o: ClickOutcome) -> Self {
        match o {
            ClickOutcome::Next(c) => NextStep::Level(c),
            ClickOutcome::FinalizeReady => NextStep::Done { finalize_ready: true },
        }
    }
}

async fn current_challenge(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
) -> Result<Json<NextStep>, ApiError> {
    let outcome = app.auth.current_challenge(&SessionId::from(session_id), Utc::now())?;
    Ok(Json(outcome.into()))
}

async fn session_image(
    State(app): State<AppState>,
    Path((session_id, image_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let (bytes, content_type) =
        app.auth
            .session_image(&SessionId::from(session_id), &ImageId::from(image_id), Utc::now())?;
    Ok((
        [
            (header::CONTENT_TYPE, content_type.as_str()),
            (header::CACHE_CONTROL, "no-store"),
        ],
        bytes,
    )
        .into_response())
}

async fn submit_click(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    ApiJson(click): ApiJson<ClickEvent>,
) -> Result<Json<NextStep>, ApiError> {
    let outcome = app.auth.submit_click(&SessionId::from(session_id), &click, Utc::now())?;
    Ok(Json(outcome.into()))
}

// Any request body is read and ignored so the connection stays reusable.
async fn finalize(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    _body: axum::body::Bytes,
) -> Result<Response, ApiError> {
    let result = match app.auth.finalize(&SessionId::from(session_id), Utc::now())? {
        LoginOutcome::Succeeded => "success",
        LoginOutcome::Failed => "failure",
    };
    Ok(Json(json!({ "result": result })).into_response())
}

async fn timings_csv(State(app): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
        export_timings_csv(&app.auth.timings()),
    )
        .into_response()
}
