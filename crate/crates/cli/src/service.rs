//! HTTP/JSON service over an immutable model and decision-year dataset.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cgct::allocation::{optimize_allocation, AllocationProblem, Budget, ModelResponses, SolverOptions};
use cgct::data::{CountryRecord, Dataset};
use cgct::pipeline::{CgCtModel, CurvePoint, MODEL_FORMAT, MODEL_VERSION};
use cgct::quadrature::lattice;
use cgct::CgctError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::args::{ServeArgs, DEFAULT_BODY_LIMIT, DEFAULT_MAX_POINTS};
use crate::commands::load_imputed;

/// Points of the curve returned alongside a what-if answer.
pub const CONTEXT_POINTS: usize = 65;

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_points: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub body_limit: usize,
    pub seed: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_points: DEFAULT_MAX_POINTS,
            max_iterations: cgct::allocation::DEFAULT_MAX_ITERATIONS,
            tolerance: SolverOptions::default().tolerance,
            body_limit: DEFAULT_BODY_LIMIT,
            seed: 0,
        }
    }
}

pub struct AppState {
    pub model: Option<CgCtModel>,
    /// Why the model is missing, reported with 503.
    pub model_error: String,
    pub data: Dataset,
    /// Source of incidence rates for allocation.
    pub previous: Option<Dataset>,
    pub limits: Limits,
}

impl AppState {
    pub fn new(model: Option<CgCtModel>, data: Dataset, previous: Option<Dataset>, limits: Limits) -> Result<Self> {
        if limits.max_points < 2 || limits.max_iterations == 0 || limits.body_limit == 0 || !(limits.tolerance > 0.0) {
            anyhow::bail!(CgctError::InvalidArgument("service limits must be positive".into()));
        }
        Ok(Self { model, model_error: "no model loaded".into(), data, previous, limits })
    }

    fn model(&self) -> Result<&CgCtModel, ApiError> {
        self.model.as_ref().ok_or_else(|| ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "model_not_loaded",
            stage: "persistence",
            message: self.model_error.clone(),
        })
    }

    fn country(&self, id: &str) -> Result<&CountryRecord, ApiError> {
        self.data.get(id).ok_or_else(|| ApiError::from_core(CgctError::UnknownCountry(id.to_string()), "data"))
    }
}

/// Error body `{code, stage, message}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub stage: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", stage: "request", message: message.into() }
    }

    fn out_of_range(message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, code: "out_of_range", stage: "request", message: message.into() }
    }

    fn from_core(e: CgctError, fallback_stage: &'static str) -> Self {
        let stage = e.stage().map_or(fallback_stage, |s| s.as_str());
        let root = e.root();
        let (status, code) = match root {
            CgctError::UnknownCountry(_) => (StatusCode::NOT_FOUND, "unknown_country"),
            CgctError::OutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range"),
            CgctError::InvalidArgument(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument"),
            CgctError::Infeasible(_) => (StatusCode::UNPROCESSABLE_ENTITY, "infeasible"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self { status, code, stage, message: root.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "stage": self.stage, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            return Self {
                status: StatusCode::PAYLOAD_TOO_LARGE,
                code: "payload_too_large",
                stage: "request",
                message: r.body_text(),
            };
        }
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Router with every endpoint, the body limit and optional CORS.
pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Result<Router> {
    let limit = state.limits.body_limit;
    let mut app = Router::new()
        .route("/api/countries", get(countries))
        .route("/api/curve/{id}", get(curve))
        .route("/api/whatif", post(whatif))
        .route("/api/allocate", post(allocate))
        .route("/api/model", get(model_info))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    if !cors_origins.is_empty() {
        let origin = if cors_origins.iter().any(|o| o == "*") {
            AllowOrigin::from(Any)
        } else {
            let list = cors_origins
                .iter()
                .map(|o| HeaderValue::from_str(o).with_context(|| format!("invalid CORS origin '{o}'")))
                .collect::<Result<Vec<_>>>()?;
            AllowOrigin::list(list)
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", stage: "request", message: "no such endpoint".into() }
}

async fn method_not_allowed() -> ApiError {
    ApiError {
        status: StatusCode::METHOD_NOT_ALLOWED,
        code: "method_not_allowed",
        stage: "request",
        message: "method not allowed for this endpoint".into(),
    }
}

fn observed_point(m: &CgCtModel, r: &CountryRecord) -> Result<(Vec<f64>, f64), ApiError> {
    let x = r.covariate_values().map_err(|e| ApiError::from_core(e, "data"))?;
    let y = m.predict_usd(r.treatment_a, &x).map_err(|e| ApiError::from_core(e, "prediction"))?;
    Ok((x, y))
}

fn curve_points(m: &CgCtModel, r: &CountryRecord, x: &[f64], grid: &[f64]) -> Result<Vec<CurvePoint>, ApiError> {
    Ok(m.predict_curve(&r.country_id, x, grid)
        .map_err(|e| ApiError::from_core(e, "prediction"))?
        .points)
}

async fn countries(State(s): State<Arc<AppState>>) -> ApiResult {
    let rows = s
        .data
        .records
        .iter()
        .map(|r| {
            let prediction = match &s.model {
                Some(m) => Some(observed_point(m, r)?.1),
                None => None,
            };
            Ok(json!({
                "id": r.country_id,
                "year": r.year,
                "observed_aid": r.treatment_a,
                "observed_outcome": r.outcome_y,
                "observed_prediction": prediction,
                "infection_rate": r.infection_rate_r,
                "population": r.population_p,
            }))
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(json!({
        "year": s.data.years().first(),
        "bound": s.model.as_ref().map(CgCtModel::treatment_bound),
        "model_loaded": s.model.is_some(),
        "countries": rows,
    })))
}

#[derive(Debug, Deserialize)]
pub struct CurveQuery {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub points: Option<usize>,
}

async fn curve(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<CurveQuery>, QueryRejection>,
) -> ApiResult {
    let Query(q) = q?;
    let m = s.model()?;
    let r = s.country(&id)?;
    let bound = m.treatment_bound();
    let points = q.points.unwrap_or(CONTEXT_POINTS);
    if points < 2 || points > s.limits.max_points {
        return Err(ApiError::bad_request(format!("points must be in [2, {}], got {points}", s.limits.max_points)));
    }
    let lo = q.min.unwrap_or(0.0);
    let hi = q.max.unwrap_or(bound);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(ApiError::bad_request("min and max must be finite numbers"));
    }
    if lo < 0.0 || hi > bound {
        return Err(ApiError::out_of_range(format!("grid [{lo}, {hi}] outside [0, {bound}] USD millions")));
    }
    if lo >= hi {
        return Err(ApiError::bad_request(format!("min {lo} must be below max {hi}")));
    }
    let (x, observed_prediction) = observed_point(m, r)?;
    let pts = curve_points(m, r, &x, &lattice(lo, hi, points))?;
    Ok(Json(json!({
        "country": r.country_id,
        "year": r.year,
        "bound": bound,
        "observed_aid": r.treatment_a,
        "observed_prediction": observed_prediction,
        "points": pts,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub country: String,
    pub aid: f64,
}

async fn whatif(State(s): State<Arc<AppState>>, body: Result<Json<WhatIfRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let m = s.model()?;
    let r = s.country(&req.country)?;
    let bound = m.treatment_bound();
    if !req.aid.is_finite() || !(0.0..=bound).contains(&req.aid) {
        return Err(ApiError::out_of_range(format!("aid {} outside [0, {bound}] USD millions", req.aid)));
    }
    let (x, observed_prediction) = observed_point(m, r)?;
    let prediction = m.predict_usd(req.aid, &x).map_err(|e| ApiError::from_core(e, "prediction"))?;
    let context = curve_points(m, r, &x, &lattice(0.0, bound, CONTEXT_POINTS))?;
    Ok(Json(json!({
        "country": r.country_id,
        "year": r.year,
        "aid": req.aid,
        "prediction": prediction,
        "observed_aid": r.treatment_a,
        "observed_prediction": observed_prediction,
        "delta": prediction - observed_prediction,
        "bound": bound,
        "curve": context,
    })))
}

/// `"observed-total"` or an amount in USD millions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetInput {
    Amount(f64),
    Named(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateRequest {
    pub budget: Option<BudgetInput>,
    pub bound: Option<f64>,
    #[serde(default)]
    pub pins: BTreeMap<String, f64>,
}

async fn allocate(State(s): State<Arc<AppState>>, body: Result<Json<AllocateRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    s.model()?;
    let budget = match &req.budget {
        None => Budget::ObservedTotal,
        Some(BudgetInput::Named(n)) if n == "observed-total" || n == "observed_total" => Budget::ObservedTotal,
        Some(BudgetInput::Named(n)) => {
            return Err(ApiError::bad_request(format!("budget must be a number or \"observed-total\", got \"{n}\"")))
        }
        Some(BudgetInput::Amount(b)) => Budget::Amount(*b),
    };
    let state = s.clone();
    tokio::task::spawn_blocking(move || solve(&state, budget, req.bound, req.pins))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            stage: "allocation",
            message: e.to_string(),
        })?
}

fn solve(s: &AppState, budget: Budget, bound: Option<f64>, pins: BTreeMap<String, f64>) -> ApiResult {
    let m = s.model()?;
    let max_bound = m.treatment_bound();
    let bound = bound.unwrap_or(max_bound);
    if !bound.is_finite() || bound <= 0.0 || bound > max_bound {
        return Err(ApiError::out_of_range(format!("bound {bound} outside (0, {max_bound}] USD millions")));
    }
    if let Budget::Amount(b) = budget {
        if !b.is_finite() || b <= 0.0 {
            return Err(ApiError::out_of_range(format!("budget {b} must be a positive number of USD millions")));
        }
    }
    if let Some(id) = pins.keys().find(|id| s.data.get(id).is_none()) {
        return Err(ApiError::from_core(CgctError::UnknownCountry(id.clone()), "allocation"));
    }
    if let Some((id, v)) = pins.iter().find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > bound) {
        return Err(ApiError::out_of_range(format!("pin {v} for {id} outside [0, {bound}] USD millions")));
    }
    let problem = AllocationProblem::from_dataset(&s.data, s.previous.as_ref(), budget, bound, pins.clone())
        .map_err(|e| ApiError::from_core(e, "allocation"))?;
    let resp = ModelResponses::new(m, &s.data).map_err(|e| ApiError::from_core(e, "allocation"))?;
    let opts = SolverOptions { max_iterations: s.limits.max_iterations, tolerance: s.limits.tolerance };
    let plan =
        optimize_allocation(&resp, &problem, s.limits.seed, &opts).map_err(|e| ApiError::from_core(e, "allocation"))?;
    let rows: Vec<Value> = (0..plan.countries.len())
        .map(|i| {
            json!({
                "country": plan.countries[i],
                "current_aid": plan.current[i],
                "suggested_aid": plan.allocation[i],
                "delta": plan.allocation[i] - plan.current[i],
                "pinned": pins.contains_key(&plan.countries[i]),
            })
        })
        .collect();
    let pct = if plan.current_objective != 0.0 { 100.0 * plan.reduction() / plan.current_objective } else { 0.0 };
    Ok(Json(json!({
        "year": s.data.years().first(),
        "budget": plan.budget,
        "bound": plan.bound,
        "allocations": rows,
        "current_infections": plan.current_objective,
        "suggested_infections": plan.objective,
        "reduction": plan.reduction(),
        "reduction_percent": pct,
        "warm_start_infections": plan.warm_start_objective,
        "budget_residual": plan.budget_residual,
        "box_violation": plan.box_violation,
        "iterations": plan.iterations,
        "max_iterations": s.limits.max_iterations,
    })))
}

async fn model_info(State(s): State<Arc<AppState>>) -> ApiResult {
    let m = s.model()?;
    Ok(Json(json!({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "label": m.config.flags.label(),
        "inference": m.inference.kind(),
        "autoencoder": m.encoder.is_some(),
        "bound": m.treatment_bound(),
        "config": m.config,
        "metadata": m.metadata,
        "serving_year": s.data.years().first(),
        "rates_year": s.previous.as_ref().and_then(|p| p.years().first().copied()),
    })))
}

/// Loads state from the command-line settings and serves until Ctrl-C.
pub fn serve(a: &ServeArgs) -> Result<()> {
    let panel = load_imputed(&a.data)?;
    let data = panel.for_year(a.year).map_err(|e| e.at(cgct::Stage::Data))?;
    let previous = match a.previous_year {
        Some(y) => Some(panel.for_year(y).map_err(|e| e.at(cgct::Stage::Data))?),
        None => panel.for_year(a.year - 1).ok(),
    };
    let (model, model_error) = match cgct::pipeline::load_model(&a.model) {
        Ok(m) => (Some(m), String::new()),
        Err(e) => {
            log::warn!("serving without a model: {e}");
            (None, format!("model {} not loaded: {}", a.model.display(), e.root()))
        }
    };
    let limits = Limits {
        max_points: a.max_points,
        max_iterations: a.max_iterations,
        tolerance: SolverOptions::default().tolerance,
        body_limit: a.body_limit,
        seed: a.seed,
    };
    let mut state = AppState::new(model, data, previous, limits)?;
    if state.model.is_none() {
        state.model_error = model_error;
    }
    let app = router(Arc::new(state), &a.cors_origin)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
