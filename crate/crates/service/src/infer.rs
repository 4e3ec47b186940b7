use std::collections::BTreeMap;
use std::time::Instant;

use axum::extract::{Multipart, State};
use axum::http::StatusCode;
use axum::Json;
use base64::Engine;
use ldla_core::atlas::{percent_to_normalized, AgingScore, ZoneRegistry};
use ldla_core::inference::{age_face, refine_face, InferenceParams, ZoneTarget};
use ldla_core::pixels::PixelGrid;
use ldla_core::LdlaError;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, FieldError};
use crate::{AppState, MAX_IMAGE_BYTES};

/// The JSON part of a `/infer` upload. Targets map zone ids to integer
/// percents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub targets: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub params: ParamsOverride,
    pub ethnicity: String,
    #[serde(default)]
    pub refine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    pub gamma_n: Option<f64>,
    pub gamma_inf: Option<usize>,
    pub gamma_g: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedScore {
    pub percent: u32,
    pub normalized: f64,
    pub raw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub aging_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    /// Base64 PNG.
    pub image_png: String,
    pub width: usize,
    pub height: usize,
    pub applied_scores: BTreeMap<String, AppliedScore>,
    pub params: InferenceParams,
    pub seed: u64,
    pub refined: bool,
    pub timing: Timing,
}

struct Validated {
    targets: Vec<ZoneTarget>,
    applied: BTreeMap<String, AppliedScore>,
    params: InferenceParams,
}

fn validate(req: &InferRequest, registry: &ZoneRegistry) -> Result<Validated, ApiError> {
    let mut fields = Vec::new();
    let mut unknown_zone = false;
    let mut targets = Vec::new();
    let mut applied = BTreeMap::new();
    for (zone_id, value) in &req.targets {
        let field = format!("targets.{zone_id}");
        let Some(zone) = registry.get(zone_id) else {
            unknown_zone = true;
            fields.push(FieldError::new(field, format!("unknown zone_id `{zone_id}`")));
            continue;
        };
        let percent = value.as_u64().and_then(|p| u32::try_from(p).ok());
        match percent.map(|p| (p, percent_to_normalized(p))) {
            Some((p, Ok(normalized))) => {
                let score = AgingScore::from_normalized(normalized, zone.scale_max)
                    .expect("normalized percent is in range");
                targets.push(ZoneTarget::new(zone_id.clone(), normalized));
                applied.insert(
                    zone_id.clone(),
                    AppliedScore {
                        percent: p,
                        normalized,
                        raw: score.raw,
                    },
                );
            }
            _ => fields.push(FieldError::new(
                field,
                format!("percent must be an integer in [0, 100], got {value}"),
            )),
        }
    }

    let o = req.params;
    let base = InferenceParams::default();
    let checks: [(&str, Option<InferenceParams>); 3] = [
        ("gamma_n", o.gamma_n.map(|v| InferenceParams { gamma_n: v, ..base })),
        ("gamma_inf", o.gamma_inf.map(|v| InferenceParams { gamma_inf: v, ..base })),
        ("gamma_g", o.gamma_g.map(|v| InferenceParams { gamma_g: v, ..base })),
    ];
    for (name, p) in checks {
        if let Some(Err(e)) = p.map(|p| p.validate()) {
            fields.push(FieldError::new(format!("params.{name}"), e.to_string()));
        }
    }

    if !fields.is_empty() {
        return Err(ApiError::Invalid {
            fields,
            valid_zone_ids: unknown_zone
                .then(|| registry.ids().into_iter().map(String::from).collect()),
        });
    }
    let params = InferenceParams {
        gamma_n: o.gamma_n.unwrap_or(base.gamma_n),
        gamma_inf: o.gamma_inf.unwrap_or(base.gamma_inf),
        gamma_g: o.gamma_g.unwrap_or(base.gamma_g),
        seed: o.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0),
    };
    Ok(Validated {
        targets,
        applied,
        params,
    })
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::TooLarge(format!("request body exceeds the {MAX_IMAGE_BYTES}-byte image limit"))
    } else {
        ApiError::field("multipart", e.body_text())
    }
}

async fn read_parts(mut multipart: Multipart) -> Result<(Vec<u8>, InferRequest), ApiError> {
    let (mut image, mut request) = (None, None);
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        match field.name() {
            Some("image") => {
                let bytes = field.bytes().await.map_err(multipart_error)?;
                if bytes.len() > MAX_IMAGE_BYTES {
                    return Err(ApiError::TooLarge(format!(
                        "image is {} bytes, limit is {MAX_IMAGE_BYTES}",
                        bytes.len()
                    )));
                }
                image = Some(bytes.to_vec());
            }
            Some("request") => {
                let text = field.text().await.map_err(multipart_error)?;
                let parsed = serde_json::from_str::<InferRequest>(&text)
                    .map_err(|e| ApiError::field("request", e.to_string()))?;
                request = Some(parsed);
            }
            other => {
                return Err(ApiError::field(
                    other.unwrap_or("multipart"),
                    "unexpected part; expected `image` and `request`",
                ))
            }
        }
    }
    match (image, request) {
        (Some(i), Some(r)) => Ok((i, r)),
        (None, _) => Err(ApiError::field("image", "missing PNG part `image`")),
        (_, None) => Err(ApiError::field("request", "missing JSON part `request`")),
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub(crate) async fn infer(
    State(state): State<AppState>,
    multipart: Multipart,
) -> Result<Json<InferResponse>, ApiError> {
    let start = Instant::now();
    let (png, request) = read_parts(multipart).await?;
    let loaded = state
        .loaded()
        .ok_or_else(|| ApiError::Unavailable("models are still loading".into()))?;
    let v = validate(&request, state.registry())?;

    let _permit = state
        .inner
        .workers
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let worker_state = state.clone();
    let strength = state.inner.refiner_strength;
    let params = v.params;
    let job = tokio::task::spawn_blocking(move || {
        let face = PixelGrid::decode_png(&png).map_err(|e| ApiError::field("image", e.to_string()))?;
        let t = Instant::now();
        let aged = age_face(
            &face,
            &v.targets,
            &request.ethnicity,
            &params,
            &loaded.models,
            worker_state.registry(),
            None,
        )
        .map_err(core_error)?;
        let aging_ms = ms(t);
        let t = Instant::now();
        let out = if request.refine {
            refine_face(&aged, loaded.refiner.as_ref(), strength, params.seed).map_err(core_error)?
        } else {
            aged
        };
        let refine_ms = ms(t);
        // An untouched image goes back as the uploaded bytes.
        let bytes = if out == face {
            png
        } else {
            out.encode_png().map_err(core_error)?
        };
        Ok::<_, ApiError>((bytes, out.width(), out.height(), aging_ms, refine_ms, request.refine))
    });
    let (bytes, width, height, aging_ms, refine_ms, refined) =
        job.await.map_err(|e| ApiError::Internal(e.to_string()))??;

    Ok(Json(InferResponse {
        image_png: base64::engine::general_purpose::STANDARD.encode(bytes),
        width,
        height,
        applied_scores: v.applied,
        params,
        seed: params.seed,
        refined,
        timing: Timing {
            aging_ms,
            refine_ms,
            total_ms: ms(start),
        },
    }))
}

fn core_error(e: LdlaError) -> ApiError {
    match e {
        LdlaError::Validation(m) => ApiError::field("request", m),
        LdlaError::Geometry(m) | LdlaError::Shape(m) => ApiError::field("image", m),
        other => ApiError::Internal(other.to_string()),
    }
}
