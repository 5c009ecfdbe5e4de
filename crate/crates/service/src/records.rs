//! Persisted session and job documents and the job request payload.

use base64::Engine;
use inpaint_core::backbone::ParameterSet;
use inpaint_core::finetune::{FinetuneConfig, LossRecord};
use inpaint_core::guidance::GuidanceSpec;
use inpaint_core::metrics::MetricReport;
use inpaint_core::pipeline::{stroke_for, PipelineConfig};
use inpaint_core::raster::decode_rgba;
use inpaint_core::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStatus {
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: u64,
    pub bg: f64,
    pub reference: Option<f64>,
    pub total: f64,
    pub elapsed_ms: u64,
}

impl From<&LossRecord> for LossPoint {
    fn from(r: &LossRecord) -> Self {
        Self {
            iteration: r.iteration,
            bg: r.bg,
            reference: r.reference,
            total: r.total,
            elapsed_ms: r.elapsed.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub status: FinetuneStatus,
    pub config: Option<FinetuneConfig>,
    /// Blob hash of the finetuned checkpoint.
    pub checkpoint: Option<String>,
    pub error: Option<String>,
    pub losses: Vec<LossPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub created_at: u64,
    pub pipeline: PipelineConfig,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub mask: String,
    pub exemplar: Option<String>,
    pub subject_token: Option<u32>,
    pub finetune: FinetuneState,
    pub jobs: Vec<String>,
}

/// Inpainting request as submitted by a client; stored verbatim so a job
/// can be resubmitted unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobRequest {
    pub prompt: Option<String>,
    pub subject_token: Option<u32>,
    /// Use the subject token resolved from the session's exemplar.
    pub use_exemplar: bool,
    /// Base64-encoded RGBA PNG stroke layer.
    pub stroke_png: Option<String>,
    pub tau: Option<f64>,
    pub scale: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub num_outputs: usize,
    pub attn_mask: bool,
}

impl Default for JobRequest {
    fn default() -> Self {
        Self {
            prompt: None,
            subject_token: None,
            use_exemplar: false,
            stroke_png: None,
            tau: None,
            scale: None,
            steps: None,
            seed: 0,
            num_outputs: 1,
            attn_mask: true,
        }
    }
}

impl JobRequest {
    pub fn to_spec(
        &self,
        session: &SessionRecord,
        params: &ParameterSet,
    ) -> Result<(GuidanceSpec, SamplerConfig), ServiceError> {
        let subject_token = match (self.subject_token, self.use_exemplar) {
            (Some(_), true) => {
                return Err(ServiceError::validation(
                    "subject_token",
                    "give either subject_token or use_exemplar, not both",
                ))
            }
            (Some(t), false) => Some(t),
            (None, true) => Some(session.subject_token.ok_or_else(|| {
                ServiceError::validation("use_exemplar", "session has no exemplar")
            })?),
            (None, false) => None,
        };
        let stroke = match &self.stroke_png {
            None => None,
            Some(b64) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64.trim())
                    .map_err(|e| ServiceError::validation("stroke_png", e.to_string()))?;
                let rgba = decode_rgba(&bytes).map_err(|e| ServiceError::validation("stroke_png", e.to_string()))?;
                Some(stroke_for(params, &rgba).map_err(|e| ServiceError::validation("stroke_png", e.to_string()))?)
            }
        };
        let spec = GuidanceSpec {
            prompt: self.prompt.clone(),
            subject_token,
            stroke,
            tau: self.tau,
            scale: self.scale,
            seed: self.seed,
            num_outputs: self.num_outputs,
        };
        let sampler = SamplerConfig {
            num_steps: self.steps.unwrap_or(SamplerConfig::default().num_steps),
            attn_mask_enabled: self.attn_mask,
            ..SamplerConfig::default()
        };
        Ok((spec, sampler))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub steps_done: usize,
    pub steps_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub session: String,
    pub created_at: u64,
    pub request: JobRequest,
    pub status: JobStatus,
    pub progress: Progress,
    /// Blob hashes of the output PNGs, in output order.
    pub outputs: Vec<String>,
    pub known_region: Option<MetricReport>,
    pub stroke_rmse: Option<MetricReport>,
    pub error: Option<String>,
}
