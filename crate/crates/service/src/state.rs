//! Sessions, jobs and the bounded worker pool they run on.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use inpaint_core::backbone::{read_checkpoint, write_checkpoint, ParameterSet};
use inpaint_core::finetune::{FinetuneConfig, LossRecord};
use inpaint_core::pipeline::{run_inpaint, PipelineConfig, PreparedInputs};
use inpaint_core::raster::{decode_mask, decode_rgb, encode_png};
use inpaint_core::sampler::{SampleObserver, StepEvent};
use inpaint_core::guidance::validate_spec;
use inpaint_core::codec::LatentMap;
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::events::EventLog;
use crate::records::{
    FinetuneState, FinetuneStatus, JobRecord, JobRequest, JobStatus, LossPoint, Progress, SessionRecord,
};
use crate::store::Store;

const SESSIONS: &str = "sessions";
const JOBS: &str = "jobs";

pub struct Session {
    pub record: Mutex<SessionRecord>,
    pub inputs: Arc<PreparedInputs>,
    params: Mutex<Option<Arc<ParameterSet>>>,
    pub events: Arc<EventLog>,
}

pub struct Job {
    pub record: Mutex<JobRecord>,
    pub events: Arc<EventLog>,
}

/// Uploaded session inputs, as raw PNG bytes.
pub struct Upload {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub exemplar: Option<Vec<u8>>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum FinetuneEvent<'a> {
    Iteration(&'a LossPoint),
    Done { checkpoint: &'a str },
    Failed { error: &'a str },
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum JobEvent<'a> {
    Step(&'a StepEvent),
    Done { outputs: usize },
    Failed { error: &'a str },
}

pub struct AppState {
    pub config: ServiceConfig,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    permits: Arc<Semaphore>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

fn prepare(pipeline: &PipelineConfig, up: &Upload) -> Result<PreparedInputs, ServiceError> {
    let field = |name: &'static str| move |e: inpaint_core::Error| ServiceError::validation(name, e.to_string());
    let image = decode_rgb(&up.image).map_err(field("image"))?;
    let mask = decode_mask(&up.mask).map_err(field("mask"))?;
    let exemplar = up.exemplar.as_deref().map(decode_rgb).transpose().map_err(field("exemplar"))?;
    Ok(pipeline.prepare(&image, &mask, exemplar.as_ref())?)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker panicked: {e}")))?
}

impl AppState {
    /// Opens the artifact store and reloads every persisted session and job.
    /// Work that was in flight when the previous process stopped is marked
    /// failed.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let store = Store::open(&config.artifact_root)?;
        let mut sessions = HashMap::new();
        for mut rec in store.all_docs::<SessionRecord>(SESSIONS)? {
            let up = Upload {
                image: store.get_blob(&rec.image)?,
                mask: store.get_blob(&rec.mask)?,
                exemplar: rec.exemplar.as_deref().map(|h| store.get_blob(h)).transpose()?,
            };
            let inputs = prepare(&rec.pipeline, &up)?;
            if rec.finetune.status == FinetuneStatus::Running {
                rec.finetune.status = FinetuneStatus::Failed;
                rec.finetune.error = Some("interrupted by service restart".into());
                store.put_doc(SESSIONS, &rec.id, &rec)?;
            }
            sessions.insert(
                rec.id.clone(),
                Arc::new(Session {
                    record: Mutex::new(rec),
                    inputs: Arc::new(inputs),
                    params: Mutex::new(None),
                    events: Arc::new(EventLog::closed()),
                }),
            );
        }
        let mut jobs = HashMap::new();
        for mut rec in store.all_docs::<JobRecord>(JOBS)? {
            if matches!(rec.status, JobStatus::Queued | JobStatus::Running) {
                rec.status = JobStatus::Failed;
                rec.error = Some("interrupted by service restart".into());
                store.put_doc(JOBS, &rec.id, &rec)?;
            }
            jobs.insert(
                rec.id.clone(),
                Arc::new(Job {
                    record: Mutex::new(rec),
                    events: Arc::new(EventLog::closed()),
                }),
            );
        }
        Ok(Arc::new(Self {
            permits: Arc::new(Semaphore::new(config.workers)),
            config,
            store,
            sessions: RwLock::new(sessions),
            jobs: RwLock::new(jobs),
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn job(&self, id: &str) -> Result<Arc<Job>, ServiceError> {
        self.jobs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    fn save_session(&self, s: &Session) -> Result<(), ServiceError> {
        let rec = s.record.lock().unwrap().clone();
        self.store.put_doc(SESSIONS, &rec.id, &rec)
    }

    fn save_job(&self, j: &Job) -> Result<(), ServiceError> {
        let rec = j.record.lock().unwrap().clone();
        self.store.put_doc(JOBS, &rec.id, &rec)
    }

    pub async fn create_session(self: &Arc<Self>, up: Upload) -> Result<SessionRecord, ServiceError> {
        let pipeline = self.config.pipeline();
        let (up, inputs) = blocking(move || {
            let inputs = prepare(&pipeline, &up)?;
            Ok((up, inputs))
        })
        .await?;
        let rec = SessionRecord {
            id: new_id(),
            created_at: now(),
            pipeline,
            width: inputs.image.width(),
            height: inputs.image.height(),
            image: self.store.put_blob(&up.image)?,
            mask: self.store.put_blob(&up.mask)?,
            exemplar: up.exemplar.as_deref().map(|b| self.store.put_blob(b)).transpose()?,
            subject_token: inputs.exemplar.as_ref().map(|e| e.subject_token),
            finetune: FinetuneState {
                status: FinetuneStatus::Idle,
                config: None,
                checkpoint: None,
                error: None,
                losses: Vec::new(),
            },
            jobs: Vec::new(),
        };
        let session = Arc::new(Session {
            record: Mutex::new(rec.clone()),
            inputs: Arc::new(inputs),
            params: Mutex::new(None),
            events: Arc::new(EventLog::default()),
        });
        self.save_session(&session)?;
        self.sessions.write().unwrap().insert(rec.id.clone(), session);
        Ok(rec)
    }

    /// Marks the session running and finetunes it in the background.
    pub fn start_finetune(self: &Arc<Self>, id: &str, cfg: FinetuneConfig) -> Result<SessionRecord, ServiceError> {
        cfg.validate()?;
        let session = self.session(id)?;
        let snapshot = {
            let mut rec = session.record.lock().unwrap();
            match rec.finetune.status {
                FinetuneStatus::Running => return Err(ServiceError::Conflict("finetune already running".into())),
                FinetuneStatus::Done => return Err(ServiceError::Conflict("session is already finetuned".into())),
                FinetuneStatus::Idle | FinetuneStatus::Failed => {}
            }
            rec.finetune = FinetuneState {
                status: FinetuneStatus::Running,
                config: Some(cfg),
                checkpoint: None,
                error: None,
                losses: Vec::new(),
            };
            rec.clone()
        };
        self.store.put_doc(SESSIONS, id, &snapshot)?;
        let state = self.clone();
        tokio::spawn(async move {
            let _permit = state.permits.clone().acquire_owned().await.expect("semaphore open");
            let worker = session.clone();
            let store = state.store.clone();
            let result = blocking(move || {
                let pipeline = worker.record.lock().unwrap().pipeline;
                let mut on_iter = |r: &LossRecord| {
                    let point = LossPoint::from(r);
                    worker.record.lock().unwrap().finetune.losses.push(point);
                    worker.events.push(&FinetuneEvent::Iteration(&point));
                };
                let (params, _) = pipeline.finetune(&worker.inputs, &cfg, Some(&mut on_iter))?;
                let hash = store.put_blob(&write_checkpoint(&params)?)?;
                *worker.params.lock().unwrap() = Some(Arc::new(params));
                Ok(hash)
            })
            .await;
            {
                let mut rec = session.record.lock().unwrap();
                match &result {
                    Ok(hash) => {
                        rec.finetune.status = FinetuneStatus::Done;
                        rec.finetune.checkpoint = Some(hash.clone());
                        session.events.push(&FinetuneEvent::Done { checkpoint: hash });
                    }
                    Err(e) => {
                        rec.finetune.status = FinetuneStatus::Failed;
                        rec.finetune.error = Some(e.to_string());
                        session.events.push(&FinetuneEvent::Failed { error: &e.to_string() });
                    }
                }
            }
            if let Err(e) = state.save_session(&session) {
                tracing::error!("persisting session failed: {e}");
            }
            session.events.close();
        });
        Ok(snapshot)
    }

    /// Finetuned parameters of a session, loaded from its checkpoint blob on
    /// first use.
    pub fn params(&self, session: &Session) -> Result<Arc<ParameterSet>, ServiceError> {
        let hash = {
            let rec = session.record.lock().unwrap();
            if rec.finetune.status != FinetuneStatus::Done {
                return Err(ServiceError::Conflict("finetune is not done for this session".into()));
            }
            rec.finetune.checkpoint.clone().expect("done sessions have a checkpoint")
        };
        let mut cached = session.params.lock().unwrap();
        if let Some(p) = cached.as_ref() {
            return Ok(p.clone());
        }
        let p = Arc::new(read_checkpoint(&self.store.get_blob(&hash)?)?);
        *cached = Some(p.clone());
        Ok(p)
    }

    pub fn checkpoint_bytes(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let session = self.session(id)?;
        let hash = session.record.lock().unwrap().finetune.checkpoint.clone();
        match hash {
            Some(h) => self.store.get_blob(&h),
            None => Err(ServiceError::NotFound(format!("checkpoint for session {id}"))),
        }
    }

    /// Validates the request synchronously, then samples in the background.
    pub fn submit_job(self: &Arc<Self>, session_id: &str, req: JobRequest) -> Result<JobRecord, ServiceError> {
        let session = self.session(session_id)?;
        let params = self.params(&session)?;
        let rec_snapshot = session.record.lock().unwrap().clone();
        let (spec, sampler) = req.to_spec(&rec_snapshot, &params)?;
        sampler.validate(&inpaint_core::schedule::NoiseSchedule::default())?;
        validate_spec(&spec, &session.inputs.mask)?;

        let record = JobRecord {
            id: new_id(),
            session: session_id.to_string(),
            created_at: now(),
            request: req,
            status: JobStatus::Queued,
            progress: Progress {
                steps_done: 0,
                steps_total: sampler.num_steps * spec.num_outputs,
            },
            outputs: Vec::new(),
            known_region: None,
            stroke_rmse: None,
            error: None,
        };
        let job = Arc::new(Job {
            record: Mutex::new(record.clone()),
            events: Arc::new(EventLog::default()),
        });
        self.save_job(&job)?;
        self.jobs.write().unwrap().insert(record.id.clone(), job.clone());
        session.record.lock().unwrap().jobs.push(record.id.clone());
        self.save_session(&session)?;

        let state = self.clone();
        tokio::spawn(async move {
            let _permit = state.permits.clone().acquire_owned().await.expect("semaphore open");
            job.record.lock().unwrap().status = JobStatus::Running;
            if let Err(e) = state.save_job(&job) {
                tracing::error!("persisting job failed: {e}");
            }
            let worker = job.clone();
            let store = state.store.clone();
            let inputs = session.inputs.clone();
            let result = blocking(move || {
                let observer = |e: &StepEvent, _: &LatentMap| {
                    worker.record.lock().unwrap().progress.steps_done += 1;
                    worker.events.push(&JobEvent::Step(e));
                };
                let out = run_inpaint(params, &inputs, &spec, &sampler, Some(&observer as &dyn SampleObserver))?;
                let hashes = out
                    .images
                    .iter()
                    .map(|img| store.put_blob(&encode_png(img)?))
                    .collect::<Result<Vec<_>, ServiceError>>()?;
                Ok((out, hashes))
            })
            .await;
            {
                let mut rec = job.record.lock().unwrap();
                match result {
                    Ok((out, hashes)) => {
                        rec.status = JobStatus::Done;
                        rec.outputs = hashes;
                        rec.known_region = Some(out.known_region);
                        rec.stroke_rmse = out.stroke_rmse;
                        job.events.push(&JobEvent::Done { outputs: rec.outputs.len() });
                    }
                    Err(e) => {
                        rec.status = JobStatus::Failed;
                        rec.error = Some(e.to_string());
                        job.events.push(&JobEvent::Failed { error: &e.to_string() });
                    }
                }
            }
            if let Err(e) = state.save_job(&job) {
                tracing::error!("persisting job failed: {e}");
            }
            job.events.close();
        });
        Ok(record)
    }

    pub fn artifact(&self, job_id: &str, n: usize) -> Result<Vec<u8>, ServiceError> {
        let job = self.job(job_id)?;
        let hash = {
            let rec = job.record.lock().unwrap();
            if rec.status != JobStatus::Done {
                return Err(ServiceError::Conflict(format!("job {job_id} is not done")));
            }
            rec.outputs
                .get(n)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(format!("artifact {n} of job {job_id}")))?
        };
        self.store.get_blob(&hash)
    }
}
