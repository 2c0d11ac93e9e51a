//! Session-based inference over a frozen model, exposed over HTTP.
//!
//! Every step goes through [`Model::rollout_step`], the same call the batch
//! evaluator uses, so both paths produce identical images.

mod http;

pub use http::{router, serve};

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, TryLockError};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{Detection, Detector};
use crate::model::{Model, RolloutState};

pub const API_VERSION: u32 = 1;
pub const PERSIST_FILE: &str = "sessions.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: usize,
    pub instruction: String,
    pub image_ref: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub version: u32,
    pub id: String,
    pub t: usize,
    /// Reference of the current canvas image.
    pub image_ref: String,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub version: u32,
    pub id: String,
    pub t: usize,
    pub image_ref: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug)]
struct Session {
    id: String,
    state: RolloutState,
    initial_ref: String,
    transcript: Vec<TranscriptEntry>,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            version: API_VERSION,
            id: self.id.clone(),
            t: self.state.t,
            image_ref: self
                .transcript
                .last()
                .map(|e| e.image_ref.clone())
                .unwrap_or_else(|| self.initial_ref.clone()),
            transcript: self.transcript.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogRecord {
    Create { id: String },
    Step { id: String, instruction: String },
    Delete { id: String },
}

/// In-memory sessions over an immutable model. Each session is behind its
/// own lock; a step on a session that is already stepping fails with
/// [`Error::Busy`] instead of queueing.
pub struct SessionManager {
    model: Arc<Model>,
    detector: Arc<dyn Detector>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    images: Mutex<HashMap<String, Vec<u8>>>,
    persist: Option<Mutex<fs::File>>,
    info: serde_json::Value,
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl SessionManager {
    /// `info` is echoed by the model endpoint. With `persist`, the
    /// append-only transcript log in that directory is replayed first.
    pub fn new(
        model: Arc<Model>,
        detector: Arc<dyn Detector>,
        info: serde_json::Value,
        persist: Option<&Path>,
    ) -> Result<Self> {
        let mut mgr = Self {
            model,
            detector,
            sessions: Mutex::new(HashMap::new()),
            images: Mutex::new(HashMap::new()),
            persist: None,
            info,
        };
        if let Some(dir) = persist {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(PERSIST_FILE);
            if path.exists() {
                mgr.replay(&path)?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            mgr.persist = Some(Mutex::new(file));
        }
        Ok(mgr)
    }

    fn replay(&self, path: &PathBuf) -> Result<()> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut n = 0;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            match rec {
                LogRecord::Create { id } => {
                    self.create_with_id(id)?;
                }
                LogRecord::Step { id, instruction } => {
                    self.step(&id, &instruction)?;
                }
                LogRecord::Delete { id } => self.delete(&id),
            }
            n += 1;
        }
        log::info!("replayed {n} session records from {}", path.display());
        Ok(())
    }

    fn log(&self, rec: &LogRecord) -> Result<()> {
        if let Some(f) = &self.persist {
            let mut f = lock(f);
            let line = serde_json::to_string(rec).expect("log records serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(PERSIST_FILE, e))?;
            f.flush().map_err(|e| Error::io(PERSIST_FILE, e))?;
        }
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn info(&self) -> serde_json::Value {
        serde_json::json!({
            "version": API_VERSION,
            "config": self.model.config,
            "vocabulary_size": self.model.vocab.len(),
            "checkpoint": self.info,
        })
    }

    fn store_image(&self, key: String, img: &RgbImage) -> Result<()> {
        let bytes = png_bytes(img)?;
        lock(&self.images).insert(key, bytes);
        Ok(())
    }

    fn create_with_id(&self, id: String) -> Result<SessionView> {
        let state = self.model.initial_state()?;
        let initial_ref = format!("{id}-0");
        self.store_image(initial_ref.clone(), &state.rgb()?)?;
        let s = Session { id: id.clone(), state, initial_ref, transcript: Vec::new() };
        let view = s.view();
        lock(&self.sessions).insert(id, Arc::new(Mutex::new(s)));
        Ok(view)
    }

    pub fn create(&self) -> Result<SessionView> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let view = self.create_with_id(id.clone())?;
        self.log(&LogRecord::Create { id })?;
        Ok(view)
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    /// Generate the next canvas. The session is only modified once the
    /// whole step has succeeded.
    pub fn step(&self, id: &str, instruction: &str) -> Result<StepResult> {
        if instruction.trim().is_empty() {
            return Err(Error::Contract("instruction must not be empty".into()));
        }
        let slot = self.slot(id)?;
        let mut s = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => {
                return Err(Error::Busy(format!("session {id} is processing a step")))
            }
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let next = self.model.rollout_step(&s.state, instruction)?;
        let img = next.rgb()?;
        let detections = self.detector.detect(&img)?;
        let image_ref = format!("{id}-{}", next.t);
        self.store_image(image_ref.clone(), &img)?;
        self.log(&LogRecord::Step { id: id.to_string(), instruction: instruction.to_string() })?;
        s.transcript.push(TranscriptEntry {
            t: next.t,
            instruction: instruction.to_string(),
            image_ref: image_ref.clone(),
            detections: detections.clone(),
        });
        s.state = next;
        Ok(StepResult { version: API_VERSION, id: id.to_string(), t: s.state.t, image_ref, detections })
    }

    pub fn get(&self, id: &str) -> Result<SessionView> {
        let slot = self.slot(id)?;
        let s = lock(&slot);
        Ok(s.view())
    }

    /// Idempotent: deleting an unknown session is not an error.
    pub fn delete(&self, id: &str) {
        let removed = lock(&self.sessions).remove(id);
        if removed.is_some() {
            let prefix = format!("{id}-");
            lock(&self.images).retain(|k, _| !k.starts_with(&prefix));
            if let Err(e) = self.log(&LogRecord::Delete { id: id.to_string() }) {
                log::warn!("could not persist deletion of {id}: {e}");
            }
        }
    }

    pub fn image(&self, image_ref: &str) -> Result<Vec<u8>> {
        lock(&self.images)
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("image {image_ref}")))
    }
}
