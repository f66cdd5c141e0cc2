//! Annotation sessions: an ordered image queue, per-image draft prompts with
//! live segmentation, and immutable committed records.
//!
//! A session lives in `<root>/sessions/<id>/`:
//!
//! * `session.json` lists the queue,
//! * `images/<img>.png` are the decoded inputs,
//! * `prompts/<img>.json` and `masks/<img>.png` hold committed annotations,
//! * `records/<img>.json` marks a commit as complete. It is written last, so
//!   an interrupted commit leaves no record behind.
//!
//! Drafts are kept in memory only; after a restart they are absent.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use image::RgbImage;
use samic_core::metrics::Mask;
use samic_core::{PointPrompt, PromptSet};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestItem, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, SegmentationResult};
use crate::io::{load_mask, load_rgb, mask_png, save_rgb, write_atomic};
use crate::prompts::PromptRecord;

pub const DEFAULT_CLASS: &str = "object";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: String,
    /// Path relative to the session directory.
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionFile {
    id: String,
    class: String,
    created_at: u64,
    queue: Vec<QueueEntry>,
}

/// A completed annotation. Paths are relative to the session directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub prompts: String,
    pub mask: String,
    pub confidence: f64,
    pub backend: String,
    pub started_at: u64,
    pub committed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStatus {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub embedding: EmbedStatus,
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub class: String,
    pub queue: Vec<QueueStatus>,
    /// First image without a committed record.
    pub next: Option<String>,
}

#[derive(Debug, Default)]
struct Draft {
    instances: Vec<Vec<PointPrompt>>,
    /// Instance index of every submitted point, oldest first.
    history: Vec<usize>,
    started_at: u64,
    last: Option<SegmentationResult>,
}

#[derive(Debug, Default)]
struct SessionState {
    drafts: HashMap<String, Draft>,
    committed: BTreeMap<String, AnnotationRecord>,
}

struct Session {
    id: String,
    class: String,
    dir: PathBuf,
    created_at: u64,
    queue: Vec<QueueEntry>,
    images: Vec<Arc<RgbImage>>,
    embeddings: Arc<(Mutex<Vec<EmbedStatus>>, Condvar)>,
    // One lock per session: submissions to the same session queue behind it
    // instead of racing.
    state: Mutex<SessionState>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sanitize(stem: &str) -> String {
    let s: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if s.is_empty() { "image".into() } else { s }
}

impl Session {
    fn index_of(&self, image: &str) -> Result<usize> {
        self.queue.iter().position(|q| q.id == image).ok_or_else(|| Error::NotFound(format!("image {image:?} in session {}", self.id)))
    }

    fn status(&self, i: usize) -> EmbedStatus {
        self.embeddings.0.lock().unwrap()[i]
    }

    fn info(&self) -> SessionInfo {
        let state = self.state.lock().unwrap();
        let statuses = self.embeddings.0.lock().unwrap().clone();
        let queue: Vec<QueueStatus> = self
            .queue
            .iter()
            .zip(statuses)
            .map(|(q, s)| QueueStatus {
                id: q.id.clone(),
                height: q.height,
                width: q.width,
                embedding: s,
                committed: state.committed.contains_key(&q.id),
            })
            .collect();
        let next = queue.iter().find(|q| !q.committed).map(|q| q.id.clone());
        SessionInfo { id: self.id.clone(), class: self.class.clone(), queue, next }
    }
}

/// Result of a draft edit: `None` once the draft has no points left.
pub type DraftResult = Option<SegmentationResult>;

pub struct AnnotationService {
    root: PathBuf,
    gateway: Arc<Gateway>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    counter: AtomicUsize,
}

impl AnnotationService {
    /// Opens the service rooted at `root`, reloading every complete session
    /// and committed record found there.
    pub fn open(root: &Path, gateway: Arc<Gateway>) -> Result<Self> {
        let sessions_dir = root.join("sessions");
        std::fs::create_dir_all(&sessions_dir).map_err(|e| Error::io(&sessions_dir, e))?;
        let svc = Self { root: root.into(), gateway, sessions: RwLock::default(), counter: AtomicUsize::new(0) };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&sessions_dir)
            .map_err(|e| Error::io(&sessions_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let s = svc.reload_session(&dir)?;
            svc.sessions.write().unwrap().insert(s.id.clone(), s);
        }
        let n = svc.sessions.read().unwrap().len();
        svc.counter.store(n, Ordering::SeqCst);
        Ok(svc)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn reload_session(&self, dir: &Path) -> Result<Arc<Session>> {
        let path = dir.join("session.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: SessionFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let images = file.queue.iter().map(|q| load_rgb(&dir.join(&q.file)).map(Arc::new)).collect::<Result<Vec<_>>>()?;
        let mut state = SessionState::default();
        for q in &file.queue {
            let rp = dir.join("records").join(format!("{}.json", q.id));
            if !rp.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
            let rec: AnnotationRecord = serde_json::from_str(&text).map_err(|e| Error::format(&rp, e))?;
            for f in [&rec.prompts, &rec.mask] {
                if !dir.join(f).is_file() {
                    return Err(Error::format(&rp, format!("record refers to missing file {f}")));
                }
            }
            state.committed.insert(q.id.clone(), rec);
        }
        let session = self.start(file.id, file.class, dir.into(), file.created_at, file.queue, images, state);
        Ok(session)
    }

    #[allow(clippy::too_many_arguments)]
    fn start(
        &self,
        id: String,
        class: String,
        dir: PathBuf,
        created_at: u64,
        queue: Vec<QueueEntry>,
        images: Vec<Arc<RgbImage>>,
        state: SessionState,
    ) -> Arc<Session> {
        let embeddings = Arc::new((Mutex::new(vec![EmbedStatus::Pending; queue.len()]), Condvar::new()));
        let session = Arc::new(Session { id, class, dir, created_at, queue, images, embeddings, state: Mutex::new(state) });
        // Precompute embeddings in queue order in the background.
        let (gw, s) = (self.gateway.clone(), session.clone());
        std::thread::spawn(move || {
            for (i, img) in s.images.iter().enumerate() {
                let status = match gw.embed_image(img, &s.queue[i].id) {
                    Ok(_) => EmbedStatus::Ready,
                    Err(e) => {
                        log::error!("embedding {} failed: {e}", s.queue[i].id);
                        EmbedStatus::Failed
                    }
                };
                let (lock, cv) = &*s.embeddings;
                lock.lock().unwrap()[i] = status;
                cv.notify_all();
            }
        });
        session
    }

    fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    /// Creates a session over `images` in the given order. Every unreadable
    /// file is reported.
    pub fn open_session(&self, images: &[PathBuf], class: Option<&str>) -> Result<SessionInfo> {
        if images.is_empty() {
            return Err(Error::Argument("a session needs at least one image".into()));
        }
        let mut decoded = Vec::new();
        let mut problems = Vec::new();
        for p in images {
            match load_rgb(p) {
                Ok(img) => decoded.push(img),
                Err(e) => problems.push(e.to_string()),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Dataset(problems));
        }
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        let id = format!("s{n:04}");
        let dir = self.root.join("sessions").join(&id);
        let mut queue = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (p, img) in images.iter().zip(&decoded) {
            let stem = sanitize(p.file_stem().and_then(|s| s.to_str()).unwrap_or("image"));
            let k = seen.entry(stem.clone()).or_insert(0);
            *k += 1;
            let img_id = if *k == 1 { stem } else { format!("{stem}-{k}") };
            let file = format!("images/{img_id}.png");
            save_rgb(&dir.join(&file), img)?;
            queue.push(QueueEntry { id: img_id, file, height: img.height() as usize, width: img.width() as usize });
        }
        let class = class.unwrap_or(DEFAULT_CLASS).to_string();
        let created_at = now();
        let file = SessionFile { id: id.clone(), class: class.clone(), created_at, queue: queue.clone() };
        write_atomic(&dir.join("session.json"), serde_json::to_string_pretty(&file).unwrap().as_bytes())?;
        let images = decoded.into_iter().map(Arc::new).collect();
        let session = self.start(id.clone(), class, dir, created_at, queue, images, SessionState::default());
        let info = session.info();
        self.sessions.write().unwrap().insert(id, session);
        Ok(info)
    }

    pub fn session_info(&self, session: &str) -> Result<SessionInfo> {
        Ok(self.session(session)?.info())
    }

    /// The first image without a committed record, if any.
    pub fn next_image(&self, session: &str) -> Result<Option<QueueStatus>> {
        let info = self.session_info(session)?;
        Ok(info.queue.into_iter().find(|q| !q.committed))
    }

    /// Blocks until every embedding of the session is computed or `timeout`
    /// elapses. Returns whether all are ready.
    pub fn wait_ready(&self, session: &str, timeout: Duration) -> Result<bool> {
        let s = self.session(session)?;
        let (lock, cv) = &*s.embeddings;
        let guard = lock.lock().unwrap();
        let (guard, _) = cv.wait_timeout_while(guard, timeout, |st| st.iter().any(|e| *e == EmbedStatus::Pending)).unwrap();
        Ok(guard.iter().all(|e| *e == EmbedStatus::Ready))
    }

    fn ready(s: &Session, i: usize) -> Result<()> {
        match s.status(i) {
            EmbedStatus::Ready => Ok(()),
            EmbedStatus::Pending => Err(Error::NotReady(s.queue[i].id.clone())),
            EmbedStatus::Failed => Err(Error::BackendUnavailable(format!("embedding of {} failed", s.queue[i].id))),
        }
    }

    fn run(&self, s: &Session, i: usize, draft: &Draft) -> Result<DraftResult> {
        let groups: Vec<Vec<PointPrompt>> = draft.instances.iter().filter(|g| !g.is_empty()).cloned().collect();
        if groups.is_empty() {
            return Ok(None);
        }
        let prompts = PromptSet::new(s.queue[i].id.clone(), groups);
        self.gateway.segment_instances(&s.images[i], &prompts).map(Some)
    }

    /// Appends `point` to instance `instance` of the image's draft (an index
    /// equal to the number of instances starts a new one) and re-segments.
    pub fn submit_prompt(&self, session: &str, image: &str, instance: usize, point: PointPrompt) -> Result<SegmentationResult> {
        let s = self.session(session)?;
        let i = s.index_of(image)?;
        let q = &s.queue[i];
        if !point.in_bounds(q.height, q.width) {
            return Err(Error::Argument(format!("point ({}, {}) outside the {}x{} image", point.x, point.y, q.height, q.width)));
        }
        let mut state = s.state.lock().unwrap();
        if state.committed.contains_key(image) {
            return Err(Error::Conflict(format!("image {image:?} is already committed")));
        }
        Self::ready(&s, i)?;
        let draft = state.drafts.entry(image.into()).or_insert_with(|| Draft { started_at: now(), ..Draft::default() });
        if instance > draft.instances.len() {
            return Err(Error::Argument(format!("instance {instance} does not exist; next new instance is {}", draft.instances.len())));
        }
        let mut next = Draft {
            instances: draft.instances.clone(),
            history: draft.history.clone(),
            started_at: draft.started_at,
            last: None,
        };
        if instance == next.instances.len() {
            next.instances.push(Vec::new());
        }
        next.instances[instance].push(point);
        next.history.push(instance);
        let result = self.run(&s, i, &next)?.expect("draft has a point");
        next.last = Some(result.clone());
        *draft = next;
        Ok(result)
    }

    /// Removes the most recently submitted point of the image's draft.
    pub fn undo_last(&self, session: &str, image: &str) -> Result<DraftResult> {
        let s = self.session(session)?;
        let i = s.index_of(image)?;
        let mut state = s.state.lock().unwrap();
        let draft = state.drafts.get_mut(image).filter(|d| !d.history.is_empty()).ok_or_else(|| Error::Argument(format!("image {image:?} has no draft points")))?;
        let inst = draft.history.pop().expect("checked non-empty");
        draft.instances[inst].pop();
        while draft.instances.last().is_some_and(Vec::is_empty) {
            draft.instances.pop();
        }
        let result = self.run(&s, i, draft)?;
        draft.last = result.clone();
        if draft.history.is_empty() {
            state.drafts.remove(image);
        }
        Ok(result)
    }

    /// Current draft prompts of an image.
    pub fn draft(&self, session: &str, image: &str) -> Result<Option<PromptSet>> {
        let s = self.session(session)?;
        s.index_of(image)?;
        let state = s.state.lock().unwrap();
        Ok(state.drafts.get(image).map(|d| PromptSet::new(image, d.instances.clone())))
    }

    /// Writes the draft's prompts, mask and record, then clears the draft.
    pub fn commit(&self, session: &str, image: &str) -> Result<AnnotationRecord> {
        let s = self.session(session)?;
        let i = s.index_of(image)?;
        let mut state = s.state.lock().unwrap();
        if state.committed.contains_key(image) {
            return Err(Error::Conflict(format!("image {image:?} is already committed")));
        }
        let draft = state.drafts.get(image).filter(|d| !d.history.is_empty()).ok_or_else(|| Error::Argument(format!("image {image:?} has an empty draft")))?;
        let result = match &draft.last {
            Some(r) => r.clone(),
            None => self.run(&s, i, draft)?.expect("draft has points"),
        };
        let q = &s.queue[i];
        let prompts = PromptSet::new(image, draft.instances.clone());
        let prompt_rec = PromptRecord::new(&prompts, (q.height, q.width), result.confidence, self.gateway.backend_id());
        let rec = AnnotationRecord {
            image: image.into(),
            prompts: format!("prompts/{image}.json"),
            mask: format!("masks/{image}.png"),
            confidence: result.confidence,
            backend: self.gateway.backend_id().into(),
            started_at: draft.started_at,
            committed_at: now(),
        };
        write_atomic(&s.dir.join(&rec.mask), &mask_png(&result.mask)?)?;
        write_atomic(&s.dir.join(&rec.prompts), prompt_rec.to_json().as_bytes())?;
        write_atomic(&s.dir.join("records").join(format!("{image}.json")), serde_json::to_string(&rec).unwrap().as_bytes())?;
        state.drafts.remove(image);
        state.committed.insert(image.into(), rec.clone());
        Ok(rec)
    }

    pub fn records(&self, session: &str) -> Result<Vec<AnnotationRecord>> {
        let s = self.session(session)?;
        let state = s.state.lock().unwrap();
        Ok(s.queue.iter().filter_map(|q| state.committed.get(&q.id).cloned()).collect())
    }

    pub fn session_dir(&self, session: &str) -> Result<PathBuf> {
        Ok(self.session(session)?.dir.clone())
    }

    pub fn created_at(&self, session: &str) -> Result<u64> {
        Ok(self.session(session)?.created_at)
    }

    /// The image a session serves for `image`.
    pub fn image(&self, session: &str, image: &str) -> Result<Arc<RgbImage>> {
        let s = self.session(session)?;
        Ok(s.images[s.index_of(image)?].clone())
    }

    /// PNG of the committed mask, else of the current draft's mask.
    pub fn mask_png(&self, session: &str, image: &str) -> Result<Vec<u8>> {
        let s = self.session(session)?;
        s.index_of(image)?;
        let state = s.state.lock().unwrap();
        if let Some(rec) = state.committed.get(image) {
            return crate::io::read(&s.dir.join(&rec.mask));
        }
        match state.drafts.get(image).and_then(|d| d.last.as_ref()) {
            Some(r) => mask_png(&r.mask),
            None => Err(Error::NotFound(format!("no mask for image {image:?}"))),
        }
    }

    /// Committed mask of an image as stored.
    pub fn committed_mask(&self, session: &str, image: &str) -> Result<Mask> {
        let s = self.session(session)?;
        let state = s.state.lock().unwrap();
        let rec = state.committed.get(image).ok_or_else(|| Error::NotFound(format!("committed record for {image:?}")))?;
        load_mask(&s.dir.join(&rec.mask))
    }

    /// Copies committed annotations into a dataset directory with
    /// `images/`, `prompts/`, `masks/` and `manifest.json`; every item goes
    /// to the training split.
    pub fn export_dataset(&self, session: &str, out: &Path) -> Result<PathBuf> {
        let s = self.session(session)?;
        let records = self.records(session)?;
        if records.is_empty() {
            return Err(Error::Argument(format!("session {session} has no committed records")));
        }
        let mut items = Vec::new();
        for rec in &records {
            let q = &s.queue[s.index_of(&rec.image)?];
            let copy = |from: &str, to: String| -> Result<String> {
                write_atomic(&out.join(&to), &crate::io::read(&s.dir.join(from))?)?;
                Ok(to)
            };
            items.push(ManifestItem {
                id: rec.image.clone(),
                class: s.class.clone(),
                split: "train".into(),
                image: copy(&q.file, format!("images/{}.png", rec.image))?,
                prompts: copy(&rec.prompts, format!("prompts/{}.json", rec.image))?,
                mask: copy(&rec.mask, format!("masks/{}.png", rec.image))?,
            });
        }
        let manifest = Manifest { classes: vec![s.class.clone()], items };
        let path = out.join(MANIFEST_FILE);
        write_atomic(&path, serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
        Ok(path)
    }
}
