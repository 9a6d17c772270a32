//! HTTP annotation service.
//!
//! Board annotations are JSON documents under `annotations/`, replaced
//! atomically on every edit, with an append-only `annotations/edits.log`.
//! Writes take a per-board lock and carry the revision they were based on;
//! a stale revision is refused with 409 and the current document.
//!
//! | route | |
//! |---|---|
//! | `GET /boards` | board list |
//! | `GET /boards/{id}/image?scale=0.25` or `?crop=x,y,w,h` | PNG preview or full-resolution crop |
//! | `GET /boards/{id}/annotations` | current document |
//! | `PUT /boards/{id}/annotations` | replace boxes, labels and board fields |
//! | `POST /boards/{id}/detect` | add automatic boxes |
//! | `PUT /pairs` | link a dorsal and a lateral board |
//! | `GET /export` | specimen table of every complete, paired row |
//! | `GET /taxonomy` | label set |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use image::{DynamicImage, ImageFormat};
use krill_core::data::{pair_views, write_manifest};
use krill_core::metrics::iou;
use krill_core::raster::resize_area;
use krill_core::segmentation::{detect, index_positions, Segmenter};
use krill_core::{
    BBox, BoardImage, DatasetManifest, MaturityLabel, SpecimenId, SpecimenRecord, Taxonomy, View,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::workspace::{ensure_dir, list_images, Workspace};

/// Automatic boxes overlapping a kept box by more than this are discarded.
pub const DETECT_OVERLAP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Auto,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub bbox: Provenance,
    pub length_mm: Provenance,
    pub maturity: Provenance,
}

impl FieldProvenance {
    pub fn all(p: Provenance) -> Self {
        Self {
            bbox: p,
            length_mm: p,
            maturity: p,
        }
    }

    pub fn any_human(&self) -> bool {
        [self.bbox, self.length_mm, self.maturity].contains(&Provenance::Human)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    /// Stable for the life of the box; never reused on a board.
    pub id: u64,
    /// 1-based position on the board.
    pub index: usize,
    pub bbox: BBox,
    pub length_mm: Option<u32>,
    pub maturity: Option<MaturityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
    pub provenance: FieldProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationState {
    pub board: String,
    pub width: u32,
    pub height: u32,
    pub cruise: String,
    pub view: Option<View>,
    pub event: Option<u32>,
    pub net: Option<u32>,
    pub board_no: Option<u32>,
    /// File of the board showing the same specimens from the other view.
    pub pair: Option<String>,
    /// In index order.
    pub boxes: Vec<AnnotatedBox>,
    pub next_id: u64,
    pub revision: u64,
}

impl AnnotationState {
    fn empty(board: &BoardEntry, file: &str) -> Self {
        Self {
            board: file.to_string(),
            width: board.width,
            height: board.height,
            cruise: board.cruise.clone(),
            view: None,
            event: None,
            net: None,
            board_no: None,
            pair: None,
            boxes: Vec::new(),
            next_id: 1,
            revision: 0,
        }
    }

    fn reindex(&mut self) {
        let boxes: Vec<BBox> = self.boxes.iter().map(|b| b.bbox).collect();
        for (b, i) in self.boxes.iter_mut().zip(index_positions(&boxes)) {
            b.index = i;
        }
        self.sort();
    }

    fn sort(&mut self) {
        self.boxes.sort_by_key(|b| (b.index, b.id));
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct BoxEdit {
    /// Absent for a new box.
    #[serde(default)]
    pub id: Option<u64>,
    pub bbox: BBox,
    #[serde(default)]
    pub length_mm: Option<u32>,
    #[serde(default)]
    pub maturity: Option<MaturityLabel>,
}

/// Full replacement of a board's editable fields. Boxes left out are deleted.
#[derive(Debug, Clone, Deserialize)]
pub struct AnnotationUpdate {
    pub revision: u64,
    pub boxes: Vec<BoxEdit>,
    #[serde(default)]
    pub view: Option<View>,
    #[serde(default)]
    pub event: Option<u32>,
    #[serde(default)]
    pub net: Option<u32>,
    #[serde(default)]
    pub board_no: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PairRequest {
    pub dorsal: String,
    pub lateral: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoardSummary {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub cruise: String,
    pub view: Option<View>,
    pub pair: Option<String>,
    pub boxes: usize,
    pub revision: u64,
}

/// Source of automatic boxes for `POST /boards/{id}/detect`.
pub trait Detector: Send + Sync {
    fn detect(&self, file: &str, image: &DynamicImage) -> Result<Vec<(BBox, f32)>>;
}

pub struct SegmenterDetector {
    pub model: Segmenter,
    pub threshold: f32,
}

impl Detector for SegmenterDetector {
    fn detect(&self, file: &str, image: &DynamicImage) -> Result<Vec<(BBox, f32)>> {
        let r = detect(file, image, &self.model, self.threshold)?;
        Ok(r.boxes
            .iter()
            .zip(&r.instances)
            .map(|(b, m)| (*b, m.effective_score()))
            .collect())
    }
}

#[derive(Debug, Clone)]
struct BoardEntry {
    path: PathBuf,
    width: u32,
    height: u32,
    cruise: String,
}

pub struct Service {
    dir: PathBuf,
    boards: BTreeMap<String, BoardEntry>,
    imported: HashMap<String, AnnotationState>,
    locks: HashMap<String, Arc<Mutex<()>>>,
    pairs_lock: Mutex<()>,
    log_lock: Mutex<()>,
    taxonomy: Taxonomy,
    token: Option<String>,
    preview_scale: f32,
    detector: Option<Arc<dyn Detector>>,
}

fn cruise_of(file: &str) -> String {
    file.split('_').next().unwrap_or(file).to_string()
}

fn import_states(
    manifest: &DatasetManifest,
    boards: &BTreeMap<String, BoardEntry>,
) -> HashMap<String, AnnotationState> {
    let mut out = HashMap::new();
    for (file, entry) in boards {
        let mut recs: Vec<&SpecimenRecord> = manifest.records_on(file).collect();
        if recs.is_empty() {
            continue;
        }
        recs.sort_by_key(|r| r.id.index);
        let mut st = AnnotationState::empty(entry, file);
        let first = recs[0];
        st.cruise = first.cruise.clone();
        st.view = Some(first.view);
        st.event = Some(first.event);
        st.net = Some(first.net);
        st.board_no = Some(first.board);
        st.pair = Some(first.alt_id.image_file.clone());
        for r in recs {
            let id = st.alloc_id();
            st.boxes.push(AnnotatedBox {
                id,
                index: r.id.index as usize,
                bbox: r.bbox,
                length_mm: Some(r.length_mm),
                maturity: Some(r.maturity.clone()),
                score: None,
                provenance: FieldProvenance::all(Provenance::Human),
            });
        }
        st.sort();
        out.insert(file.clone(), st);
    }
    out
}

impl Service {
    /// Index the boards directory and, when present, the ingested manifest,
    /// whose records seed boards that have never been edited.
    pub fn open(
        ws: &Workspace,
        cfg: &RunConfig,
        boards_dir: &Path,
        manifest: Option<&DatasetManifest>,
        detector: Option<Arc<dyn Detector>>,
    ) -> Result<Self> {
        let dir = ws.annotations_dir();
        ensure_dir(&dir)?;
        let mut boards = BTreeMap::new();
        for file in list_images(boards_dir)? {
            let path = boards_dir.join(&file);
            let (width, height) = image::image_dimensions(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let cruise = cruise_of(&file);
            boards.insert(
                file,
                BoardEntry {
                    path,
                    width,
                    height,
                    cruise,
                },
            );
        }
        let imported = manifest
            .map(|m| import_states(m, &boards))
            .unwrap_or_default();
        let locks = boards
            .keys()
            .map(|k| (k.clone(), Arc::new(Mutex::new(()))))
            .collect();
        Ok(Self {
            dir,
            boards,
            imported,
            locks,
            pairs_lock: Mutex::new(()),
            log_lock: Mutex::new(()),
            taxonomy: cfg.taxonomy.clone(),
            token: cfg.service.token.clone(),
            preview_scale: cfg.service.preview_scale,
            detector,
        })
    }

    fn entry(&self, id: &str) -> Result<&BoardEntry, ApiError> {
        self.boards
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown board {id}")))
    }

    fn doc_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn load(&self, id: &str) -> Result<AnnotationState, ApiError> {
        let entry = self.entry(id)?;
        let p = self.doc_path(id);
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(ApiError::internal)?;
            return serde_json::from_str(&text).map_err(ApiError::internal);
        }
        Ok(self
            .imported
            .get(id)
            .cloned()
            .unwrap_or_else(|| AnnotationState::empty(entry, id)))
    }

    fn save(&self, state: &AnnotationState, action: &str) -> Result<(), ApiError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(ApiError::internal)?;
        serde_json::to_writer_pretty(&mut tmp, state).map_err(ApiError::internal)?;
        tmp.as_file().sync_all().map_err(ApiError::internal)?;
        tmp.persist(self.doc_path(&state.board))
            .map_err(|e| ApiError::internal(e.error))?;

        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = serde_json::json!({
            "time": ts,
            "board": state.board,
            "revision": state.revision,
            "action": action,
        });
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("edits.log"))
            .map_err(ApiError::internal)?;
        writeln!(f, "{line}").map_err(ApiError::internal)
    }

    fn lock(&self, id: &str) -> Result<Arc<Mutex<()>>, ApiError> {
        self.locks
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown board {id}")))
    }

    pub fn update(&self, id: &str, upd: AnnotationUpdate) -> Result<AnnotationState, ApiError> {
        let lock = self.lock(id)?;
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let cur = self.load(id)?;
        if upd.revision != cur.revision {
            return Err(ApiError::Conflict(Box::new(cur)));
        }
        let mut next = cur.clone();
        let mut seen = BTreeSet::new();
        let mut geometry_changed = false;
        let mut boxes = Vec::with_capacity(upd.boxes.len());
        for e in upd.boxes {
            e.bbox
                .check_within(cur.width, cur.height)
                .map_err(|err| ApiError::BadRequest(err.to_string()))?;
            if e.length_mm == Some(0) {
                return Err(ApiError::BadRequest("length_mm must be >= 1".into()));
            }
            match e.id {
                Some(bid) => {
                    if !seen.insert(bid) {
                        return Err(ApiError::BadRequest(format!("box {bid} listed twice")));
                    }
                    let old = cur
                        .boxes
                        .iter()
                        .find(|b| b.id == bid)
                        .ok_or_else(|| ApiError::BadRequest(format!("unknown box {bid}")))?;
                    let mut b = old.clone();
                    if e.bbox != old.bbox {
                        b.bbox = e.bbox;
                        b.provenance.bbox = Provenance::Human;
                        geometry_changed = true;
                    }
                    if e.length_mm != old.length_mm {
                        b.length_mm = e.length_mm;
                        b.provenance.length_mm = Provenance::Human;
                    }
                    if e.maturity != old.maturity {
                        b.maturity = e.maturity;
                        b.provenance.maturity = Provenance::Human;
                    }
                    boxes.push(b);
                }
                None => {
                    geometry_changed = true;
                    boxes.push(AnnotatedBox {
                        id: next.alloc_id(),
                        index: 0,
                        bbox: e.bbox,
                        length_mm: e.length_mm,
                        maturity: e.maturity,
                        score: None,
                        provenance: FieldProvenance::all(Provenance::Human),
                    });
                }
            }
        }
        if cur.boxes.iter().any(|b| !seen.contains(&b.id)) {
            geometry_changed = true;
        }
        next.boxes = boxes;
        next.view = upd.view;
        next.event = upd.event;
        next.net = upd.net;
        next.board_no = upd.board_no;
        if geometry_changed {
            next.reindex();
        } else {
            next.sort();
        }
        next.revision += 1;
        self.save(&next, "edit")?;
        Ok(next)
    }

    /// Merge automatic boxes into a board. Boxes with any human-entered
    /// field are kept untouched; purely automatic ones are replaced.
    pub fn merge_detections(
        &self,
        id: &str,
        found: Vec<(BBox, f32)>,
    ) -> Result<AnnotationState, ApiError> {
        let lock = self.lock(id)?;
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut st = self.load(id)?;
        st.boxes.retain(|b| b.provenance.any_human());
        let kept: Vec<BBox> = st.boxes.iter().map(|b| b.bbox).collect();
        for (bbox, score) in found {
            let mut overlaps = false;
            for k in &kept {
                if iou(&bbox, k).map_err(ApiError::internal)? > DETECT_OVERLAP_IOU {
                    overlaps = true;
                    break;
                }
            }
            if overlaps {
                continue;
            }
            let bid = st.alloc_id();
            st.boxes.push(AnnotatedBox {
                id: bid,
                index: 0,
                bbox,
                length_mm: None,
                maturity: None,
                score: Some(score),
                provenance: FieldProvenance::all(Provenance::Auto),
            });
        }
        st.reindex();
        st.revision += 1;
        self.save(&st, "detect")?;
        Ok(st)
    }

    pub fn set_pair(
        &self,
        req: &PairRequest,
    ) -> Result<(AnnotationState, AnnotationState), ApiError> {
        if req.dorsal == req.lateral {
            return Err(ApiError::BadRequest(
                "a board cannot be paired with itself".into(),
            ));
        }
        self.entry(&req.dorsal)?;
        self.entry(&req.lateral)?;
        let _p = self.pairs_lock.lock().unwrap_or_else(|e| e.into_inner());
        // Pair links only change under `pairs_lock`, so former partners can
        // be read before the board locks are taken.
        let mut affected = BTreeSet::new();
        for b in [&req.dorsal, &req.lateral] {
            affected.insert(b.clone());
            if let Some(p) = self.load(b)?.pair {
                if self.boards.contains_key(&p) {
                    affected.insert(p);
                }
            }
        }
        let locks: Vec<_> = affected
            .iter()
            .map(|b| self.lock(b))
            .collect::<Result<_, _>>()?;
        let _guards: Vec<_> = locks
            .iter()
            .map(|l| l.lock().unwrap_or_else(|e| e.into_inner()))
            .collect();
        let mut out = BTreeMap::new();
        for b in &affected {
            let mut st = self.load(b)?;
            let (view, pair) = if *b == req.dorsal {
                (Some(View::Dorsal), Some(req.lateral.clone()))
            } else if *b == req.lateral {
                (Some(View::Lateral), Some(req.dorsal.clone()))
            } else {
                (st.view, None)
            };
            if st.view != view || st.pair != pair {
                st.view = view;
                st.pair = pair;
                st.revision += 1;
                self.save(&st, "pair")?;
            }
            out.insert(b.clone(), st);
        }
        Ok((
            out.remove(&req.dorsal).unwrap(),
            out.remove(&req.lateral).unwrap(),
        ))
    }

    /// Specimen table of every labelled box on a paired board, with rows
    /// whose partner is missing removed as in ingestion. Returns the CSV and
    /// the number of boxes left out.
    pub fn export(&self) -> Result<(Vec<u8>, usize), ApiError> {
        let mut states = BTreeMap::new();
        for id in self.boards.keys() {
            states.insert(id.clone(), self.load(id)?);
        }
        let mut records = Vec::new();
        let mut images = Vec::new();
        let mut skipped = 0usize;
        for (id, st) in &states {
            let entry = &self.boards[id];
            let partner = st.pair.as_ref().and_then(|p| states.get(p));
            let (Some(view), Some(event), Some(net), Some(board_no), Some(partner)) =
                (st.view, st.event, st.net, st.board_no, partner)
            else {
                skipped += st.boxes.len();
                continue;
            };
            images.push(BoardImage {
                file: id.clone(),
                path: entry.path.clone(),
                cruise: st.cruise.clone(),
                width: st.width,
                height: st.height,
                view,
                paired_file: Some(partner.board.clone()),
            });
            for b in &st.boxes {
                let (Some(length_mm), Some(maturity)) = (b.length_mm, b.maturity.clone()) else {
                    skipped += 1;
                    continue;
                };
                let ids = SpecimenId::new(&st.cruise, id, b.index as u32).and_then(|a| {
                    SpecimenId::new(&partner.cruise, &partner.board, b.index as u32).map(|p| (a, p))
                });
                let Ok((sid, alt)) = ids else {
                    skipped += 1;
                    continue;
                };
                let rec = SpecimenRecord {
                    length_mm,
                    maturity,
                    cruise: st.cruise.clone(),
                    bbox: b.bbox,
                    id: sid,
                    alt_id: alt,
                    view,
                    event,
                    net,
                    board: board_no,
                };
                if rec.validate().is_err() {
                    skipped += 1;
                    continue;
                }
                records.push(rec);
            }
        }
        let manifest = DatasetManifest::new(records, images, self.taxonomy.clone())
            .map_err(ApiError::internal)?;
        let paired = pair_views(&manifest).map_err(ApiError::internal)?;
        skipped += paired.report.dropped.len();
        let mut buf = Vec::new();
        write_manifest(&paired.manifest, &mut buf).map_err(ApiError::internal)?;
        Ok((buf, skipped))
    }

    pub fn list(&self) -> Result<Vec<BoardSummary>, ApiError> {
        self.boards
            .iter()
            .map(|(id, e)| {
                let st = self.load(id)?;
                Ok(BoardSummary {
                    id: id.clone(),
                    width: e.width,
                    height: e.height,
                    cruise: st.cruise,
                    view: st.view,
                    pair: st.pair,
                    boxes: st.boxes.len(),
                    revision: st.revision,
                })
            })
            .collect()
    }

    fn render_image(&self, id: &str, q: &ImageQuery) -> Result<Vec<u8>, ApiError> {
        let entry = self.entry(id)?;
        let img = image::open(&entry.path)
            .map_err(ApiError::internal)?
            .to_rgb8();
        let out = if let Some(crop) = &q.crop {
            let v: Vec<u32> = crop
                .split(',')
                .map(|t| t.trim().parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| ApiError::BadRequest(format!("crop must be x,y,w,h, got `{crop}`")))?;
            let [x, y, w, h] = v[..] else {
                return Err(ApiError::BadRequest(format!(
                    "crop must be x,y,w,h, got `{crop}`"
                )));
            };
            let b = BBox::new(x, y, w, h).map_err(|e| ApiError::BadRequest(e.to_string()))?;
            b.check_within(entry.width, entry.height)
                .map_err(|e| ApiError::BadRequest(e.to_string()))?;
            image::imageops::crop_imm(&img, x, y, w, h).to_image()
        } else {
            let s = q.scale.unwrap_or(self.preview_scale);
            if !(s > 0.0 && s <= 1.0) {
                return Err(ApiError::BadRequest(format!(
                    "scale must be within (0, 1], got {s}"
                )));
            }
            let w = ((entry.width as f32 * s).round() as u32).max(1);
            let h = ((entry.height as f32 * s).round() as u32).max(1);
            resize_area(&img, w, h)
        };
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(out)
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(ApiError::internal)?;
        Ok(buf.into_inner())
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(Box<AnnotationState>),
    Unavailable(String),
    Unauthorized,
    Internal(String),
}

impl ApiError {
    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, serde_json::json!({ "error": m })),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, serde_json::json!({ "error": m })),
            ApiError::Conflict(cur) => (
                StatusCode::CONFLICT,
                serde_json::json!({
                    "error": "revision is stale",
                    "revision": cur.revision,
                    "current": *cur,
                }),
            ),
            ApiError::Unavailable(m) => (
                StatusCode::SERVICE_UNAVAILABLE,
                serde_json::json!({ "error": m }),
            ),
            ApiError::Unauthorized => (
                StatusCode::UNAUTHORIZED,
                serde_json::json!({ "error": "missing or wrong token" }),
            ),
            ApiError::Internal(m) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                serde_json::json!({ "error": m }),
            ),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct ImageQuery {
    pub scale: Option<f32>,
    pub crop: Option<String>,
}

type Shared = State<Arc<Service>>;

async fn list_boards(State(s): Shared) -> Result<Json<Vec<BoardSummary>>, ApiError> {
    Ok(Json(s.list()?))
}

async fn board_image(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let png = tokio::task::spawn_blocking(move || s.render_image(&id, &q))
        .await
        .map_err(ApiError::internal)??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_annotations(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<AnnotationState>, ApiError> {
    Ok(Json(s.load(&id)?))
}

async fn put_annotations(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
    Json(upd): Json<AnnotationUpdate>,
) -> Result<Json<AnnotationState>, ApiError> {
    Ok(Json(s.update(&id, upd)?))
}

async fn run_detect(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<AnnotationState>, ApiError> {
    let path = s.entry(&id)?.path.clone();
    let detector = s.detector.clone().ok_or_else(|| {
        ApiError::Unavailable("no segmenter loaded; run `krill train-seg`".into())
    })?;
    let file = id.clone();
    let found = tokio::task::spawn_blocking(move || -> Result<Vec<(BBox, f32)>> {
        let img = image::open(&path)?;
        detector.detect(&file, &img)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(s.merge_detections(&id, found)?))
}

async fn put_pairs(
    State(s): Shared,
    Json(req): Json<PairRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let (d, l) = s.set_pair(&req)?;
    Ok(Json(serde_json::json!({ "dorsal": d, "lateral": l })))
}

async fn export(State(s): Shared) -> Result<Response, ApiError> {
    let (csv, skipped) = s.export()?;
    let mut resp = Response::new(Body::from(csv));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("text/csv"));
    h.insert(
        header::CONTENT_DISPOSITION,
        HeaderValue::from_static("attachment; filename=\"specimens.csv\""),
    );
    h.insert("x-skipped-rows", HeaderValue::from(skipped));
    Ok(resp)
}

async fn taxonomy(State(s): Shared) -> Json<Taxonomy> {
    Json(s.taxonomy.clone())
}

async fn auth(State(s): Shared, req: Request, next: Next) -> Response {
    if let Some(tok) = &s.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == tok);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/boards", get(list_boards))
        .route("/boards/{id}/image", get(board_image))
        .route(
            "/boards/{id}/annotations",
            get(get_annotations).put(put_annotations),
        )
        .route("/boards/{id}/detect", post(run_detect))
        .route("/pairs", put(put_pairs))
        .route("/export", get(export))
        .route("/taxonomy", get(taxonomy))
        .layer(middleware::from_fn_with_state(service.clone(), auth))
        .with_state(service)
}

pub async fn serve(service: Arc<Service>, bind: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .with_context(|| format!("binding {bind}"))?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            if let Err(e) = tokio::signal::ctrl_c().await {
                warn!("signal handler: {e}");
            }
        })
        .await?;
    Ok(())
}
