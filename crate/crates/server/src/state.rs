//! Session state: the live index, sample payloads, and the on-disk record
//! (`base.json` + `journal.jsonl`) that lets a restart rebuild both.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use ramseg_api::ErrorCode;
use ramseg_core::data::{load_manifest, raster, ClassMap, ImageSlice, LabelMask, Provenance, SampleRecord};
use ramseg_core::embedding::{load_backbone, Embedding};
use ramseg_core::index::{FlatIndex, SharedIndex};
use ramseg_core::seg::{load_engine, InMemoryStore, Pipeline};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::config::ServerConfig;
use crate::error::AppError;

const BASE_FILE: &str = "base.json";
const JOURNAL_FILE: &str = "journal.jsonl";
const SPOOL_DIR: &str = "accepted";
const INDEX_FILE: &str = "index.bin";

/// The dataset the current index was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseRecord {
    manifest: PathBuf,
    version: u64,
}

/// One accepted annotation; paths relative to the samples directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: String,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp_ms: u64,
    #[serde(default = "user_accepted")]
    pub source: String,
    pub subject_id: String,
    pub slice_index: u32,
    pub modality: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn user_accepted() -> String {
    "user-accepted".into()
}

/// A validated accept, ready to persist.
pub struct Acceptance {
    pub record: SampleRecord,
    pub embedding: Embedding,
}

pub struct AppState {
    pub config: ServerConfig,
    pub pipeline: Arc<Pipeline>,
    pub index: SharedIndex,
    store: RwLock<Arc<InMemoryStore>>,
    dataset_count: AtomicUsize,
    accepted_count: AtomicUsize,
    /// Serializes index-changing operations (build, accept).
    pub writer: tokio::sync::Mutex<()>,
    pub permits: Arc<Semaphore>,
    pub diagnostics: Vec<String>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("config", &self.config)
            .field("index_len", &self.index.snapshot().len())
            .finish()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> AppError {
    AppError::new(ErrorCode::Internal, format!("{}: {e}", path.display()))
}

/// Ids become file names in the spool.
pub fn validate_id(id: &str) -> Result<(), AppError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(AppError::new(
            ErrorCode::InvalidId,
            format!("invalid id `{id}`: use 1-128 of [A-Za-z0-9_.-], not starting with '.'"),
        ))
    }
}

impl AppState {
    /// Loads models, then restores the last built dataset and replays accepted
    /// annotations.
    pub fn open(config: ServerConfig) -> Result<Arc<Self>, AppError> {
        config.preprocess.validate()?;
        std::fs::create_dir_all(config.samples_dir.join(SPOOL_DIR))
            .map_err(|e| io_err(&config.samples_dir, e))?;
        let mut backbone_config = config.backbone_config.clone();
        backbone_config.embed_resolution = config.preprocess.embed_resolution;
        let loaded = load_backbone(&config.backbone, &backbone_config)?;
        let engine = load_engine(&config.engine, &config.engine_config)?;
        let dim = loaded.backbone.dim();
        let pipeline = Arc::new(Pipeline::new(engine, loaded.backbone, config.preprocess));
        let permits = Arc::new(Semaphore::new(config.max_inflight.max(1)));
        let state = Arc::new(Self {
            index: SharedIndex::new(FlatIndex::new(dim)),
            store: RwLock::new(Arc::new(InMemoryStore::default())),
            dataset_count: AtomicUsize::new(0),
            accepted_count: AtomicUsize::new(0),
            writer: tokio::sync::Mutex::new(()),
            permits,
            diagnostics: loaded.diagnostic.into_iter().collect(),
            pipeline,
            config,
        });
        state.restore()?;
        Ok(state)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.samples_dir.join(name)
    }

    pub fn store(&self) -> Arc<InMemoryStore> {
        Arc::clone(&self.store.read())
    }

    pub fn class_map(&self) -> ClassMap {
        use ramseg_core::seg::SampleStore;
        self.store().class_map()
    }

    pub fn dataset_count(&self) -> usize {
        self.dataset_count.load(Ordering::SeqCst)
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted_count.load(Ordering::SeqCst)
    }

    fn restore(&self) -> Result<(), AppError> {
        let base_path = self.path(BASE_FILE);
        if !base_path.is_file() {
            return Ok(());
        }
        let base: BaseRecord = serde_json::from_slice(&std::fs::read(&base_path).map_err(|e| io_err(&base_path, e))?)
            .map_err(|e| AppError::new(ErrorCode::Internal, format!("{}: {e}", base_path.display())))?;
        let manifest = load_manifest(&base.manifest)?;
        let records = manifest.load_records()?;
        let index = match self.saved_index(&records, base.version) {
            Some(index) => index,
            None => self.embed_all(&records)?.with_version(base.version),
        };
        let count = records.len();
        self.install(index, InMemoryStore::from_records(manifest.class_map.clone(), records), count);
        let replayed = self.replay_journal()?;
        tracing::info!(
            manifest = %base.manifest.display(),
            replayed,
            version = self.index.snapshot().version(),
            "restored session"
        );
        Ok(())
    }

    fn install(&self, index: FlatIndex, store: InMemoryStore, count: usize) {
        *self.store.write() = Arc::new(store);
        self.index.replace_exact(index);
        self.dataset_count.store(count, Ordering::SeqCst);
        self.accepted_count.store(0, Ordering::SeqCst);
    }

    fn index_path(&self) -> PathBuf {
        self.config.index_path.clone().unwrap_or_else(|| self.path(INDEX_FILE))
    }

    fn embed_all(&self, records: &[SampleRecord]) -> Result<FlatIndex, AppError> {
        let mut index = FlatIndex::new(self.pipeline.backbone().dim());
        for r in records {
            let e = self.pipeline.embed(&r.image)?;
            index.add(r.id.clone(), e.as_slice())?;
        }
        Ok(index)
    }

    /// The index file written at build time, if it still matches the dataset.
    fn saved_index(&self, records: &[SampleRecord], version: u64) -> Option<FlatIndex> {
        let path = self.index_path();
        let index = match FlatIndex::load(&path) {
            Ok(index) => index,
            Err(e) => {
                tracing::warn!("{}: {e}; re-embedding the dataset", path.display());
                return None;
            }
        };
        let matches = index.version() == version
            && index.dim() == self.pipeline.backbone().dim()
            && index.ids().iter().eq(records.iter().map(|r| &r.id));
        if !matches {
            tracing::warn!("{} does not match the dataset; re-embedding", path.display());
        }
        matches.then_some(index)
    }

    /// Re-applies journal entries in order. A torn final line (crash while
    /// appending) is dropped with a warning.
    fn replay_journal(&self) -> Result<usize, AppError> {
        let path = self.path(JOURNAL_FILE);
        let Ok(file) = std::fs::File::open(&path) else {
            return Ok(0);
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(&path, e))?;
        let mut replayed = 0;
        for (n, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: JournalEntry = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(e) if n + 1 == lines.len() => {
                    tracing::warn!("dropping torn journal tail: {e}");
                    let mut kept = lines[..n].join("\n");
                    if !kept.is_empty() {
                        kept.push('\n');
                    }
                    write_atomic(&path, kept.as_bytes())?;
                    break;
                }
                Err(e) => {
                    return Err(AppError::new(
                        ErrorCode::Internal,
                        format!("{} line {}: {e}", path.display(), n + 1),
                    ))
                }
            };
            let record = self.load_spooled(&entry)?;
            let embedding = self.pipeline.embed(&record.image)?;
            self.apply(Acceptance { record, embedding })?;
            replayed += 1;
        }
        Ok(replayed)
    }

    fn load_spooled(&self, entry: &JournalEntry) -> Result<SampleRecord, AppError> {
        let pixels = raster::read_image(&self.config.samples_dir.join(&entry.image))?;
        let labels = raster::read_mask(&self.config.samples_dir.join(&entry.mask))?;
        let image = ImageSlice::new(pixels, &entry.subject_id, entry.slice_index, &entry.modality)?;
        let mask = LabelMask::new(labels, self.class_map())?;
        Ok(SampleRecord::new(&entry.id, image, mask, Provenance::UserAccepted)?)
    }

    /// Store first, then index: a reader that sees the new id can always
    /// fetch its payload.
    fn apply(&self, acceptance: Acceptance) -> Result<u64, AppError> {
        let Acceptance { record, embedding } = acceptance;
        let id = record.id.clone();
        {
            let mut guard = self.store.write();
            let mut next = InMemoryStore::clone(&guard);
            if !next.insert(record) {
                return Err(AppError::new(ErrorCode::DuplicateId, format!("id `{id}` already exists")));
            }
            *guard = Arc::new(next);
        }
        let version = self.index.add(id, embedding.as_slice())?;
        self.accepted_count.fetch_add(1, Ordering::SeqCst);
        Ok(version)
    }

    /// Rebuilds from a manifest. Call with `writer` held. Returns the new
    /// version, row count, and where the old journal was archived.
    pub fn rebuild(&self, manifest_path: &Path) -> Result<(u64, usize, Option<PathBuf>), AppError> {
        let manifest_path = std::path::absolute(manifest_path).map_err(|e| io_err(manifest_path, e))?;
        let manifest = load_manifest(&manifest_path)?;
        let records = manifest.load_records()?;
        let version = self.index.snapshot().version() + 1;
        let index = self.embed_all(&records)?.with_version(version);
        let count = records.len();
        let store = InMemoryStore::from_records(manifest.class_map.clone(), records);
        let index_path = self.index_path();
        index.save(&index_path)?;
        let base = BaseRecord {
            manifest: manifest_path,
            version,
        };
        let base_path = self.path(BASE_FILE);
        write_atomic(&base_path, &serde_json::to_vec_pretty(&base).expect("base record serializes"))?;
        let journal = self.path(JOURNAL_FILE);
        let archived = if journal.is_file() {
            let target = self.path(&format!("journal.v{}.jsonl", version - 1));
            std::fs::rename(&journal, &target).map_err(|e| io_err(&journal, e))?;
            Some(target)
        } else {
            None
        };
        self.install(index, store, count);
        Ok((version, count, archived))
    }

    /// Persists an accepted annotation (spool files, then a journal line),
    /// then makes it live. Call with `writer` held.
    pub fn accept(&self, acceptance: Acceptance) -> Result<u64, AppError> {
        let id = acceptance.record.id.clone();
        if self.store().contains(&id) {
            return Err(AppError::new(ErrorCode::DuplicateId, format!("id `{id}` already exists")));
        }
        let image_rel = PathBuf::from(SPOOL_DIR).join(format!("{id}.npy"));
        let mask_rel = PathBuf::from(SPOOL_DIR).join(format!("{id}_mask.png"));
        let image_path = self.config.samples_dir.join(&image_rel);
        let mask_path = self.config.samples_dir.join(&mask_rel);
        write_atomic(&image_path, &raster::encode_image_npy(acceptance.record.image.pixels()))?;
        write_atomic(&mask_path, &raster::encode_mask_png(acceptance.record.mask.labels()))?;
        let timestamp_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| u64::try_from(d.as_millis()).unwrap_or(u64::MAX));
        let entry = JournalEntry {
            id,
            timestamp_ms,
            source: user_accepted(),
            subject_id: acceptance.record.image.subject_id.clone(),
            slice_index: acceptance.record.image.slice_index,
            modality: acceptance.record.image.modality.clone(),
            image: image_rel,
            mask: mask_rel,
        };
        let journal = self.path(JOURNAL_FILE);
        let mut line = serde_json::to_vec(&entry).expect("journal entry serializes");
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal)
            .map_err(|e| io_err(&journal, e))?;
        file.write_all(&line).map_err(|e| io_err(&journal, e))?;
        file.sync_all().map_err(|e| io_err(&journal, e))?;
        self.apply(acceptance)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
