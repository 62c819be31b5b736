//! On-disk layout of a data directory, the per-directory lock and the run
//! log.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use pvscan_core::imagery::{decode_png, SceneRecord, Tile, TileRecord};
use pvscan_core::inference::InferenceRecord;
use pvscan_core::model::GroundTruthLabel;
use pvscan_core::ndjson;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
#[error("data directory {0} is locked by another command (remove the .lock file if no command is running)")]
pub struct LockedError(pub PathBuf);

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn sites(&self) -> PathBuf {
        self.root.join("sites.ndjson")
    }
    pub fn scenes_manifest(&self) -> PathBuf {
        self.root.join("scenes.ndjson")
    }
    pub fn scene_png(&self, scene_id: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{scene_id}.png"))
    }
    pub fn tiles_manifest(&self) -> PathBuf {
        self.root.join("tiles.ndjson")
    }
    pub fn tile_png(&self, record: &TileRecord) -> PathBuf {
        self.root.join(record.relative_path())
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.ndjson")
    }
    pub fn auto_labels(&self) -> PathBuf {
        self.root.join("auto_labels.ndjson")
    }
    pub fn journal(&self) -> PathBuf {
        self.root.join("journal.ndjson")
    }
    pub fn map_cache(&self) -> PathBuf {
        self.root.join("cache").join("maps")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn latest_report(&self) -> PathBuf {
        self.reports_dir().join("latest.json")
    }
    pub fn review_queue(&self) -> PathBuf {
        self.root.join("triage").join("queue.ndjson")
    }
    pub fn triage_summary(&self) -> PathBuf {
        self.root.join("triage").join("summary.json")
    }
    pub fn triage_config(&self) -> PathBuf {
        self.root.join("triage").join("config.json")
    }
    pub fn export_dir(&self) -> PathBuf {
        self.root.join("export")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs.ndjson")
    }
    fn lock_path(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn ensure(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.root)
    }

    /// Exclusive lock for one CLI stage; released on drop.
    pub fn lock(&self) -> anyhow::Result<DirLock> {
        self.ensure()
            .with_context(|| format!("cannot create data directory {}", self.root.display()))?;
        let path = self.lock_path();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(LockedError(self.root.clone()).into())
            }
            Err(e) => Err(e).with_context(|| format!("cannot create {}", path.display())),
        }
    }

    pub fn tile_records(&self) -> anyhow::Result<Vec<TileRecord>> {
        Ok(ndjson::read(&self.tiles_manifest())?)
    }

    pub fn load_tile(&self, record: &TileRecord) -> anyhow::Result<Tile> {
        let path = self.tile_png(record);
        let bytes =
            std::fs::read(&path).with_context(|| format!("cannot read tile {}", path.display()))?;
        let raster = decode_png(&bytes)
            .with_context(|| format!("tile {} is not a valid PNG", path.display()))?;
        Ok(Tile {
            tile_id: record.tile_id.clone(),
            scene_id: record.scene_id.clone(),
            row: record.row,
            col: record.col,
            raster,
        })
    }

    pub fn scene_records(&self) -> anyhow::Result<Vec<SceneRecord>> {
        Ok(ndjson::read(&self.scenes_manifest())?)
    }

    pub fn journal_records(&self) -> anyhow::Result<Vec<InferenceRecord>> {
        Ok(ndjson::read(&self.journal())?)
    }

    /// Most recent journal record per tile.
    pub fn latest_predictions(&self) -> anyhow::Result<HashMap<String, InferenceRecord>> {
        Ok(self
            .journal_records()?
            .into_iter()
            .map(|r| (r.tile_id.clone(), r))
            .collect())
    }

    /// Most recent label per tile from the ground-truth manifest.
    pub fn labels_latest(&self) -> anyhow::Result<BTreeMap<String, GroundTruthLabel>> {
        let labels: Vec<GroundTruthLabel> = ndjson::read(&self.labels())?;
        Ok(pvscan_core::finetune::latest_labels(&labels))
    }
}

pub struct DirLock {
    path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Fetch,
    Slice,
    LabelsImport,
    Synth,
    Predict,
    Evaluate,
    Triage,
    Export,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: Uuid,
    pub stage: Stage,
    pub config: serde_json::Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub counts: BTreeMap<String, u64>,
}

impl RunRecord {
    pub fn start(stage: Stage, config: serde_json::Value) -> Self {
        let now = Utc::now();
        Self {
            run_id: Uuid::new_v4(),
            stage,
            config,
            started_at: now,
            finished_at: now,
            counts: BTreeMap::new(),
        }
    }

    pub fn count(&mut self, key: &str, value: usize) -> &mut Self {
        self.counts.insert(key.to_string(), value as u64);
        self
    }

    /// Stamps the finish time and appends the record to the run log.
    pub fn finish(mut self, data: &DataDir) -> anyhow::Result<Self> {
        self.finished_at = Utc::now();
        ndjson::append(&data.runs(), std::slice::from_ref(&self))?;
        Ok(self)
    }
}
