use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use thiserror::Error;

use super::{sort_queue, ReviewItem, ReviewStatus};
use crate::model::GroundTruthLabel;
use crate::ndjson::{self, NdjsonError};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no review item for tile {0}")]
    NotFound(String),
    #[error("review item {0} is already resolved")]
    AlreadyResolved(String),
    #[error("invalid correction: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] NdjsonError),
}

/// File-backed review queue. Corrections are appended to the ground-truth
/// manifest before the queue file is rewritten, so a crash can at worst leave
/// an item pending whose label is already recorded.
pub struct ReviewStore {
    queue_path: PathBuf,
    manifest_path: PathBuf,
    items: Mutex<Vec<ReviewItem>>,
}

impl ReviewStore {
    pub fn open(
        queue_path: impl Into<PathBuf>,
        manifest_path: impl Into<PathBuf>,
    ) -> Result<Self, ReviewError> {
        let queue_path = queue_path.into();
        let mut items: Vec<ReviewItem> = ndjson::read(&queue_path)?;
        sort_queue(&mut items);
        Ok(Self {
            queue_path,
            manifest_path: manifest_path.into(),
            items: Mutex::new(items),
        })
    }

    pub fn queue_path(&self) -> &Path {
        &self.queue_path
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<ReviewItem>> {
        self.items.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Replaces pending items with `fresh`, keeping items already resolved.
    /// Fresh items for resolved tiles are dropped.
    pub fn merge_queue(&self, fresh: Vec<ReviewItem>) -> Result<usize, ReviewError> {
        let mut items = self.lock();
        let mut next: Vec<ReviewItem> = items
            .iter()
            .filter(|i| i.status != ReviewStatus::Pending)
            .cloned()
            .collect();
        for item in fresh {
            if !next.iter().any(|r| r.tile_id == item.tile_id) {
                next.push(item);
            }
        }
        sort_queue(&mut next);
        ndjson::write_all(&self.queue_path, &next)?;
        let pending = next
            .iter()
            .filter(|i| i.status == ReviewStatus::Pending)
            .count();
        *items = next;
        Ok(pending)
    }

    /// Pending items, lowest confidence first.
    pub fn pending(&self, limit: Option<usize>) -> Vec<ReviewItem> {
        self.lock()
            .iter()
            .filter(|i| i.status == ReviewStatus::Pending)
            .take(limit.unwrap_or(usize::MAX))
            .cloned()
            .collect()
    }

    pub fn all(&self) -> Vec<ReviewItem> {
        self.lock().clone()
    }

    pub fn get(&self, tile_id: &str) -> Option<ReviewItem> {
        self.lock().iter().find(|i| i.tile_id == tile_id).cloned()
    }

    /// Resolves a pending item. The status becomes `confirmed` when the
    /// correction agrees with the prediction's label, `corrected` otherwise.
    pub fn apply_correction(
        &self,
        tile_id: &str,
        correction: GroundTruthLabel,
        reviewer: &str,
    ) -> Result<ReviewItem, ReviewError> {
        correction
            .validate()
            .map_err(|e| ReviewError::Invalid(e.to_string()))?;
        if correction.tile_id != tile_id {
            return Err(ReviewError::Invalid(format!(
                "correction is for tile {}, not {tile_id}",
                correction.tile_id
            )));
        }
        let mut items = self.lock();
        let idx = items
            .iter()
            .position(|i| i.tile_id == tile_id)
            .ok_or_else(|| ReviewError::NotFound(tile_id.to_string()))?;
        if items[idx].status != ReviewStatus::Pending {
            return Err(ReviewError::AlreadyResolved(tile_id.to_string()));
        }

        ndjson::append(&self.manifest_path, std::slice::from_ref(&correction))?;

        let agrees = items[idx]
            .prediction
            .as_ref()
            .is_some_and(|p| p.label_projection() == correction.label_projection());
        let mut updated = items.clone();
        let item = &mut updated[idx];
        item.status = if agrees {
            ReviewStatus::Confirmed
        } else {
            ReviewStatus::Corrected
        };
        item.correction = Some(correction);
        item.reviewer = Some(reviewer.to_string());
        item.updated_at = Utc::now();
        let result = item.clone();
        ndjson::write_all(&self.queue_path, &updated)?;
        *items = updated;
        Ok(result)
    }
}
