//! Static-map client with a content-addressed disk cache.
//!
//! Cache entries are keyed by provider, point (rounded to 6 decimals), zoom,
//! size and map type, and never expire. Concurrent requests for the same key
//! collapse into one upstream call.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{decode_png, encode_png, SceneImage, GRID};
use crate::geo::GeoPoint;
use crate::ndjson::write_atomic;
use crate::retry::RetryPolicy;

pub const DEFAULT_BASE_URL: &str = "https://maps.googleapis.com/maps/api/staticmap";
pub const DEFAULT_KEY_ENV: &str = "MAPS_API_KEY";

const MAX_IMAGE_BYTES: u64 = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("scene size {0} must be positive and divisible by 4")]
    InvalidSize(u32),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider returned HTTP {status} after {attempts} attempts")]
    Http { status: u16, attempts: u32 },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },
    #[error("response is not a usable image: {0}")]
    Decode(String),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapClientConfig {
    pub provider: String,
    pub base_url: String,
    pub map_type: String,
    /// Environment variable holding the API key.
    pub key_env: String,
    pub cache_dir: PathBuf,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl MapClientConfig {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            provider: "google-static".into(),
            base_url: DEFAULT_BASE_URL.into(),
            map_type: "satellite".into(),
            key_env: DEFAULT_KEY_ENV.into(),
            cache_dir: cache_dir.into(),
            retry: RetryPolicy::default(),
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Default)]
pub struct FetchStats {
    pub network_calls: AtomicUsize,
    pub retries: AtomicUsize,
    pub cache_hits: AtomicUsize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    center: GeoPoint,
    zoom: u8,
    size: u32,
    fetched_at: DateTime<Utc>,
}

pub struct StaticMapClient {
    cfg: MapClientConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    pub stats: FetchStats,
}

impl StaticMapClient {
    /// Reads the API key from the configured environment variable. A missing
    /// key is only an error once a request actually has to go upstream.
    pub fn new(cfg: MapClientConfig) -> Self {
        let api_key = std::env::var(&cfg.key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: MapClientConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Self {
            cfg,
            api_key,
            agent,
            inflight: Mutex::new(HashMap::new()),
            stats: FetchStats::default(),
        }
    }

    pub fn cache_key(&self, point: GeoPoint, zoom: u8, size: u32) -> String {
        let raw = format!(
            "{}|{:.6}|{:.6}|{}|{}|{}",
            self.cfg.provider, point.lat, point.lon, zoom, size, self.cfg.map_type
        );
        hex::encode(Sha256::digest(raw.as_bytes()))
    }

    fn cache_paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (
            self.cfg.cache_dir.join(format!("{key}.png")),
            self.cfg.cache_dir.join(format!("{key}.json")),
        )
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut map = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key.to_string()).or_default().clone()
    }

    /// Square scene of `size` pixels centered on `point`.
    pub fn fetch_scene(
        &self,
        point: GeoPoint,
        zoom: u8,
        size: u32,
        region_name: &str,
    ) -> Result<SceneImage, FetchError> {
        if size == 0 || !size.is_multiple_of(GRID) {
            return Err(FetchError::InvalidSize(size));
        }
        let key = self.cache_key(point, zoom, size);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let (png_path, meta_path) = self.cache_paths(&key);
        if let Some(scene) = read_cached(&png_path, &meta_path, region_name)? {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(scene);
        }

        let bytes = self.download(point, zoom, size)?;
        let raster = image::load_from_memory(&bytes)
            .map(|img| img.to_rgba8())
            .map_err(|e| FetchError::Decode(e.to_string()))?;
        if raster.dimensions() != (size, size) {
            return Err(FetchError::Decode(format!(
                "expected {size}x{size}, got {}x{}",
                raster.width(),
                raster.height()
            )));
        }
        let fetched_at = Utc::now();
        let meta = CacheMeta {
            center: point,
            zoom,
            size,
            fetched_at,
        };
        let png = encode_png(&raster).map_err(|e| FetchError::Decode(e.to_string()))?;
        write_atomic(&png_path, &png)?;
        write_atomic(
            &meta_path,
            &serde_json::to_vec(&meta).expect("meta serializes"),
        )?;
        SceneImage::new(raster, point, zoom, region_name, fetched_at)
            .map_err(|e| FetchError::Decode(e.to_string()))
    }

    fn download(&self, point: GeoPoint, zoom: u8, size: u32) -> Result<Vec<u8>, FetchError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| FetchError::Auth(format!("{} is not set", self.cfg.key_env)))?;
        let policy = &self.cfg.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.network_calls.fetch_add(1, Ordering::Relaxed);
            let result = self
                .agent
                .get(&self.cfg.base_url)
                .query("center", format!("{:.6},{:.6}", point.lat, point.lon))
                .query("zoom", zoom.to_string())
                .query("size", format!("{size}x{size}"))
                .query("maptype", &self.cfg.map_type)
                .query("format", "png")
                .query("key", key)
                .call();

            let (retryable, retry_after, failure) = match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => {
                            return resp
                                .body_mut()
                                .with_config()
                                .limit(MAX_IMAGE_BYTES)
                                .read_to_vec()
                                .map_err(|e| FetchError::Decode(e.to_string()));
                        }
                        401 | 403 => {
                            return Err(FetchError::Auth(format!(
                                "provider returned HTTP {status}"
                            )))
                        }
                        429 => (
                            true,
                            retry_after_header(&resp),
                            FetchError::RateLimited { attempts: attempt },
                        ),
                        500..=599 => (
                            true,
                            retry_after_header(&resp),
                            FetchError::Http {
                                status,
                                attempts: attempt,
                            },
                        ),
                        _ => {
                            return Err(FetchError::Http {
                                status,
                                attempts: attempt,
                            })
                        }
                    }
                }
                Err(e) => (
                    true,
                    None,
                    FetchError::Transport {
                        message: e.to_string(),
                        attempts: attempt,
                    },
                ),
            };
            if !retryable || attempt >= policy.max_attempts {
                return Err(failure);
            }
            self.stats.retries.fetch_add(1, Ordering::Relaxed);
            let delay = policy.delay_after(attempt, retry_after);
            log::warn!("map fetch attempt {attempt} failed ({failure}); retrying in {delay:?}");
            std::thread::sleep(delay);
        }
    }
}

pub(crate) fn retry_after_header(resp: &ureq::http::Response<ureq::Body>) -> Option<Duration> {
    resp.headers()
        .get("retry-after")?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

fn read_cached(
    png_path: &Path,
    meta_path: &Path,
    region_name: &str,
) -> Result<Option<SceneImage>, FetchError> {
    if !png_path.exists() || !meta_path.exists() {
        return Ok(None);
    }
    let meta: CacheMeta = match serde_json::from_slice(&fs::read(meta_path)?) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("ignoring corrupt cache entry {}: {e}", meta_path.display());
            return Ok(None);
        }
    };
    let raster = match decode_png(&fs::read(png_path)?) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("ignoring corrupt cache entry {}: {e}", png_path.display());
            return Ok(None);
        }
    };
    SceneImage::new(raster, meta.center, meta.zoom, region_name, meta.fetched_at)
        .map(Some)
        .map_err(|e| FetchError::Decode(e.to_string()))
}
