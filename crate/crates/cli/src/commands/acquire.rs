//! ingest, fetch and slice: from region boxes to tiles on disk.

use std::time::Duration;

use anyhow::{bail, Context};
use pvscan_core::geo::{
    build_site_query, default_regions, filter_to_region, parse_regions, parse_site_response,
    sample_sites, InstallationSite, QueryConfig, RegionSpec,
};
use pvscan_core::imagery::fetch::{FetchError, MapClientConfig, StaticMapClient};
use pvscan_core::imagery::{decode_png, encode_png, slice_scene, SceneImage};
use pvscan_core::ndjson;
use pvscan_core::retry::RetryPolicy;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{emit, upsert};
use crate::cli::{FetchArgs, IngestArgs};
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord, Stage};

/// A sampled installation and the region it was drawn for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub region: String,
    #[serde(flatten)]
    pub site: InstallationSite,
}

/// File-name form of a region name: "Santa Ana, CA" -> "santa-ana-ca".
pub fn region_slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn query_overpass(
    endpoint: &str,
    query: &str,
    timeout: Duration,
    policy: &RetryPolicy,
) -> anyhow::Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let (message, retryable) = match agent.post(endpoint).send_form([("data", query)]) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if (200..300).contains(&status) {
                    return resp
                        .body_mut()
                        .read_to_string()
                        .context("cannot read Overpass response");
                }
                (
                    format!("Overpass returned HTTP {status}"),
                    status == 429 || status >= 500,
                )
            }
            Err(e) => (format!("Overpass request failed: {e}"), true),
        };
        if !retryable || attempt >= policy.max_attempts {
            bail!("{message} (after {attempt} attempts)");
        }
        let delay = policy.delay_after(attempt, None);
        log::warn!("{message}; retrying in {delay:?}");
        std::thread::sleep(delay);
    }
}

pub fn ingest(data: &DataDir, mut config: Config, args: IngestArgs) -> anyhow::Result<()> {
    if let Some(e) = args.endpoint {
        config.ingest.endpoint = e;
    }
    if let Some(s) = args.seed {
        config.ingest.seed = s;
    }
    config.validate()?;
    let regions: Vec<RegionSpec> = match &args.regions {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            parse_regions(&text)?
        }
        None => default_regions(),
    };
    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::Ingest, config.snapshot());
    let query_cfg = QueryConfig {
        timeout_secs: config.ingest.timeout_secs,
    };
    let mut all = Vec::new();
    let mut per_region = serde_json::Map::new();
    for region in &regions {
        let query = build_site_query(region, &query_cfg)?;
        let payload = match &args.from_responses {
            Some(dir) => {
                let path = dir.join(format!("{}.json", region_slug(&region.name)));
                std::fs::read_to_string(&path)
                    .with_context(|| format!("cannot read {}", path.display()))?
            }
            None => query_overpass(
                &config.ingest.endpoint,
                &query,
                Duration::from_secs(u64::from(config.ingest.timeout_secs) + 10),
                &RetryPolicy::default(),
            )?,
        };
        let parsed =
            parse_site_response(&payload).with_context(|| format!("region {}", region.name))?;
        let inside = filter_to_region(parsed.sites, region);
        let k = region.sample_target.min(inside.len());
        if k < region.sample_target {
            log::warn!(
                "{}: only {} sites available, wanted {}",
                region.name,
                inside.len(),
                region.sample_target
            );
        }
        let picked = sample_sites(&inside, k, config.ingest.seed)?;
        per_region.insert(
            region.name.clone(),
            json!({"found": inside.len(), "sampled": picked.len(), "skipped": parsed.skipped}),
        );
        all.extend(picked.into_iter().map(|site| SiteRecord {
            region: region.name.clone(),
            site,
        }));
    }
    ndjson::write_all(&data.sites(), &all)?;
    run.count("regions", regions.len())
        .count("sites", all.len());
    let run = run.finish(data)?;
    emit(&run, json!({"regions": per_region}));
    Ok(())
}

pub fn fetch(data: &DataDir, mut config: Config, args: FetchArgs) -> anyhow::Result<()> {
    if let Some(z) = args.zoom {
        config.imagery.zoom = z;
    }
    if let Some(s) = args.size {
        config.imagery.size = s;
    }
    if let Some(u) = args.base_url {
        config.imagery.base_url = u;
    }
    config.validate()?;
    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::Fetch, config.snapshot());
    let sites: Vec<SiteRecord> = ndjson::read(&data.sites())?;
    let sites: Vec<SiteRecord> = sites
        .into_iter()
        .filter(|s| args.region.as_ref().is_none_or(|r| &s.region == r))
        .collect();
    if sites.is_empty() {
        bail!("no sites to fetch; run `pvscan ingest` first");
    }

    let mut map_cfg = MapClientConfig::new(data.map_cache());
    map_cfg.base_url = config.imagery.base_url.clone();
    map_cfg.map_type = config.imagery.map_type.clone();
    map_cfg.key_env = config.imagery.key_env.clone();
    let client = StaticMapClient::new(map_cfg);

    let mut records = Vec::new();
    let mut failed = 0;
    for s in &sites {
        match client.fetch_scene(
            s.site.point,
            config.imagery.zoom,
            config.imagery.size,
            &s.region,
        ) {
            Ok(scene) => {
                let path = data.scene_png(&scene.scene_id);
                if !path.exists() {
                    std::fs::create_dir_all(path.parent().expect("scene path has a parent"))?;
                    ndjson::write_atomic(&path, &encode_png(&scene.raster)?)?;
                }
                records.push(scene.record());
            }
            // Credentials problems affect every site; stop at the first.
            Err(e @ FetchError::Auth(_)) => return Err(e.into()),
            Err(e) => {
                failed += 1;
                log::error!("site {}: {e}", s.site.site_id);
            }
        }
    }
    let fetched = records.len();
    let changed = upsert(&data.scenes_manifest(), records, |r| r.scene_id.clone())?;
    let stats = &client.stats;
    use std::sync::atomic::Ordering::Relaxed;
    run.count("sites", sites.len())
        .count("scenes", fetched)
        .count("failed", failed)
        .count("new_or_changed", changed)
        .count("network_calls", stats.network_calls.load(Relaxed))
        .count("cache_hits", stats.cache_hits.load(Relaxed));
    let run = run.finish(data)?;
    emit(&run, json!({}));
    if fetched == 0 {
        bail!("no scene could be fetched");
    }
    Ok(())
}

pub fn slice(data: &DataDir, config: Config) -> anyhow::Result<()> {
    let _lock = data.lock()?;
    let mut run = RunRecord::start(Stage::Slice, config.snapshot());
    let scenes = data.scene_records()?;
    if scenes.is_empty() {
        bail!("no scenes to slice; run `pvscan fetch` or `pvscan synth` first");
    }
    let mut tiles = Vec::new();
    let mut written = 0;
    for rec in &scenes {
        let path = data.scene_png(&rec.scene_id);
        let bytes = std::fs::read(&path)
            .with_context(|| format!("cannot read scene {}", path.display()))?;
        let raster = decode_png(&bytes)?;
        let scene = SceneImage::new(
            raster,
            rec.center,
            rec.zoom,
            rec.region_name.clone(),
            rec.fetched_at,
        )?;
        for tile in slice_scene(&scene) {
            let record = tile.record(&rec.region_name);
            let out = data.tile_png(&record);
            if !out.exists() {
                std::fs::create_dir_all(out.parent().expect("tile path has a parent"))?;
                ndjson::write_atomic(&out, &encode_png(&tile.raster)?)?;
                written += 1;
            }
            tiles.push(record);
        }
    }
    let total = tiles.len();
    let changed = upsert(&data.tiles_manifest(), tiles, |t| t.tile_id.clone())?;
    run.count("scenes", scenes.len())
        .count("tiles", total)
        .count("tiles_written", written)
        .count("new_or_changed", changed);
    let run = run.finish(data)?;
    emit(&run, json!({}));
    Ok(())
}
