//! Region definitions and the Overpass query/response pair used to locate
//! known solar installations. Nothing here touches the network.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// The six study regions, one JSON record per line.
pub const DEFAULT_REGIONS: &str = include_str!("../assets/regions.ndjson");

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid region {name:?}: {reason}")]
    InvalidRegion { name: String, reason: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("cannot sample {k} sites from {available}")]
    InsufficientSites { k: usize, available: usize },
    #[error("region file line {line}: {source}")]
    RegionFile {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// `[min_lat, min_lon, max_lat, max_lon]` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([min_lat, min_lon, max_lat, max_lon]: [f64; 4]) -> Self {
        Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.min_lat, b.min_lon, b.max_lat, b.max_lon]
    }
}

impl BoundingBox {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat)
            && (self.min_lon..=self.max_lon).contains(&p.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub bbox: BoundingBox,
    pub sample_target: usize,
}

impl RegionSpec {
    pub fn validate(&self) -> Result<(), GeoError> {
        let b = &self.bbox;
        let fail = |reason: &str| {
            Err(GeoError::InvalidRegion {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        let lat_ok = |v: f64| v.is_finite() && (-90.0..=90.0).contains(&v);
        let lon_ok = |v: f64| v.is_finite() && (-180.0..=180.0).contains(&v);
        if !(lat_ok(b.min_lat) && lat_ok(b.max_lat)) {
            return fail("latitude outside [-90, 90]");
        }
        if !(lon_ok(b.min_lon) && lon_ok(b.max_lon)) {
            return fail("longitude outside [-180, 180]");
        }
        if b.min_lat >= b.max_lat {
            return fail("min_lat must be below max_lat");
        }
        if b.min_lon >= b.max_lon {
            return fail("min_lon must be below max_lon");
        }
        if self.sample_target == 0 {
            return fail("sample_target must be positive");
        }
        Ok(())
    }
}

/// Parses a region definitions file (one JSON record per line) and validates
/// every entry.
pub fn parse_regions(text: &str) -> Result<Vec<RegionSpec>, GeoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let region: RegionSpec =
            serde_json::from_str(line).map_err(|source| GeoError::RegionFile {
                line: i + 1,
                source,
            })?;
        region.validate()?;
        out.push(region);
    }
    Ok(out)
}

pub fn default_regions() -> Vec<RegionSpec> {
    parse_regions(DEFAULT_REGIONS).expect("bundled regions are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub timeout_secs: u32,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { timeout_secs: 25 }
    }
}

const SOLAR_FILTER: &str = r#"["power"="generator"]["generator:source"="solar"]"#;

/// Overpass QL selecting solar generators inside the region. Ways and
/// relations come back reduced to their center.
pub fn build_site_query(region: &RegionSpec, cfg: &QueryConfig) -> Result<String, GeoError> {
    region.validate()?;
    let b = &region.bbox;
    let bbox = format!("({},{},{},{})", b.min_lat, b.min_lon, b.max_lat, b.max_lon);
    let mut q = format!("[out:json][timeout:{}];\n(\n", cfg.timeout_secs);
    for kind in ["node", "way", "relation"] {
        let _ = writeln!(q, "  {kind}{SOLAR_FILTER}{bbox};");
    }
    q.push_str(");\nout center;\n");
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallationSite {
    pub site_id: String,
    pub point: GeoPoint,
    #[serde(default)]
    pub source_tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSites {
    pub sites: Vec<InstallationSite>,
    /// Elements dropped because no coordinate could be resolved.
    pub skipped: usize,
}

fn element_point(el: &Value) -> Option<GeoPoint> {
    let coords = |v: &Value| {
        Some(GeoPoint {
            lat: v.get("lat")?.as_f64()?,
            lon: v.get("lon")?.as_f64()?,
        })
    };
    coords(el).or_else(|| coords(el.get("center")?))
}

pub fn parse_site_response(payload: &str) -> Result<ParsedSites, GeoError> {
    let root: Value =
        serde_json::from_str(payload).map_err(|e| GeoError::MalformedResponse(e.to_string()))?;
    let elements = root
        .get("elements")
        .and_then(Value::as_array)
        .ok_or_else(|| GeoError::MalformedResponse("missing \"elements\" array".into()))?;

    let mut sites = Vec::with_capacity(elements.len());
    let mut skipped = 0;
    for el in elements {
        let Some(point) = element_point(el) else {
            skipped += 1;
            continue;
        };
        let kind = el.get("type").and_then(Value::as_str).unwrap_or("element");
        let id = match el.get("id") {
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::String(s)) => s.clone(),
            _ => format!("{}_{}", point.lat, point.lon),
        };
        let source_tags = el
            .get("tags")
            .and_then(Value::as_object)
            .map(|tags| {
                tags.iter()
                    .filter_map(|(k, v)| Some((k.clone(), v.as_str()?.to_string())))
                    .collect()
            })
            .unwrap_or_default();
        sites.push(InstallationSite {
            site_id: format!("{kind}/{id}"),
            point,
            source_tags,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} elements without resolvable coordinates");
    }
    Ok(ParsedSites { sites, skipped })
}

/// Drops sites outside the region's bbox.
pub fn filter_to_region(
    sites: Vec<InstallationSite>,
    region: &RegionSpec,
) -> Vec<InstallationSite> {
    sites
        .into_iter()
        .filter(|s| region.bbox.contains(s.point))
        .collect()
}

/// Seeded subset of size `k`, kept in input order.
pub fn sample_sites(
    sites: &[InstallationSite],
    k: usize,
    seed: u64,
) -> Result<Vec<InstallationSite>, GeoError> {
    if k > sites.len() {
        return Err(GeoError::InsufficientSites {
            k,
            available: sites.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, sites.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| sites[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn santa_ana() -> RegionSpec {
        RegionSpec {
            name: "Santa Ana, CA".into(),
            bbox: [33.68, -117.95, 33.78, -117.82].into(),
            sample_target: 10,
        }
    }

    #[test]
    fn default_regions_parse() {
        let regions = default_regions();
        assert_eq!(regions.len(), 6);
        assert!(regions.iter().any(|r| r.name == "Harlem, NY"));
    }

    #[test]
    fn query_contains_bbox_in_lat_lon_order() {
        let q = build_site_query(&santa_ana(), &QueryConfig::default()).unwrap();
        assert!(q.contains("(33.68,-117.95,33.78,-117.82)"));
        assert!(q.contains("[timeout:25]"));
        assert!(q.contains(r#"node["power"="generator"]["generator:source"="solar"]"#));
        assert!(q.contains("out center;"));
    }

    #[test]
    fn distinct_regions_differ_only_in_bbox() {
        let a = santa_ana();
        let mut b = santa_ana();
        b.name = "Elsewhere".into();
        b.bbox = [10.0, 20.0, 11.0, 21.0].into();
        let cfg = QueryConfig::default();
        let qa = build_site_query(&a, &cfg).unwrap();
        let qb = build_site_query(&b, &cfg).unwrap();
        assert_ne!(qa, qb);
        assert_eq!(
            qa.replace("33.68,-117.95,33.78,-117.82", "BBOX"),
            qb.replace("10,20,11,21", "BBOX")
        );
        assert_eq!(qa, build_site_query(&a, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_bbox() {
        let mut r = santa_ana();
        r.bbox.min_lat = 34.0;
        assert!(matches!(
            build_site_query(&r, &QueryConfig::default()),
            Err(GeoError::InvalidRegion { .. })
        ));
        let mut r = santa_ana();
        r.bbox.max_lon = 200.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn parses_nodes_and_way_centers() {
        let payload = r#"{"version":0.6,"elements":[
            {"type":"node","id":1,"lat":33.7,"lon":-117.9,"tags":{"power":"generator","generator:source":"solar"}},
            {"type":"node","id":2,"lat":33.71,"lon":-117.91},
            {"type":"way","id":3,"center":{"lat":33.72,"lon":-117.92},"tags":{"power":"generator"}},
            {"type":"relation","id":4}
        ]}"#;
        let parsed = parse_site_response(payload).unwrap();
        assert_eq!(parsed.sites.len(), 3);
        assert_eq!(parsed.skipped, 1);
        assert_eq!(parsed.sites[0].site_id, "node/1");
        assert_eq!(parsed.sites[0].source_tags["generator:source"], "solar");
        assert_eq!(parsed.sites[2].point.lat, 33.72);
    }

    #[test]
    fn empty_and_malformed_responses() {
        assert!(parse_site_response(r#"{"elements":[]}"#)
            .unwrap()
            .sites
            .is_empty());
        assert!(matches!(
            parse_site_response(r#"{"elements":[{"type":"node""#),
            Err(GeoError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_site_response(r#"{"remark":"timeout"}"#),
            Err(GeoError::MalformedResponse(_))
        ));
    }

    #[test]
    fn filter_drops_outside_points() {
        let payload = r#"{"elements":[
            {"type":"node","id":1,"lat":33.7,"lon":-117.9},
            {"type":"node","id":2,"lat":40.0,"lon":-117.9}]}"#;
        let sites = filter_to_region(parse_site_response(payload).unwrap().sites, &santa_ana());
        assert_eq!(sites.len(), 1);
        assert!(sites.iter().all(|s| santa_ana().bbox.contains(s.point)));
    }
}
