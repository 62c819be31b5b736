//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
//! budget. Exits non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::DateTime;
use image::{Rgba, RgbaImage};
use pvscan_core::autolabel::{
    gaussian_kde, likelihood_summary, triage, triage_batch, TriageConfig, TriageDecision,
};
use pvscan_core::evaluation::{
    align, bce_loss, class_metrics, confusion, exact_match_accuracy, render_report,
    weighted_average, ClassMetrics, ConfusionCounts, Field, MetricsReport, Prediction,
    RejectPolicy, ReportFormat, Subset,
};
use pvscan_core::finetune::{validate_jsonl, ExportProfile};
use pvscan_core::geo::GeoPoint;
use pvscan_core::imagery::{reassemble, slice_scene, SceneImage};
use pvscan_core::inference::InferenceRecord;
use pvscan_core::model::{
    parse_model_response, serialize_assessment, GroundTruthLabel, LocationLabel, ParseMode,
    ParseStatus, PvAssessment, QuantityBucket,
};
use pvscan_core::ndjson;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const EXAMPLE_SOLAR: &str = r#"{ "solar_panels_present": true,
  "location": "top-left",
  "quantity": "0 to 1",
  "likelihood_of_solar_panels_present": 0.98,
  "confidence_of_solar_panels_present": 0.90 }"#;

const EXAMPLE_NO_SOLAR: &str = r#"{ "solar_panels_present": false,
  "location": "NA",
  "quantity": "NA",
  "likelihood_of_solar_panels_present": 0.21,
  "confidence_of_solar_panels_present": 0.87 }"#;

fn metrics_from(precision: f64, recall: f64) -> ClassMetrics {
    ClassMetrics {
        precision,
        recall,
        f1: pvscan_core::evaluation::f1_score(precision, recall),
        accuracy: recall,
        support: 0,
        degenerate: false,
    }
}

fn f1_formula() -> Check {
    let mut notes = Vec::new();
    for (p, r, expected) in [(0.6648, 0.9098, 0.7682), (0.7118, 0.9915, 0.8287)] {
        let f1 = metrics_from(p, r).f1;
        ensure((f1 - expected).abs() <= 1e-4, || {
            format!("F1({p}, {r}) = {f1:.6}, want {expected}")
        })?;
        notes.push(format!("{f1:.4}"));
    }
    // The same formula drives metrics computed from counts.
    let c = ConfusionCounts {
        tp: 6,
        fp: 2,
        fn_: 4,
        tn: 8,
    };
    let m = class_metrics(&c);
    let oracle = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
    ensure((m.f1 - oracle).abs() < 1e-12, || {
        format!("counts F1 {} != {oracle}", m.f1)
    })?;
    Ok(format!("F1 = {}", notes.join(", ")))
}

fn random_assessment(rng: &mut ChaCha8Rng) -> PvAssessment {
    let present = rng.random_bool(0.5);
    let (location, quantity) = if present {
        (
            *LocationLabel::ALL[..9].choose(rng).unwrap(),
            *QuantityBucket::ALL[..4].choose(rng).unwrap(),
        )
    } else {
        (LocationLabel::NotApplicable, QuantityBucket::NotApplicable)
    };
    PvAssessment {
        present,
        location,
        quantity,
        likelihood: rng.random_range(0..=100) as f64 / 100.0,
        confidence: rng.random_range(0..=100) as f64 / 100.0,
    }
}

fn truth_of(tile_id: String, a: &PvAssessment) -> GroundTruthLabel {
    GroundTruthLabel {
        tile_id,
        present: a.present,
        location: a.location,
        quantity: a.quantity,
        annotator: "acceptance".into(),
        annotated_at: DateTime::UNIX_EPOCH,
    }
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut largest = 0;
    for set in 0..100 {
        let n = rng.random_range(1..=1000);
        largest = largest.max(n);
        let mut preds = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for i in 0..n {
            let id = format!("t{i}");
            preds.push(Prediction {
                tile_id: id.clone(),
                assessment: random_assessment(&mut rng),
            });
            truths.push(truth_of(id, &random_assessment(&mut rng)));
        }

        // Independent tally.
        let mut counts = [[0u64; 2]; 2];
        let (mut loc, mut qty, mut loc_s, mut qty_s, mut solar) = (0u64, 0u64, 0u64, 0u64, 0u64);
        for (p, t) in preds.iter().zip(&truths) {
            let p = &p.assessment;
            counts[p.present as usize][t.present as usize] += 1;
            loc += (p.location == t.location) as u64;
            qty += (p.quantity == t.quantity) as u64;
            if t.present {
                solar += 1;
                loc_s += (p.location == t.location) as u64;
                qty_s += (p.quantity == t.quantity) as u64;
            }
        }
        let (tp, fp, fn_, tn) = (counts[1][1], counts[1][0], counts[0][1], counts[0][0]);
        let c = confusion(&preds, &truths).map_err(|e| e.to_string())?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || {
            format!("set {set}: confusion {c:?}")
        })?;

        let nf = n as f64;
        let acc = |f, s| exact_match_accuracy(f, &preds, &truths, s).map_err(|e| e.to_string());
        ensure(
            acc(Field::Location, Subset::All)? == loc as f64 / nf,
            || format!("set {set}: location/all"),
        )?;
        ensure(
            acc(Field::Quantity, Subset::All)? == qty as f64 / nf,
            || format!("set {set}: quantity/all"),
        )?;
        if solar > 0 {
            let s = solar as f64;
            ensure(
                acc(Field::Location, Subset::SolarOnly)? == loc_s as f64 / s,
                || format!("set {set}: location/solar"),
            )?;
            ensure(
                acc(Field::Quantity, Subset::SolarOnly)? == qty_s as f64 / s,
                || format!("set {set}: quantity/solar"),
            )?;
        }

        // Weighted averages from the tally, computed the same way.
        let per_class = |tp: u64, fp: u64, fn_: u64| {
            let p = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = if tp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fn_) as f64
            };
            let f = if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
            (p, r, f)
        };
        let (sp, sr, sf) = per_class(tp, fp, fn_);
        let (np, nr, nf1) = per_class(tn, fn_, fp);
        let (ws, wn) = ((tp + fn_) as f64, (tn + fp) as f64);
        // The weighted mean of equal values is that value; otherwise the
        // support-weighted sum over the total.
        let mix = |a: f64, b: f64| {
            if a == b {
                a
            } else {
                (ws * a + wn * b) / (ws + wn)
            }
        };
        let w = weighted_average(&class_metrics(&c), &class_metrics(&c.flipped()))
            .map_err(|e| e.to_string())?;
        for (name, got, want) in [
            ("precision", w.precision, mix(sp, np)),
            ("recall", w.recall, mix(sr, nr)),
            ("f1", w.f1, mix(sf, nf1)),
        ] {
            ensure(got == want, || {
                format!("set {set}: weighted {name} {got} != {want}")
            })?;
        }
        ensure(w.support == n as u64, || {
            format!("set {set}: support {}", w.support)
        })?;
    }
    Ok(format!("100 sets, N up to {largest}"))
}

/// A value that is invalid for `field` in strict mode, given the original.
fn invalid_value(rng: &mut ChaCha8Rng, field: &str, original: &Value) -> Value {
    let junk_word = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(1..10);
        (0..len)
            .map(|_| rng.random_range(b'a'..=b'z') as char)
            .collect::<String>()
            + "x"
    };
    match field {
        "solar_panels_present" => match rng.random_range(0..5) {
            0 => json!(!original.as_bool().unwrap()),
            1 => json!(original.as_bool().unwrap().to_string()),
            2 => json!(rng.random_range(0..2)),
            3 => Value::Null,
            _ => json!([original.clone()]),
        },
        "location" => {
            let present = original != "NA";
            match rng.random_range(0..5) {
                0 if present => json!("NA"),
                0 => json!(LocationLabel::ALL[rng.random_range(0..9)].as_str()),
                1 => json!(original.as_str().unwrap().to_uppercase() + "_"),
                2 => json!(junk_word(rng)),
                3 => json!(rng.random_range(0..10)),
                _ => Value::Null,
            }
        }
        "quantity" => {
            let present = original != "NA";
            match rng.random_range(0..5) {
                0 if present => json!("NA"),
                0 => json!(QuantityBucket::ALL[rng.random_range(0..4)].as_str()),
                1 => json!(rng.random_range(0..100).to_string()),
                2 => json!(junk_word(rng)),
                3 => json!(rng.random_range(0..10)),
                _ => Value::Null,
            }
        }
        _ => match rng.random_range(0..5) {
            0 => json!(1.0 + rng.random_range(0.01..100.0)),
            1 => json!(-rng.random_range(0.01..100.0)),
            2 => json!(original.to_string()),
            3 => Value::Null,
            _ => json!(true),
        },
    }
}

fn schema_suite() -> Check {
    for text in [EXAMPLE_SOLAR, EXAMPLE_NO_SOLAR] {
        let out = parse_model_response(text, ParseMode::Strict);
        ensure(out.status == ParseStatus::Ok, || {
            format!("example rejected: {:?}", out.diagnostic)
        })?;
        let a = out.assessment.ok_or("no assessment")?;
        let canonical = serialize_assessment(&a);
        let again = parse_model_response(&canonical, ParseMode::Strict);
        ensure(again.assessment.as_ref() == Some(&a), || {
            "canonical form does not round-trip".into()
        })?;
        ensure(
            serialize_assessment(&again.assessment.unwrap()) == canonical,
            || "not a fixpoint".into(),
        )?;
    }
    let fields = pvscan_core::model::FIELD_ORDER;
    let bases: Vec<Value> = [EXAMPLE_SOLAR, EXAMPLE_NO_SOLAR]
        .iter()
        .map(|t| serde_json::from_str(t).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..1000 {
        let mut v = bases[i % 2].clone();
        let field = fields[rng.random_range(0..fields.len())];
        let kind = rng.random_range(0..10);
        let desc = if kind == 0 {
            v.as_object_mut().unwrap().remove(field);
            format!("remove {field}")
        } else {
            let bad = invalid_value(&mut rng, field, &v[field]);
            let d = format!("{field} = {bad}");
            v[field] = bad;
            d
        };
        let out = parse_model_response(&v.to_string(), ParseMode::Strict);
        ensure(out.status == ParseStatus::Rejected, || {
            format!("mutation {i} accepted: {desc}")
        })?;
    }
    Ok("2 examples canonical, 1000/1000 mutations rejected".into())
}

fn slicing_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let (w, h) = (
            rng.random_range(1..=200u32) * 4,
            rng.random_range(1..=200u32) * 4,
        );
        let seed: u64 = rng.random();
        let raster = RgbaImage::from_fn(w, h, |x, y| {
            let v = seed ^ (u64::from(x) << 20 | u64::from(y)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Rgba([v as u8, (v >> 8) as u8, (v >> 16) as u8, (v >> 24) as u8])
        });
        let scene = SceneImage::new(
            raster.clone(),
            GeoPoint { lat: 0.0, lon: 0.0 },
            20,
            "a",
            DateTime::UNIX_EPOCH,
        )
        .map_err(|e| e.to_string())?;
        let tiles = slice_scene(&scene);
        ensure(tiles.len() == 16, || {
            format!("case {i}: {} tiles", tiles.len())
        })?;
        let back = reassemble(&tiles).map_err(|e| e.to_string())?;
        ensure(back == raster, || {
            format!("case {i}: {w}x{h} reassembly differs")
        })?;
    }
    Ok("50 sizes".into())
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn data(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn pvscan(data: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pvscan"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("PVSCAN_DATA")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "pvscan {args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap_or("")).map_err(|e| e.to_string())
}

fn closed_loop_run(data: &Path, spec: &Path) -> Result<(Value, Value), String> {
    let synth = pvscan(
        data,
        &["synth", "--spec", spec.to_str().unwrap(), "--seed", "42"],
    )?;
    pvscan(data, &["predict", "--backend", "mock"])?;
    let eval = pvscan(data, &["evaluate"])?;
    Ok((synth, eval))
}

fn normalized_journal(data: &Path) -> Result<Vec<InferenceRecord>, String> {
    let records: Vec<InferenceRecord> =
        ndjson::read(&data.join("journal.ndjson")).map_err(|e| e.to_string())?;
    Ok(records.into_iter().map(|r| r.normalized()).collect())
}

fn closed_loop(ws: &Workspace) -> Check {
    let spec = ws.root.join("spec.toml");
    std::fs::write(
        &spec,
        "scenes = 13\nempty_fraction = 0.4\nregions = [\"north\", \"south\"]\n",
    )
    .unwrap();
    let (a, b) = (ws.data("run-a"), ws.data("run-b"));
    let (synth, _) = closed_loop_run(&a, &spec)?;
    let tiles = synth["counts"]["tiles"].as_u64().unwrap_or(0);
    let empty = synth["counts"]["empty_tiles"].as_u64().unwrap_or(0);
    ensure(tiles >= 200, || format!("{tiles} tiles"))?;
    ensure(empty as f64 >= 0.3 * tiles as f64, || {
        format!("{empty}/{tiles} empty")
    })?;

    let report: Value = serde_json::from_slice(
        &std::fs::read(a.join("reports/latest.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let wf1 = report["weighted"]["f1"].as_f64().unwrap_or(0.0);
    let loc = report["location_accuracy_solar"].as_f64().unwrap_or(0.0);
    ensure(wf1 >= 0.95, || format!("weighted F1 {wf1:.4}"))?;
    ensure(loc >= 0.90, || format!("solar location accuracy {loc:.4}"))?;

    closed_loop_run(&b, &spec)?;
    let same_report = std::fs::read(a.join("reports/latest.json")).ok()
        == std::fs::read(b.join("reports/latest.json")).ok();
    ensure(same_report, || "reports differ between runs".into())?;
    ensure(normalized_journal(&a)? == normalized_journal(&b)?, || {
        "journals differ between runs".into()
    })?;
    ensure(
        std::fs::read(a.join("labels.ndjson")).ok() == std::fs::read(b.join("labels.ndjson")).ok(),
        || "labels differ between runs".into(),
    )?;
    Ok(format!(
        "{tiles} tiles, {empty} empty, weighted F1 {wf1:.4}, solar location {loc:.4}, two runs identical"
    ))
}

fn closed_loop_data(data: &Path) -> Result<(Vec<InferenceRecord>, Vec<GroundTruthLabel>), String> {
    let records: Vec<InferenceRecord> =
        ndjson::read(&data.join("journal.ndjson")).map_err(|e| e.to_string())?;
    let labels: Vec<GroundTruthLabel> =
        ndjson::read(&data.join("labels.ndjson")).map_err(|e| e.to_string())?;
    ensure(!records.is_empty(), || {
        "closed-loop run produced no journal".into()
    })?;
    Ok((records, labels))
}

fn calibration(ws: &Workspace) -> Check {
    let half = bce_loss(&[0.5], &[true]).map_err(|e| e.to_string())?;
    ensure((half - std::f64::consts::LN_2).abs() <= 1e-9, || {
        format!("BCE(1, 0.5) = {half}")
    })?;
    let (records, labels) = closed_loop_data(&ws.data("run-a"))?;
    let aligned = align(&records, &labels, RejectPolicy::Exclude);
    let (p, y): (Vec<f64>, Vec<bool>) = aligned.calibration.iter().copied().unzip();
    let bce = bce_loss(&p, &y).map_err(|e| e.to_string())?;
    ensure(bce.is_finite(), || format!("BCE {bce}"))?;
    let d = likelihood_summary(&aligned.preds, &aligned.truths).map_err(|e| e.to_string())?;
    ensure(d.median_likelihood_true > d.median_likelihood_false, || {
        format!(
            "medians {} vs {}",
            d.median_likelihood_true, d.median_likelihood_false
        )
    })?;
    Ok(format!(
        "ln2 ok, BCE {bce:.4}, median likelihood {:.2} (solar) > {:.2} (no solar)",
        d.median_likelihood_true, d.median_likelihood_false
    ))
}

fn triage_check(ws: &Workspace) -> Check {
    let (records, _) = closed_loop_data(&ws.data("run-a"))?;
    let cfg = TriageConfig::default();
    let out = triage_batch(&records, &cfg);
    let mut ids: Vec<&str> = out
        .accepted
        .iter()
        .map(|l| l.tile_id.as_str())
        .chain(out.queue.iter().map(|i| i.tile_id.as_str()))
        .collect();
    ensure(ids.len() == records.len(), || {
        format!("{} routed of {}", ids.len(), records.len())
    })?;
    ids.sort();
    ids.dedup();
    ensure(ids.len() == records.len(), || {
        "a tile was routed twice".into()
    })?;

    let mut previous: Option<Vec<String>> = None;
    for step in 0..=20 {
        let t = step as f64 / 20.0;
        let queue: Vec<String> = triage_batch(
            &records,
            &TriageConfig::new(t, cfg.likelihood_margin).unwrap(),
        )
        .queue
        .into_iter()
        .map(|i| i.tile_id)
        .collect();
        if let Some(prev) = &previous {
            ensure(prev.iter().all(|id| queue.contains(id)), || {
                format!("queue shrank at threshold {t}")
            })?;
        }
        previous = Some(queue);
    }

    for text in [EXAMPLE_SOLAR, EXAMPLE_NO_SOLAR] {
        let a = parse_model_response(text, ParseMode::Strict)
            .assessment
            .ok_or("example rejected")?;
        ensure(triage(&a, &cfg) == TriageDecision::AutoAccept, || {
            "example not auto-accepted".into()
        })?;
    }
    Ok(format!(
        "{} accepted + {} queued = {}, monotone over 21 thresholds, examples auto-accepted",
        out.accepted.len(),
        out.queue.len(),
        records.len()
    ))
}

fn kde_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = rng.random_range(1..=200);
        let samples: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let k = gaussian_kde(&samples).ok_or_else(|| format!("sample {i}: no density"))?;
        let err = (k.integral() - 1.0).abs();
        worst = worst.max(err);
        ensure(err <= 1e-3, || {
            format!("sample {i}: integral {}", k.integral())
        })?;
    }
    Ok(format!("20 samples, worst |integral - 1| = {worst:.2e}"))
}

fn export_check(ws: &Workspace) -> Check {
    let data = ws.data("run-a");
    pvscan(&data, &["export-finetune", "--seed", "7"])?;
    let dir = data.join("export");
    let snapshot = |name: &str| std::fs::read(dir.join(name)).map_err(|e| e.to_string());
    let (train, test) = (snapshot("train.jsonl")?, snapshot("test.jsonl")?);
    let mut lines = 0;
    for name in ["train.jsonl", "test.jsonl"] {
        let report = validate_jsonl(&dir.join(name), ExportProfile::OpenaiChat)
            .map_err(|e| e.to_string())?;
        ensure(report.all_valid(), || {
            format!("{name}: {}/{} valid", report.valid, report.lines)
        })?;
        lines += report.lines;
    }
    pvscan(&data, &["export-finetune", "--seed", "7"])?;
    ensure(
        snapshot("train.jsonl")? == train && snapshot("test.jsonl")? == test,
        || "re-export differs".into(),
    )?;
    Ok(format!("{lines} lines valid, re-export byte-identical"))
}

fn report_row() -> Check {
    // Reference per-class rows. Class supports are not given; 1317/8683
    // matches the solar share implied by the weighted row.
    let mk = |p: f64, r: f64, f: f64, support| ClassMetrics {
        precision: p,
        recall: r,
        f1: f,
        accuracy: r,
        support,
        degenerate: false,
    };
    let solar = mk(0.7118, 0.9915, 0.8287, 1317);
    let no_solar = mk(0.9986, 0.9391, 0.9679, 8683);
    let weighted = weighted_average(&solar, &no_solar).map_err(|e| e.to_string())?;
    let report = MetricsReport {
        region: "Santa Ana".into(),
        confusion: ConfusionCounts::default(),
        solar,
        no_solar,
        weighted,
        location_accuracy_solar: None,
        location_accuracy_all: None,
        quantity_accuracy_solar: None,
        quantity_accuracy_all: None,
        calibration_bce: None,
        evaluated: 10000,
        excluded_rejected: 0,
        missing_prediction: 0,
    };
    let csv = render_report(&report, ReportFormat::Csv);
    let row = csv
        .lines()
        .find(|l| l.contains("Weighted Average"))
        .ok_or("no weighted row")?;
    let values: Vec<&str> = row.split(',').skip(2).collect();
    ensure(values == ["96.08", "94.60", "94.96", "94.60"], || {
        format!("row {row}")
    })?;
    Ok(values.join(" / "))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let ws = Workspace {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
    };
    type Criterion<'a> = (&'a str, u64, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("metric formula", 1, Box::new(f1_formula)),
        ("oracle equivalence", 10, Box::new(oracle_equivalence)),
        ("schema suite", 5, Box::new(schema_suite)),
        ("slicing suite", 10, Box::new(slicing_suite)),
        ("closed loop end-to-end", 60, Box::new(|| closed_loop(&ws))),
        ("calibration", 10, Box::new(|| calibration(&ws))),
        ("triage", 10, Box::new(|| triage_check(&ws))),
        ("kde", 5, Box::new(kde_check)),
        ("export", 30, Box::new(|| export_check(&ws))),
        ("report formatting", 1, Box::new(report_row)),
    ];
    let mut failed = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(*budget);
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget}s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} {name} ({:.2}s, limit {budget}s): {detail}",
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
