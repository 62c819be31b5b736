use chrono::DateTime;
use image::{Rgba, RgbaImage};
use proptest::prelude::*;
use pvscan_core::autolabel::{gaussian_kde, median, triage_batch, TriageConfig};
use pvscan_core::evaluation::{
    bce_loss, class_metrics, confusion, exact_match_accuracy, weighted_average, ClassMetrics,
    Field, Prediction, Subset,
};
use pvscan_core::geo::GeoPoint;
use pvscan_core::imagery::{reassemble, region_for_centroid, slice_scene, SceneImage};
use pvscan_core::inference::{BackendKind, InferenceRecord};
use pvscan_core::model::{
    bucket_for_count, canonicalize_location, parse_model_response, serialize_assessment,
    GroundTruthLabel, LocationLabel, ParseMode, ParseOutcome, ParseStatus, PvAssessment,
    QuantityBucket,
};

fn spatial() -> impl Strategy<Value = LocationLabel> {
    prop::sample::select(LocationLabel::ALL[..9].to_vec())
}

fn counted() -> impl Strategy<Value = QuantityBucket> {
    prop::sample::select(QuantityBucket::ALL[..4].to_vec())
}

fn hundredths() -> impl Strategy<Value = f64> {
    (0u32..=100).prop_map(|k| k as f64 / 100.0)
}

/// Valid assessments with two-decimal reals.
fn assessment() -> impl Strategy<Value = PvAssessment> {
    (
        any::<bool>(),
        spatial(),
        counted(),
        hundredths(),
        hundredths(),
    )
        .prop_map(|(present, loc, qty, l, c)| {
            let (location, quantity) = if present {
                (loc, qty)
            } else {
                (LocationLabel::NotApplicable, QuantityBucket::NotApplicable)
            };
            PvAssessment {
                present,
                location,
                quantity,
                likelihood: l,
                confidence: c,
            }
        })
}

fn label(tile_id: String, a: &PvAssessment) -> GroundTruthLabel {
    GroundTruthLabel {
        tile_id,
        present: a.present,
        location: a.location,
        quantity: a.quantity,
        annotator: "prop".into(),
        annotated_at: DateTime::UNIX_EPOCH,
    }
}

fn pairs(max: usize) -> impl Strategy<Value = (Vec<Prediction>, Vec<GroundTruthLabel>)> {
    prop::collection::vec((assessment(), assessment()), 1..=max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (p, t))| {
                let id = format!("tile_{i}");
                (
                    Prediction {
                        tile_id: id.clone(),
                        assessment: p,
                    },
                    label(id, &t),
                )
            })
            .unzip()
    })
}

fn record(tile_id: String, a: Option<PvAssessment>) -> InferenceRecord {
    let outcome = match &a {
        Some(a) => parse_model_response(&serialize_assessment(a), ParseMode::Strict),
        None => parse_model_response("no idea", ParseMode::Lenient),
    };
    InferenceRecord {
        tile_id,
        bundle_hash: "h".into(),
        backend_kind: BackendKind::Mock,
        raw_response: String::new(),
        outcome,
        latency_ms: 0,
        attempt_count: 1,
        created_at: DateTime::UNIX_EPOCH,
        failure: None,
    }
}

fn records() -> impl Strategy<Value = Vec<InferenceRecord>> {
    prop::collection::vec(prop::option::weighted(0.9, assessment()), 0..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, a)| record(format!("t{i}"), a))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn canonical_round_trip(a in assessment()) {
        let text = serialize_assessment(&a);
        let out = parse_model_response(&text, ParseMode::Strict);
        prop_assert_eq!(out.status, ParseStatus::Ok);
        prop_assert_eq!(out.assessment.as_ref(), Some(&a));
    }

    #[test]
    fn serialization_is_a_fixpoint_for_any_real(present in any::<bool>(), l in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        let a = PvAssessment {
            present,
            location: if present { LocationLabel::Center } else { LocationLabel::NotApplicable },
            quantity: if present { QuantityBucket::OneToFive } else { QuantityBucket::NotApplicable },
            likelihood: l,
            confidence: c,
        };
        let once = serialize_assessment(&a);
        let back = parse_model_response(&once, ParseMode::Strict).assessment.unwrap();
        prop_assert_eq!(serialize_assessment(&back), once);
    }

    #[test]
    fn location_vocabulary_is_closed(raw in "\\PC{0,16}") {
        if let Ok(l) = canonicalize_location(&raw) { prop_assert!(LocationLabel::ALL.contains(&l)) }
    }

    #[test]
    fn bucket_rule_is_monotone(a in 0u64..1000, b in 0u64..1000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(bucket_for_count(lo) <= bucket_for_count(hi));
        prop_assert!(bucket_for_count(a) != QuantityBucket::NotApplicable);
    }

    #[test]
    fn centroid_region_is_spatial(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let l = region_for_centroid(x, y).unwrap();
        prop_assert!(!l.is_na());
    }

    #[test]
    fn evaluation_matches_brute_force((preds, truths) in pairs(300)) {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        let (mut loc_all, mut qty_all, mut loc_solar, mut qty_solar, mut solar) = (0u64, 0u64, 0u64, 0u64, 0u64);
        for i in 0..preds.len() {
            let (p, t) = (&preds[i].assessment, &truths[i]);
            if p.present && t.present { tp += 1 }
            if p.present && !t.present { fp += 1 }
            if !p.present && t.present { fn_ += 1 }
            if !p.present && !t.present { tn += 1 }
            if p.location == t.location { loc_all += 1 }
            if p.quantity == t.quantity { qty_all += 1 }
            if t.present {
                solar += 1;
                if p.location == t.location { loc_solar += 1 }
                if p.quantity == t.quantity { qty_solar += 1 }
            }
        }
        let c = confusion(&preds, &truths).unwrap();
        prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let n = preds.len() as f64;
        prop_assert_eq!(exact_match_accuracy(Field::Location, &preds, &truths, Subset::All).unwrap(), loc_all as f64 / n);
        prop_assert_eq!(exact_match_accuracy(Field::Quantity, &preds, &truths, Subset::All).unwrap(), qty_all as f64 / n);
        if solar > 0 {
            prop_assert_eq!(exact_match_accuracy(Field::Location, &preds, &truths, Subset::SolarOnly).unwrap(), loc_solar as f64 / solar as f64);
            prop_assert_eq!(exact_match_accuracy(Field::Quantity, &preds, &truths, Subset::SolarOnly).unwrap(), qty_solar as f64 / solar as f64);
        }
        // Support-weighted recall is overall accuracy.
        let w = weighted_average(&class_metrics(&c), &class_metrics(&c.flipped())).unwrap();
        prop_assert!((w.recall - (tp + tn) as f64 / n).abs() < 1e-12);
        prop_assert_eq!(w.support, preds.len() as u64);
    }

    #[test]
    fn metric_bounds(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let c = pvscan_core::evaluation::ConfusionCounts { tp, fp, fn_, tn };
        let m = class_metrics(&c);
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if m.precision > 0.0 && m.recall > 0.0 {
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        }
    }

    #[test]
    fn weighted_average_is_symmetric(
        s in (0u64..100, 0.0f64..=1.0, 0.0f64..=1.0),
        n in (0u64..100, 0.0f64..=1.0, 0.0f64..=1.0),
    ) {
        prop_assume!(s.0 + n.0 > 0);
        let mk = |(support, p, r): (u64, f64, f64)| ClassMetrics {
            precision: p,
            recall: r,
            f1: pvscan_core::evaluation::f1_score(p, r),
            accuracy: r,
            support,
            degenerate: false,
        };
        let (a, b) = (mk(s), mk(n));
        let ab = weighted_average(&a, &b).unwrap();
        let ba = weighted_average(&b, &a).unwrap();
        prop_assert!((ab.precision - ba.precision).abs() < 1e-12);
        prop_assert!((ab.recall - ba.recall).abs() < 1e-12);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
    }

    #[test]
    fn bce_is_minimized_at_label_mean(labels in prop::collection::vec(any::<bool>(), 1..50)) {
        let mean = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
        let loss = |p: f64| bce_loss(&vec![p; labels.len()], &labels).unwrap();
        let (best, _) = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .map(|p| (p, loss(p)))
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        prop_assert!((best - mean).abs() <= 0.001 + 1e-9, "best {best}, mean {mean}");
    }

    #[test]
    fn triage_partitions_its_input(records in records(), t in 0.0f64..=1.0, m in 0.0f64..0.5) {
        let cfg = TriageConfig::new(t, m).unwrap();
        let out = triage_batch(&records, &cfg);
        prop_assert_eq!(out.accepted.len() + out.queue.len(), records.len());
        let mut ids: Vec<&str> = out.accepted.iter().map(|l| l.tile_id.as_str())
            .chain(out.queue.iter().map(|i| i.tile_id.as_str()))
            .collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), records.len());
        prop_assert!(out.accepted.iter().all(|l| l.annotator == "auto"));
        prop_assert!(out.queue.windows(2).all(|w| w[0].confidence() <= w[1].confidence()));
        for r in &records {
            if !r.outcome.is_accepted() {
                prop_assert!(out.queue.iter().any(|i| i.tile_id == r.tile_id));
            }
        }
    }

    #[test]
    fn review_set_grows_with_thresholds(records in records(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, m1 in 0.0f64..0.5, m2 in 0.0f64..0.5) {
        let lo = TriageConfig::new(t1.min(t2), m1.min(m2)).unwrap();
        let hi = TriageConfig::new(t1.max(t2), m1.max(m2)).unwrap();
        let before: Vec<String> = triage_batch(&records, &lo).queue.into_iter().map(|i| i.tile_id).collect();
        let after: Vec<String> = triage_batch(&records, &hi).queue.into_iter().map(|i| i.tile_id).collect();
        prop_assert!(before.iter().all(|id| after.contains(id)));
    }

    #[test]
    fn kde_integrates_to_one(samples in prop::collection::vec(0.0f64..=1.0, 1..80)) {
        let k = gaussian_kde(&samples).unwrap();
        prop_assert_eq!(k.grid.len(), 201);
        prop_assert!(k.grid.iter().all(|p| p.1 >= 0.0));
        prop_assert!((k.integral() - 1.0).abs() < 1e-3, "{}", k.integral());
    }

    #[test]
    fn median_matches_sorting(values in prop::collection::vec(0.0f64..=1.0, 1..100)) {
        let mut v = values.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let expected = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        prop_assert_eq!(median(&values), Some(expected));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slicing_reassembles_exactly(w in 1u32..=60, h in 1u32..=60, seed in any::<u64>()) {
        let (w, h) = (w * 4, h * 4);
        let raster = RgbaImage::from_fn(w, h, |x, y| {
            let v = seed.wrapping_mul(31).wrapping_add((x * 7919 + y * 104729) as u64);
            Rgba([(v % 251) as u8, (v % 241) as u8, (v % 239) as u8, 255])
        });
        let scene = SceneImage::new(raster.clone(), GeoPoint { lat: 0.0, lon: 0.0 }, 20, "p", DateTime::UNIX_EPOCH).unwrap();
        let tiles = slice_scene(&scene);
        prop_assert_eq!(tiles.len(), 16);
        prop_assert_eq!(reassemble(&tiles).unwrap(), raster);
    }
}

#[test]
fn strict_mode_rejects_single_field_mutations() {
    let base: serde_json::Value = serde_json::from_str(&serialize_assessment(&PvAssessment {
        present: true,
        location: LocationLabel::TopLeft,
        quantity: QuantityBucket::ZeroToOne,
        likelihood: 0.98,
        confidence: 0.9,
    }))
    .unwrap();
    let mutations: Vec<(&str, serde_json::Value)> = vec![
        ("solar_panels_present", "yes".into()),
        ("solar_panels_present", false.into()),
        ("location", "northwest".into()),
        ("location", "Top-Left".into()),
        ("location", "NA".into()),
        ("quantity", "3".into()),
        ("quantity", "NA".into()),
        ("likelihood_of_solar_panels_present", 1.5.into()),
        ("likelihood_of_solar_panels_present", "0.98".into()),
        ("confidence_of_solar_panels_present", (-0.1).into()),
        (
            "confidence_of_solar_panels_present",
            serde_json::Value::Null,
        ),
    ];
    for (field, value) in mutations {
        let mut v = base.clone();
        v[field] = value.clone();
        let out: ParseOutcome = parse_model_response(&v.to_string(), ParseMode::Strict);
        assert_eq!(out.status, ParseStatus::Rejected, "{field} = {value}");
    }
    let mut missing = base.clone();
    missing.as_object_mut().unwrap().remove("quantity");
    assert_eq!(
        parse_model_response(&missing.to_string(), ParseMode::Strict).status,
        ParseStatus::Rejected
    );
    let mut extra = base.clone();
    extra["notes"] = "roof".into();
    assert_eq!(
        parse_model_response(&extra.to_string(), ParseMode::Strict).status,
        ParseStatus::Rejected
    );
}
