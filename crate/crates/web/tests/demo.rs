use dicoop::prompt::Layout;
use dicoop::trainer::Schedule;
use dicoop_web::demo::{feature_map, layout_view, train_demo, TrainRequest};

#[test]
fn feature_map_projects_every_record() {
    let map = feature_map(0.8, 0.3, 1).unwrap();
    assert_eq!(map.points.len(), 7 * 4 * 8);
    assert!(map.explained > 0.0 && map.explained <= 1.0);
    assert!(map.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    let flat = feature_map(0.0, 0.3, 1).unwrap();
    assert!(flat.centroid_probe < map.centroid_probe);
}

#[test]
fn train_demo_reports_curves_and_accuracy() {
    let req = TrainRequest {
        epochs: 12,
        holdout: "domain_2".into(),
        ..TrainRequest::default()
    };
    let summary = train_demo(&req).unwrap();
    assert_eq!(summary.class_loss.len(), 12);
    assert_eq!(summary.per_class_accuracy.len(), 7);
    assert!((0.0..=1.0).contains(&summary.target_accuracy));
    assert!((0.0..=1.0).contains(&summary.domain_probe));

    let bad = TrainRequest {
        holdout: "domain_9".into(),
        ..req
    };
    assert!(train_demo(&bad).is_err());
}

#[test]
fn layout_view_matches_masks_and_schedule() {
    let view = layout_view(Layout::Cfp, 8, Schedule::DannRamp, 1.0, 11).unwrap();
    assert_eq!(view.class_rows, [true, true, true, true, false, false, false, false]);
    assert_eq!(view.domain_rows, [false, false, false, false, true, true, true, true]);
    assert_eq!(view.lambda_curve.first(), Some(&(0.0, 0.0)));
    assert!((view.lambda_curve[10].1 - 0.9999092042625952).abs() < 1e-12);
    assert!(layout_view(Layout::Dfp, 7, Schedule::Constant, 1.0, 11).is_err());
}
