use fedcrf_demo::{attack_curve, cluster_points, temperature_curve};

#[test]
fn clustering_returns_one_label_per_point() {
    let c = cluster_points(60, 3, 3, 4, true, 1).unwrap();
    assert_eq!(c.points.len(), 64);
    assert_eq!(c.assignments.len(), 64);
    assert_eq!(c.centers.len(), 3);
    assert!(c.assignments.iter().all(|&a| a < 3));
    assert!(cluster_points(0, 3, 3, 0, true, 1).is_err());
}

#[test]
fn temperature_curve_is_finite() {
    let c = temperature_curve(16, 8, 0.3, 2).unwrap();
    assert_eq!(c.tau.len(), c.as_written.len());
    assert!(c.as_written.iter().chain(&c.standard).all(|v| v.is_finite()));
    // Excluding the positive from the denominator can only lower the loss.
    assert!(c.as_written.iter().zip(&c.standard).all(|(a, s)| a <= s));
}

#[test]
fn attack_curve_has_one_point_per_k() {
    let c = attack_curve(1, 80, 40, 5, 3).unwrap();
    assert_eq!(c.top_k, [1, 2, 3, 4, 5]);
    assert!(c.f1.iter().all(|f| (0.0..=1.0).contains(f)));
}
