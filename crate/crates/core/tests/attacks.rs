mod common;

use dupnet::attacks::{self, CwConfig, DropOrder, SaliencyConfig, SetMetric};
use dupnet::classifier::{self, ClassifierParams, TrainConfig};
use dupnet::dataset::{self, DatasetSpec};
use dupnet::{metrics, LabeledCloud, ShapeFamily};
use std::sync::OnceLock;

struct Fixture {
    params: ClassifierParams,
    test: Vec<LabeledCloud>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = DatasetSpec {
            classes: vec![ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus],
            train_per_class: 20,
            test_per_class: 4,
            points: 128,
            jitter: 0.005,
            seed: 5,
        };
        let ds = dataset::generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 0.003,
            ..Default::default()
        };
        let (params, _) = classifier::train(&ds.train, None, 3, &cfg, |_| {}).unwrap();
        Fixture { params, test: ds.test }
    })
}

fn quick_cw() -> CwConfig {
    CwConfig {
        steps: 60,
        binary_search_rounds: 2,
        added_points: 16,
        ..Default::default()
    }
}

#[test]
fn cw_shift_stays_in_the_unit_cube_and_reports_true_distortion() {
    let f = fixture();
    for s in f.test.iter().take(6) {
        let r = attacks::cw_shift(&f.params, &s.cloud, s.label, &quick_cw()).unwrap();
        assert_eq!(r.cloud.len(), s.cloud.len());
        assert!(r.cloud.points().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        let again = attacks::recompute_shift_distortion(&s.cloud, &r.cloud).unwrap();
        assert!((again - r.distortion).abs() < 1e-9);
        if r.success {
            assert_ne!(classifier::predict(&f.params, &r.cloud), s.label);
        }
        assert_eq!(r.predicted, classifier::predict(&f.params, &r.cloud));
        assert_eq!(r, attacks::cw_shift(&f.params, &s.cloud, s.label, &quick_cw()).unwrap());
    }
}

#[test]
fn targeted_success_means_target_prediction() {
    let f = fixture();
    let s = &f.test[0];
    let target = (s.label + 1) % 3;
    let cfg = CwConfig { target: Some(target), ..quick_cw() };
    let r = attacks::cw_shift(&f.params, &s.cloud, s.label, &cfg).unwrap();
    assert_eq!(r.success, classifier::predict(&f.params, &r.cloud) == target);
}

#[test]
fn cw_add_extends_the_clean_cloud() {
    let f = fixture();
    for metric in [SetMetric::Hausdorff, SetMetric::Chamfer] {
        for s in f.test.iter().take(3) {
            let cfg = quick_cw();
            let r = attacks::cw_add(&f.params, &s.cloud, s.label, &cfg, metric).unwrap();
            let n = s.cloud.len();
            if r.cloud.len() == n {
                // Already misclassified: returned untouched.
                assert_ne!(classifier::predict(&f.params, &s.cloud), s.label);
                continue;
            }
            assert_eq!(r.cloud.len(), n + cfg.added_points);
            assert_eq!(&r.cloud.points()[..n], s.cloud.points());
            let added = &r.cloud.points()[n..];
            let want = match metric {
                SetMetric::Hausdorff => common::hausdorff_brute(added, s.cloud.points()),
                SetMetric::Chamfer => common::one_sided_chamfer_brute(s.cloud.points(), added),
            };
            assert!((r.distortion - want).abs() < 1e-9);
            let again = attacks::recompute_add_distortion(&s.cloud, &r.cloud, metric).unwrap();
            assert!((again - r.distortion).abs() < 1e-9);
        }
    }
}

#[test]
fn drop_attack_removes_exactly_total_drop_points() {
    let f = fixture();
    let s = &f.test[1];
    for order in [DropOrder::Highest, DropOrder::Lowest] {
        let cfg = SaliencyConfig { total_drop: 40, loops: 4, order, ..Default::default() };
        let r = attacks::drop_attack(&f.params, &s.cloud, s.label, &cfg).unwrap();
        assert_eq!(r.cloud.len(), s.cloud.len() - 40);
        assert_eq!(r.distortion, 40.0);
        assert_eq!(metrics::hausdorff_directed(r.cloud.points(), s.cloud.points()).unwrap(), 0.0);
        assert_eq!(r, attacks::drop_attack(&f.params, &s.cloud, s.label, &cfg).unwrap());
    }
    let bad = SaliencyConfig { total_drop: 30, loops: 4, ..Default::default() };
    assert!(attacks::drop_attack(&f.params, &s.cloud, s.label, &bad).is_err());
}

#[test]
fn saliency_matches_its_definition() {
    let f = fixture();
    let s = &f.test[2];
    let scores = attacks::saliency_scores(&f.params, &s.cloud, s.label, 1.0).unwrap();
    let g = classifier::loss_and_grads(&f.params, &s.cloud, s.label).points;
    let center = dupnet::geom::coordinate_median(s.cloud.points());
    for ((p, gi), sc) in s.cloud.points().iter().zip(&g).zip(&scores) {
        let rel = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let r = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        let want = -r * (rel[0] * gi[0] + rel[1] * gi[1] + rel[2] * gi[2]);
        assert!((sc - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}
