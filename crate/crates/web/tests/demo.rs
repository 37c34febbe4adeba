use lda_core::Class;
use lda_web::Demo;

fn demo() -> Demo {
    Demo::train(3, 8, 5).unwrap()
}

#[test]
fn field_covers_grid_with_probabilities() {
    let d = demo();
    let f = d.field(16).unwrap();
    assert_eq!(f.len(), 256);
    assert!(f.iter().all(|s| (0.0..=1.0).contains(s)));
    // both decisions appear somewhere on the plane
    assert!(f.iter().any(|&s| s > 0.5) && f.iter().any(|&s| s < 0.5));
}

#[test]
fn prune_then_adapt_then_reset() {
    let mut d = demo();
    assert_eq!(d.bank().total(), 16);
    let pruned = d.prune(None, None).unwrap();
    let kept = pruned.live_prototypes + pruned.spoof_prototypes;
    assert!((2..=16).contains(&kept));
    assert!(pruned.target_hter_before.is_none());

    let adapted = d.adapt(1.5, 0.0, 30, 0).unwrap();
    assert_eq!(adapted.live_prototypes, pruned.live_prototypes + 1);
    assert_eq!(adapted.spoof_prototypes, pruned.spoof_prototypes + 1);
    assert!(adapted.target_hter_after.is_some());
    assert!(d.bank().is_unit());
    // test points plus 1000 target points, four numbers each
    assert_eq!(d.points().len(), 4 * 2000);

    d.reset();
    assert_eq!(d.bank().count(Class::Live), 8);
    assert_eq!(d.points().len(), 4 * 1000);
}

#[test]
fn explicit_thresholds_are_respected() {
    let mut d = demo();
    // nothing clears a threshold of 1, so only the mandatory pick survives
    let s = d.prune(Some(1.0), Some(1.0)).unwrap();
    assert_eq!((s.live_prototypes, s.spoof_prototypes), (1, 1));
}
