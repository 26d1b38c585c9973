use inpaint_compose_studio::conformance::{crash_sweep, random_walk, reachable};
use inpaint_compose_studio::RoundState;

#[test]
fn reachability_matches_the_documented_transitions() {
    use RoundState::*;
    for a in [Pending, Training, Sampling, Review] {
        assert!(reachable(a, a));
        assert!(reachable(a, a.next().unwrap()));
    }
    assert!(!reachable(Review, Training));
    assert!(!reachable(Review, FailedClosed));
    assert!(!reachable(Closed, FailedClosed));
    assert!(!reachable(FailedClosed, Closed));
    assert!(reachable(Pending, Review));
}

#[test]
fn crash_at_every_persistence_point_resumes_legally() {
    let dir = tempfile::tempdir().unwrap();
    let points = crash_sweep(dir.path()).unwrap();
    assert!(points > 20, "only {points} persistence points");
}

#[test]
fn random_operation_sequences_stay_legal() {
    let dir = tempfile::tempdir().unwrap();
    let r = random_walk(dir.path(), 10_000, 2024).unwrap();
    assert_eq!(r.ops, 10_000);
    assert!(r.projects >= 3 && r.crashes > 100 && r.restarts > r.crashes);
    for st in ["Closed", "FailedClosed", "Review"] {
        assert!(r.states.contains_key(st), "never reached {st}: {:?}", r.states);
    }
}
