mod common;

use std::fs;

use common::{fake_studio, fixture_request, quick_round};
use inpaint_compose::imaging::BBox;
use inpaint_compose_studio::model::check_snapshot;
use inpaint_compose_studio::{RoundState, StudioError, Verdict};

#[test]
fn minimal_project_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    let p = s.create_project(&fixture_request(dir.path(), "p1", 1, 1)).unwrap();
    let snap = s.snapshot("p1").unwrap();
    assert_eq!(snap.project, p);
    assert!(snap.rounds.is_empty());
    assert_eq!(s.list_projects().unwrap(), vec![p]);
}

#[test]
fn create_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    let mut req = fixture_request(dir.path(), "p1", 2, 1);
    req.references[1].bbox = BBox::new(4, 4, 6, 6);
    match s.create_project(&req) {
        Err(StudioError::Invalid { field, .. }) => assert_eq!(field.as_deref(), Some("references[1].bbox")),
        other => panic!("{other:?}"),
    }
    let ok = fixture_request(dir.path(), "p1", 1, 1);
    s.create_project(&ok).unwrap();
    assert!(matches!(s.create_project(&ok), Err(StudioError::Conflict(_))));
    let mut bad_id = ok.clone();
    bad_id.id = "../x".into();
    assert!(matches!(s.create_project(&bad_id), Err(StudioError::Invalid { .. })));
}

#[test]
fn a_round_yields_backgrounds_times_samples_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 5, 4)).unwrap();
    let r = s.start_round("p", &quick_round(5)).unwrap();
    assert_eq!(r.state, RoundState::Review);
    assert_eq!(r.candidates.len(), 20);
    assert!(matches!(s.start_round("p", &quick_round(5)), Err(StudioError::WrongState(_))));
    let snap = s.snapshot("p").unwrap();
    check_snapshot(&snap).unwrap();
    assert_eq!(snap.project.current_bundle_hash, r.bundle_hash);
    let img = fs::read(s.candidate_image_path(&r.candidates[0].id).unwrap()).unwrap();
    assert_eq!(&img[..4], b"\x89PNG");
}

#[test]
fn verdicts_are_idempotent_persistent_and_state_bound() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 5, 1)).unwrap();
    let r = s.start_round("p", &quick_round(5)).unwrap();
    let cid = r.candidates[0].id.clone();
    s.review(&cid, Verdict::Accepted).unwrap();
    let r2 = s.review(&cid, Verdict::Accepted).unwrap();
    assert_eq!(r2.candidates.iter().filter(|c| c.verdict == Verdict::Accepted).count(), 1);
    assert!(matches!(s.review("p:1:bg0:99", Verdict::Accepted), Err(StudioError::NotFound(_))));

    drop(s);
    let (s, _) = fake_studio(dir.path());
    assert_eq!(s.round("p", 1).unwrap().candidates[0].verdict, Verdict::Accepted);
    s.close_round("p", 1).unwrap();
    assert!(matches!(s.review(&cid, Verdict::Rejected), Err(StudioError::WrongState(_))));
    assert!(matches!(s.close_round("p", 1), Err(StudioError::WrongState(_))));
}

#[test]
fn closing_promotes_accepted_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 5, 1)).unwrap();

    s.start_round("p", &quick_round(5)).unwrap();
    let p = s.close_round("p", 1).unwrap();
    assert_eq!(p.references.items.len(), 5, "nothing accepted");
    assert_eq!(s.round("p", 1).unwrap().state, RoundState::Closed);

    let r = s.start_round("p", &quick_round(5)).unwrap();
    assert_eq!(r.index, 2);
    s.review(&r.candidates[1].id, Verdict::Accepted).unwrap();
    s.review(&r.candidates[3].id, Verdict::Accepted).unwrap();
    s.review(&r.candidates[4].id, Verdict::Rejected).unwrap();
    let p = s.close_round("p", 2).unwrap();
    assert_eq!(p.references.items.len(), 7);
    assert_eq!(p.references.items[5].bbox, r.candidates[1].bbox);

    let r3 = s.start_round("p", &quick_round(1)).unwrap();
    assert_eq!(r3.reference_count, 7);
    check_snapshot(&s.snapshot("p").unwrap()).unwrap();
}

#[test]
fn next_round_records_the_previous_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 2, 1)).unwrap();
    let r1 = s.start_round("p", &quick_round(1)).unwrap();
    s.close_round("p", 1).unwrap();
    s.start_round("p", &quick_round(1)).unwrap();
    // The fake backend writes its inputs into the bundle file.
    let token = fs::read_to_string(s.store().round_dir("p", 2).join("model.bundle")).unwrap();
    assert!(token.contains(&format!("Some({:?})", r1.bundle_hash.unwrap())), "{token}");
}

#[test]
fn training_failure_closes_the_round_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (s, backend) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 2, 2)).unwrap();
    backend.set_fail_training(true);
    let r = s.start_round("p", &quick_round(2)).unwrap();
    assert_eq!(r.state, RoundState::FailedClosed);
    assert!(r.diagnostics.unwrap().contains("training failed"));
    assert!(r.candidates.is_empty());
    backend.set_fail_training(false);
    let r2 = s.start_round("p", &quick_round(2)).unwrap();
    assert_eq!((r2.index, r2.state), (2, RoundState::Review));
    check_snapshot(&s.snapshot("p").unwrap()).unwrap();
}

#[test]
fn metrics_report_for_latest_round() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = fake_studio(dir.path());
    s.create_project(&fixture_request(dir.path(), "p", 3, 2)).unwrap();
    assert!(matches!(s.metrics("p"), Err(StudioError::NotFound(_))));
    s.start_round("p", &quick_round(2)).unwrap();
    let rep = s.metrics("p").unwrap();
    assert!(!rep.partial, "{:?}", rep.missing);
    assert_eq!(rep.overall.n_pairs, 2);
    assert_eq!(rep.overall.n_samples, 4);
    assert!(rep.overall.clip_fg.is_some() && rep.overall.fid.is_some());
}
