use stereopaint::gradcheck::{self, corrupted_backward, run_case, GradCase, TOLERANCE};

#[test]
fn wrong_backward_is_detected_for_every_seed() {
    let bad = GradCase {
        name: "corrupted",
        group: "fixture",
        tolerance: TOLERANCE,
        max_skipped: 0.0,
        run: corrupted_backward,
    };
    for s in gradcheck::SEEDS {
        assert!(!run_case(&bad, &[s]).unwrap().passed());
    }
}
