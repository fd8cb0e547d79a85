use std::time::Instant;

use posefield::synth::{gen_dataset, gen_pose, gen_template, PoseSampler, WormSpec};

#[test]
fn three_hundred_poses_in_under_five_seconds() {
    let spec = WormSpec::identity_a();
    let start = Instant::now();
    let data = gen_dataset(&spec, 300, 0, &PoseSampler::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(data.len(), 300);
    assert!(secs < 5.0, "{secs} s");
    let template = gen_template(&spec).unwrap();
    assert_eq!(template.face_count(), 400);
    assert!(data.iter().all(|(m, _)| m.same_connectivity(&template)));
}

#[test]
fn pose_parameters_carry_across_identities() {
    let (a, b) = (WormSpec::identity_a(), WormSpec::identity_b());
    let template_b = gen_template(&b).unwrap();
    for (posed_a, p) in gen_dataset(&a, 5, 9, &PoseSampler::default()).unwrap() {
        let posed_b = gen_pose(&b, &p).unwrap();
        assert!(posed_b.same_connectivity(&template_b));
        assert!(posed_b.same_connectivity(&posed_a));
        // the root cap is the fixed point of every pose
        assert_eq!(posed_b.vertices()[0], template_b.vertices()[0]);
        assert_ne!(posed_b.vertices(), template_b.vertices());
    }
}
