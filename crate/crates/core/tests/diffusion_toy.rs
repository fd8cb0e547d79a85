use posefield::diffusion::{train_diffusion, DiffusionConfig, ToyClusters};

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn toy_training_lowers_both_losses_and_hits_the_modes() {
    let toy = ToyClusters::generate(4, 4, 32, 0.2, 11).unwrap();
    let config = DiffusionConfig {
        steps: 5000,
        batch_size: 8,
        width: 64,
        seed: 2,
        ..DiffusionConfig::default()
    };
    let (model, history) = train_diffusion(&config, &toy.latents).unwrap();
    for h in [&history.keypoint, &history.feature] {
        let loss = h.column("loss").unwrap();
        let (first, last) = (
            window_mean(&loss[..100]),
            window_mean(&loss[loss.len() - 100..]),
        );
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }
    let near = (0..100)
        .filter(|&s| toy.distance(&model.sample_cascaded(s).unwrap()) <= 3.0)
        .count();
    assert!(near >= 95, "{near}/100 samples near a center");
    assert_eq!(
        model.sample_cascaded(7).unwrap().keypoints,
        model.sample_cascaded(7).unwrap().keypoints
    );
}
