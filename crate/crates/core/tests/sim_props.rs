use sparsemax_fusion::sim::{
    generate_scene, make_dataset, oracle_one_best, render_channels, rms, QualityProfile, Task, TaskSpec,
    MIN_MIC_DISTANCE, NOISE_CHANNEL_DB,
};
use sparsemax_fusion::{Matrix, Rng};

#[test]
fn thousand_scenes_hold_geometry() {
    let root = Rng::new(100);
    for i in 0..1000 {
        let c = 1 + i % 30;
        let profile = if i % 2 == 0 { QualityProfile::HalfNoise } else { QualityProfile::all_clean() };
        let s = generate_scene(c, &profile, &mut root.child(i as u64)).unwrap();
        s.check_invariants().unwrap_or_else(|e| panic!("scene {i}: {e}"));
        assert_eq!(s.channels(), c);
        assert!((0..c).all(|k| s.mic_distance(k) >= MIN_MIC_DISTANCE));
    }
}

#[test]
fn one_best_is_exhaustive_minimum() {
    let root = Rng::new(101);
    for i in 0..1000 {
        let s = generate_scene(2 + i % 20, &QualityProfile::HalfNoise, &mut root.child(i as u64)).unwrap();
        let best = oracle_one_best(&s);
        let min = (0..s.channels()).map(|k| s.mic_distance(k)).fold(f64::INFINITY, f64::min);
        assert_eq!(s.mic_distance(best), min);
        assert!((0..best).all(|k| s.mic_distance(k) > min));
    }
}

#[test]
fn stated_snr_matches_empirical() {
    let mut rng = Rng::new(102);
    let clean = Matrix::from_fn(100, 100, |i, j| ((i * 7 + j * 3) as f64 * 0.1).sin() + 0.3);
    for i in 0..20 {
        let s = generate_scene(6, &QualityProfile::HalfNoise, &mut Rng::new(200 + i)).unwrap();
        for obs in render_channels(&s, &clean, &mut rng) {
            let a = s.attenuation(obs.channel_id);
            let signal = clean.scale(a);
            let noise = obs.h.add(&signal.scale(-1.0)).unwrap();
            let empirical = 20.0 * (rms(&signal) / rms(&noise)).log10();
            assert!((empirical - obs.snr_db).abs() < 0.5, "{empirical} vs {}", obs.snr_db);
        }
    }
}

#[test]
fn snr_falls_with_distance_at_fixed_sigma() {
    let mut s = generate_scene(2, &QualityProfile::all_clean(), &mut Rng::new(103)).unwrap();
    s.noise_sigma = vec![0.1, 0.1];
    let clean = Matrix::from_fn(4, 4, |i, j| (i + j) as f64);
    let obs = render_channels(&s, &clean, &mut Rng::new(1));
    let (near, far) = if s.mic_distance(0) < s.mic_distance(1) { (0, 1) } else { (1, 0) };
    assert!(obs[near].snr_db >= obs[far].snr_db);
}

#[test]
fn half_noise_datasets_split_exactly() {
    let task = Task::new(TaskSpec::default()).unwrap();
    for c in [2, 16, 30] {
        let data = make_dataset(20, c, &QualityProfile::HalfNoise, &task, &Rng::new(104)).unwrap();
        for sample in &data {
            assert_eq!(sample.noise_channels().len(), c / 2);
            assert!(sample.observations.iter().all(|o| o.snr_db <= NOISE_CHANNEL_DB || o.snr_db >= 10.0));
            assert_eq!(sample.target_tokens, task.tokens(&sample.clean_latent));
            let shape = sample.observations[0].h.shape();
            assert!(sample.observations.iter().all(|o| o.h.shape() == shape && o.snr_db.is_finite()));
        }
    }
}

#[test]
fn all_clean_respects_floor() {
    let task = Task::new(TaskSpec::default()).unwrap();
    let profile = QualityProfile::AllClean { floor_db: 12.0 };
    let data = make_dataset(30, 8, &profile, &task, &Rng::new(105)).unwrap();
    assert!(data.iter().flat_map(|s| &s.observations).all(|o| o.snr_db >= 12.0 - 1e-9));
    assert!(data.iter().all(|s| s.noise_channels().is_empty()));
}

#[test]
fn datasets_are_seed_deterministic() {
    let task = Task::new(TaskSpec::default()).unwrap();
    let a = make_dataset(5, 16, &QualityProfile::HalfNoise, &task, &Rng::new(106)).unwrap();
    let b = make_dataset(5, 16, &QualityProfile::HalfNoise, &task, &Rng::new(106)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = make_dataset(5, 16, &QualityProfile::HalfNoise, &task, &Rng::new(107)).unwrap();
    assert_ne!(a, c);
}
