//! Synthetic ad-hoc microphone-array scenes.
//!
//! Rooms, speaker and microphone placement follow the ranges used for
//! simulated ad-hoc arrays: length and width in [5, 25] m, height in
//! [2.7, 4] m, speaker more than 0.2 m from every wall and at least 0.3 m
//! from every microphone. Acoustics are reduced to distance attenuation
//! `a_k = 1 / max(d_k, 0.3)` plus white noise, applied to a shared clean
//! latent sequence that stands in for an utterance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const ROOM_XY_RANGE: (f64, f64) = (5.0, 25.0);
pub const ROOM_HEIGHT_RANGE: (f64, f64) = (2.7, 4.0);
pub const MIN_WALL_DISTANCE: f64 = 0.2;
pub const MIN_MIC_DISTANCE: f64 = 0.3;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Reported SNR of a noiseless channel.
pub const NOISELESS_SNR_DB: f64 = 99.0;
/// Channels at or below this SNR count as noise channels.
pub const NOISE_CHANNEL_DB: f64 = -10.0;

pub type Point = [f64; 3];

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-channel SNR model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityProfile {
    /// Every channel in `[floor_db, floor_db + 20]`.
    AllClean { floor_db: f64 },
    /// The `floor(C/2)` microphones farthest from the speaker are noise
    /// channels in `[-30, -10]` dB; the rest are in `[10, 30]` dB.
    HalfNoise,
    /// The `noisy_channels` farthest microphones draw from `noisy_db`, the
    /// others from `clean_db`.
    Custom {
        noisy_channels: usize,
        clean_db: (f64, f64),
        noisy_db: (f64, f64),
    },
    /// Every channel noiseless.
    Noiseless,
}

impl QualityProfile {
    pub fn all_clean() -> Self {
        QualityProfile::AllClean { floor_db: 10.0 }
    }

    /// `(noise channel count, clean range, noisy range)` for `c` channels.
    fn resolve(&self, c: usize) -> Result<(usize, (f64, f64), (f64, f64))> {
        let (n, clean, noisy) = match *self {
            QualityProfile::AllClean { floor_db } => (0, (floor_db, floor_db + 20.0), (0.0, 0.0)),
            QualityProfile::HalfNoise => (c / 2, (10.0, 30.0), (-30.0, -10.0)),
            QualityProfile::Custom {
                noisy_channels,
                clean_db,
                noisy_db,
            } => (noisy_channels, clean_db, noisy_db),
            QualityProfile::Noiseless => (0, (NOISELESS_SNR_DB, NOISELESS_SNR_DB), (0.0, 0.0)),
        };
        if n > c {
            return Err(Error::InfeasibleProfile(format!(
                "{n} noise channels requested out of {c}"
            )));
        }
        let bad = |r: (f64, f64)| !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1);
        if bad(clean) || (n > 0 && bad(noisy)) {
            return Err(Error::InfeasibleProfile(format!(
                "malformed SNR ranges clean {clean:?}, noisy {noisy:?}"
            )));
        }
        if n > 0 && n < c && noisy.1 >= clean.0 {
            return Err(Error::InfeasibleProfile(format!(
                "noise range {noisy:?} overlaps clean range {clean:?}"
            )));
        }
        Ok((n, clean, noisy))
    }
}

impl std::str::FromStr for QualityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-clean" => Ok(QualityProfile::all_clean()),
            "half-noise" => Ok(QualityProfile::HalfNoise),
            "noiseless" => Ok(QualityProfile::Noiseless),
            other => Err(Error::InvalidArgument(format!(
                "unknown quality profile {other:?} (all-clean, half-noise, noiseless)"
            ))),
        }
    }
}

/// Room geometry, placements and per-channel noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// (length, width, height) in metres.
    pub room: Point,
    pub mics: Vec<Point>,
    pub speaker: Point,
    /// Standard deviation of the additive noise, per channel.
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
}

impl Scene {
    pub fn channels(&self) -> usize {
        self.mics.len()
    }

    pub fn mic_distance(&self, k: usize) -> f64 {
        distance(&self.speaker, &self.mics[k])
    }

    /// Attenuation `1 / max(d, 0.3)` of channel `k`.
    pub fn attenuation(&self, k: usize) -> f64 {
        1.0 / self.mic_distance(k).max(MIN_MIC_DISTANCE)
    }

    /// Checks the placement constraints; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let [l, w, h] = self.room;
        if !(ROOM_XY_RANGE.0..=ROOM_XY_RANGE.1).contains(&l)
            || !(ROOM_XY_RANGE.0..=ROOM_XY_RANGE.1).contains(&w)
            || !(ROOM_HEIGHT_RANGE.0..=ROOM_HEIGHT_RANGE.1).contains(&h)
        {
            return Err(format!("room {:?} out of range", self.room));
        }
        let inside = |p: &Point| p.iter().zip(&self.room).all(|(&x, &r)| (0.0..=r).contains(&x));
        for (i, (&x, &r)) in self.speaker.iter().zip(&self.room).enumerate() {
            if x <= MIN_WALL_DISTANCE || r - x <= MIN_WALL_DISTANCE {
                return Err(format!("speaker within {MIN_WALL_DISTANCE} m of wall on axis {i}"));
            }
        }
        for (k, m) in self.mics.iter().enumerate() {
            if !inside(m) {
                return Err(format!("mic {k} outside room"));
            }
            if distance(m, &self.speaker) < MIN_MIC_DISTANCE {
                return Err(format!("mic {k} closer than {MIN_MIC_DISTANCE} m"));
            }
        }
        if self.noise_sigma.len() != self.mics.len() {
            return Err("noise_sigma length differs from mic count".into());
        }
        Ok(())
    }
}

/// Samples a room and placements, then assigns per-channel noise levels.
///
/// Noise levels are chosen so that a unit-RMS latent reaches the SNR drawn
/// from `profile`; noise channels are the microphones farthest from the
/// speaker.
pub fn generate_scene(c_channels: usize, profile: &QualityProfile, rng: &mut Rng) -> Result<Scene> {
    if c_channels == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one microphone".into()));
    }
    let (n_noisy, clean_db, noisy_db) = profile.resolve(c_channels)?;
    let seed = rng.seed();
    let room = [
        rng.uniform(ROOM_XY_RANGE.0, ROOM_XY_RANGE.1),
        rng.uniform(ROOM_XY_RANGE.0, ROOM_XY_RANGE.1),
        rng.uniform(ROOM_HEIGHT_RANGE.0, ROOM_HEIGHT_RANGE.1),
    ];
    let mut speaker = [0.0; 3];
    for (x, &r) in speaker.iter_mut().zip(&room) {
        // Open interval: resample the (measure-zero) boundary draw.
        let mut attempts = 0;
        loop {
            *x = rng.uniform(MIN_WALL_DISTANCE, r - MIN_WALL_DISTANCE);
            if *x > MIN_WALL_DISTANCE {
                break;
            }
            attempts += 1;
            if attempts >= MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::SamplingExhausted(attempts));
            }
        }
    }
    let mut mics = Vec::with_capacity(c_channels);
    for _ in 0..c_channels {
        let mut attempts = 0;
        let mic = loop {
            let p = [
                rng.uniform(0.0, room[0]),
                rng.uniform(0.0, room[1]),
                rng.uniform(0.0, room[2]),
            ];
            if distance(&p, &speaker) >= MIN_MIC_DISTANCE {
                break p;
            }
            attempts += 1;
            if attempts >= MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::SamplingExhausted(attempts));
            }
        };
        mics.push(mic);
    }

    // Farthest n_noisy microphones become noise channels.
    let mut order: Vec<usize> = (0..c_channels).collect();
    order.sort_by(|&a, &b| {
        distance(&mics[a], &speaker)
            .total_cmp(&distance(&mics[b], &speaker))
            .then(a.cmp(&b))
    });
    let mut noise_sigma = vec![0.0; c_channels];
    for (rank, &k) in order.iter().enumerate() {
        let noisy = rank >= c_channels - n_noisy;
        let (lo, hi) = if noisy { noisy_db } else { clean_db };
        let snr = rng.uniform(lo, hi.max(lo));
        let a = 1.0 / distance(&mics[k], &speaker).max(MIN_MIC_DISTANCE);
        noise_sigma[k] = if snr >= NOISELESS_SNR_DB {
            0.0
        } else {
            a / 10f64.powf(snr / 20.0)
        };
    }
    Ok(Scene {
        room,
        mics,
        speaker,
        noise_sigma,
        seed,
    })
}

/// One rendered channel: the input to the shared per-channel encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelObservation {
    pub channel_id: usize,
    pub h: Matrix,
    pub snr_db: f64,
}

pub fn rms(m: &Matrix) -> f64 {
    if m.data().is_empty() {
        return 0.0;
    }
    (m.frobenius_sq() / m.data().len() as f64).sqrt()
}

/// `h_k = a_k · clean + sigma_k · N_k` for every microphone.
pub fn render_channels(scene: &Scene, clean_latent: &Matrix, rng: &mut Rng) -> Vec<ChannelObservation> {
    let signal_rms = rms(clean_latent);
    (0..scene.channels())
        .map(|k| {
            let a = scene.attenuation(k);
            let sigma = scene.noise_sigma[k];
            let mut h = clean_latent.scale(a);
            if sigma > 0.0 {
                for x in h.data_mut() {
                    *x += sigma * rng.normal();
                }
            }
            let snr_db = if sigma > 0.0 {
                20.0 * (a * signal_rms / sigma).log10()
            } else {
                NOISELESS_SNR_DB
            };
            ChannelObservation {
                channel_id: k,
                h,
                snr_db,
            }
        })
        .collect()
}

/// Index of the microphone closest to the speaker (lowest index on ties).
pub fn oracle_one_best(scene: &Scene) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..scene.channels() {
        let d = scene.mic_distance(k);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Dimensions and seed of the toy recognition task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Feature / model width.
    pub d_model: usize,
    /// Frames per utterance; one target token per frame.
    pub frames: usize,
    pub vocab: usize,
    /// Number of sinusoidal components; the latent spans `2 * components` dims.
    pub components: usize,
    pub task_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            frames: 8,
            vocab: 6,
            components: 2,
            task_seed: 0x5eed_ad0c,
        }
    }
}

/// Fixed mixing and read-out matrices shared by every utterance of a task.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    /// `2·components x d_model`: the latent lives in this row space.
    mixing: Matrix,
    /// `d_model x vocab`: token of a frame is the argmax of `frame · projection`.
    projection: Matrix,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        if spec.d_model == 0 || spec.frames == 0 || spec.vocab < 2 || spec.components == 0 {
            return Err(Error::InvalidArgument(format!("degenerate task {spec:?}")));
        }
        if 2 * spec.components > spec.d_model {
            return Err(Error::InvalidArgument("latent rank exceeds d_model".into()));
        }
        let mut rng = Rng::new(spec.task_seed);
        let mixing = rng.normal_matrix(2 * spec.components, spec.d_model);
        let projection = rng.normal_matrix(spec.d_model, spec.vocab);
        Ok(Self {
            spec,
            mixing,
            projection,
        })
    }

    /// A smooth `frames x d_model` sequence with unit RMS.
    pub fn sample_latent(&self, rng: &mut Rng) -> Matrix {
        let t_len = self.spec.frames;
        let comps: Vec<(f64, f64, f64)> = (0..self.spec.components)
            .map(|_| {
                (
                    rng.uniform(0.05, 0.35),
                    rng.uniform(0.0, std::f64::consts::TAU),
                    rng.uniform(0.5, 1.5),
                )
            })
            .collect();
        let basis = Matrix::from_fn(t_len, 2 * self.spec.components, |t, j| {
            let (f, phase, amp) = comps[j / 2];
            let arg = std::f64::consts::TAU * f * t as f64 + phase;
            amp * if j % 2 == 0 { arg.cos() } else { arg.sin() }
        });
        let latent = crate::tensor::matmul(&basis, &self.mixing).expect("shapes fixed by task");
        let r = rms(&latent);
        latent.scale(1.0 / r)
    }

    /// Target token of every frame.
    pub fn tokens(&self, latent: &Matrix) -> Vec<usize> {
        let scores = crate::tensor::matmul(latent, &self.projection).expect("shapes fixed by task");
        (0..scores.rows()).map(|t| argmax(scores.row(t))).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One multichannel utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub id: usize,
    pub scene: Scene,
    pub clean_latent: Matrix,
    pub observations: Vec<ChannelObservation>,
    pub target_tokens: Vec<usize>,
}

impl FusionSample {
    pub fn channels(&self) -> usize {
        self.observations.len()
    }

    /// Channels at or below the noise-channel SNR.
    pub fn noise_channels(&self) -> Vec<usize> {
        self.observations
            .iter()
            .filter(|o| o.snr_db <= NOISE_CHANNEL_DB)
            .map(|o| o.channel_id)
            .collect()
    }
}

/// `n_samples` utterances; sample `i` draws from the child stream `rng.child(i)`.
pub fn make_dataset(
    n_samples: usize,
    c_channels: usize,
    profile: &QualityProfile,
    task: &Task,
    rng: &Rng,
) -> Result<Vec<FusionSample>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    profile.resolve(c_channels)?;
    (0..n_samples)
        .map(|i| {
            let mut r = rng.child(i as u64);
            let scene = generate_scene(c_channels, profile, &mut r)?;
            let clean_latent = task.sample_latent(&mut r);
            let target_tokens = task.tokens(&clean_latent);
            let observations = render_channels(&scene, &clean_latent, &mut r);
            Ok(FusionSample {
                id: i,
                scene,
                clean_latent,
                observations,
                target_tokens,
            })
        })
        .collect()
}

/// Clean (latent, tokens) pairs for single-channel pre-training.
pub fn make_clean_utterances(n: usize, task: &Task, rng: &Rng) -> Vec<(Matrix, Vec<usize>)> {
    (0..n)
        .map(|i| {
            let mut r = rng.child(i as u64);
            let latent = task.sample_latent(&mut r);
            let tokens = task.tokens(&latent);
            (latent, tokens)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(8, &QualityProfile::HalfNoise, &mut Rng::new(11)).unwrap();
        let b = generate_scene(8, &QualityProfile::HalfNoise, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &QualityProfile::HalfNoise, &mut Rng::new(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_mic_scene() {
        let s = generate_scene(1, &QualityProfile::all_clean(), &mut Rng::new(3)).unwrap();
        assert_eq!(s.channels(), 1);
        assert!(s.mic_distance(0) >= MIN_MIC_DISTANCE);
        s.check_invariants().unwrap();
    }

    #[test]
    fn zero_channels_rejected() {
        assert!(generate_scene(0, &QualityProfile::HalfNoise, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn infeasible_profiles() {
        let too_many = QualityProfile::Custom {
            noisy_channels: 5,
            clean_db: (10.0, 20.0),
            noisy_db: (-20.0, -10.0),
        };
        assert!(matches!(
            generate_scene(4, &too_many, &mut Rng::new(0)),
            Err(Error::InfeasibleProfile(_))
        ));
        let overlap = QualityProfile::Custom {
            noisy_channels: 2,
            clean_db: (0.0, 20.0),
            noisy_db: (-20.0, 5.0),
        };
        assert!(generate_scene(4, &overlap, &mut Rng::new(0)).is_err());
        let task = Task::new(TaskSpec::default()).unwrap();
        assert!(make_dataset(2, 4, &overlap, &task, &Rng::new(0)).is_err());
    }

    #[test]
    fn noiseless_unit_distance_is_exact() {
        let scene = Scene {
            room: [10.0, 10.0, 3.0],
            mics: vec![[5.0, 6.0, 1.5]],
            speaker: [5.0, 5.0, 1.5],
            noise_sigma: vec![0.0],
            seed: 0,
        };
        let latent = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        let obs = render_channels(&scene, &latent, &mut Rng::new(1));
        assert_eq!(obs[0].h, latent);
        assert_eq!(obs[0].snr_db, NOISELESS_SNR_DB);
    }

    #[test]
    fn doubling_distance_costs_six_db() {
        let latent = Matrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).sin());
        let mk = |d: f64| Scene {
            room: [20.0, 20.0, 3.0],
            mics: vec![[5.0 + d, 5.0, 1.5]],
            speaker: [5.0, 5.0, 1.5],
            noise_sigma: vec![0.1],
            seed: 0,
        };
        let near = render_channels(&mk(1.5), &latent, &mut Rng::new(0))[0].snr_db;
        let far = render_channels(&mk(3.0), &latent, &mut Rng::new(0))[0].snr_db;
        assert!((near - far - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn oracle_one_best_examples() {
        let mut scene = Scene {
            room: [10.0, 10.0, 3.0],
            mics: vec![[1.0, 1.0, 1.0]],
            speaker: [5.0, 5.0, 1.5],
            noise_sigma: vec![0.0],
            seed: 0,
        };
        assert_eq!(oracle_one_best(&scene), 0);
        scene.mics = vec![[0.0, 5.0, 1.5], [5.5, 5.0, 1.5]];
        scene.noise_sigma = vec![0.0, 0.0];
        assert_eq!(oracle_one_best(&scene), 1);
        scene.mics = vec![[4.0, 5.0, 1.5], [6.0, 5.0, 1.5]];
        assert_eq!(oracle_one_best(&scene), 0);
    }

    #[test]
    fn half_noise_marks_farthest_channels() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let data = make_dataset(5, 16, &QualityProfile::HalfNoise, &task, &Rng::new(9)).unwrap();
        for s in &data {
            let noisy = s.noise_channels();
            assert_eq!(noisy.len(), 8);
            let min_noisy = noisy.iter().map(|&k| s.scene.mic_distance(k)).fold(f64::INFINITY, f64::min);
            for o in &s.observations {
                if !noisy.contains(&o.channel_id) {
                    assert!(o.snr_db >= 10.0 - 1e-9);
                    assert!(s.scene.mic_distance(o.channel_id) <= min_noisy);
                }
            }
            assert!(!noisy.contains(&oracle_one_best(&s.scene)));
        }
    }

    #[test]
    fn latent_is_unit_rms_and_labelled() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let latent = task.sample_latent(&mut Rng::new(4));
        assert_eq!(latent.shape(), (8, 32));
        assert!((rms(&latent) - 1.0).abs() < 1e-12);
        let tokens = task.tokens(&latent);
        assert_eq!(tokens.len(), 8);
        assert!(tokens.iter().all(|&t| t < 6));
    }
}
