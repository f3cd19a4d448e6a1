//! Synthetic "putting" scenarios with known phases.
//!
//! Each video shows a static reference object (object2). A hand enters from
//! the right edge carrying object1 (phase b), deposits it (c), leaves (d),
//! and the result stays visible (e). The three classes differ only in where
//! object1 comes to rest:
//!
//! * 106, into: inside object2's box, at object2's depth.
//! * 112, onto: resting on object2's top edge, at object2's depth.
//! * 118, underneath: inside or just below object2's box, and farther away
//!   than object2 by `0.6 * depth_signal` raw depth units.
//!
//! The vertical rest positions of 106 and 118 overlap on purpose, so that
//! in 2D alone the two classes are only partly separable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::phase::{PhaseSegmentation, N_PHASES};
use crate::seed::{derive_seed, rng_for};
use crate::track::{BoundingBox, ClassId, FrameAnnotation, VideoSample};

pub const INTO: ClassId = 106;
pub const ONTO: ClassId = 112;
pub const UNDERNEATH: ClassId = 118;
pub const SYNTH_CLASSES: [ClassId; 3] = [INTO, ONTO, UNDERNEATH];

/// Raw depth by which an object put underneath lies behind the reference.
pub const UNDERNEATH_DEPTH_GAP: f64 = 0.6;

const PHASE_WEIGHTS: [f64; N_PHASES] = [0.15, 0.25, 0.2, 0.2, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub n_frames: usize,
    /// Per-frame stddev of box position jitter.
    pub noise_sigma: f64,
    pub depth_noise_sigma: f64,
    /// Scales the class-discriminative depth separation, in `[0, 1]`.
    pub depth_signal: f64,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            n_frames: 40,
            noise_sigma: 0.005,
            depth_noise_sigma: 0.02,
            depth_signal: 1.0,
            seed: 0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 5 {
            return Err(TdmError::Argument(format!(
                "n_frames must be at least 5, got {}",
                self.n_frames
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("depth_noise_sigma", self.depth_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TdmError::Argument(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.depth_signal) {
            return Err(TdmError::Argument(format!(
                "depth_signal must lie in [0, 1], got {}",
                self.depth_signal
            )));
        }
        Ok(())
    }
}

/// Splits `n` frames into five non-empty phases with jittered proportions.
fn phase_lengths(n: usize, rng: &mut ChaCha8Rng) -> [usize; N_PHASES] {
    let weights = PHASE_WEIGHTS.map(|w| w + rng.random_range(-0.04..0.04));
    let total: f64 = weights.iter().sum();
    let spare = (n - N_PHASES) as f64;
    let raw = weights.map(|w| w / total * spare);
    let mut lengths = raw.map(|r| 1 + r.floor() as usize);
    let mut order: Vec<usize> = (0..N_PHASES).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = n - lengths.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        lengths[i] += 1;
        missing -= 1;
    }
    lengths
}

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
}

impl Point {
    fn lerp(self, to: Point, t: f64) -> Point {
        Point {
            x: self.x + (to.x - self.x) * t,
            y: self.y + (to.y - self.y) * t,
        }
    }
}

struct Jitter {
    position: Option<Normal<f64>>,
    depth: Option<Normal<f64>>,
}

impl Jitter {
    fn new(params: &ScenarioParams) -> Self {
        let make = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma"));
        Jitter {
            position: make(params.noise_sigma),
            depth: make(params.depth_noise_sigma),
        }
    }

    fn place(&self, c: Point, w: f64, h: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
        let (mut x, mut y) = (c.x - w / 2.0, c.y - h / 2.0);
        if let Some(n) = &self.position {
            x += n.sample(rng);
            y += n.sample(rng);
        }
        BoundingBox {
            x: x.clamp(0.0, 1.0 - w),
            y: y.clamp(0.0, 1.0 - h),
            w,
            h,
        }
    }

    fn depth(&self, d: f64, rng: &mut ChaCha8Rng) -> f64 {
        d + self.depth.as_ref().map_or(0.0, |n| n.sample(rng))
    }
}

/// Generates one labelled video of class 106, 112 or 118.
pub fn gen_sample(class_id: ClassId, params: &ScenarioParams) -> Result<VideoSample> {
    params.validate()?;
    if !SYNTH_CLASSES.contains(&class_id) {
        return Err(TdmError::Argument(format!(
            "synthetic class must be one of {SYNTH_CLASSES:?}, got {class_id}"
        )));
    }
    // The class only decides the rest position, so equal seeds give videos
    // that differ in nothing else.
    let mut rng = rng_for(params.seed, &[]);
    let n = params.n_frames;
    let lengths = phase_lengths(n, &mut rng);
    let mut bounds = [0usize; N_PHASES + 1];
    for i in 0..N_PHASES {
        bounds[i + 1] = bounds[i] + lengths[i];
    }

    // Reference object.
    let (w2, h2) = (rng.random_range(0.26..0.34), rng.random_range(0.26..0.34));
    let (x2, y2) = (rng.random_range(0.15..0.55), rng.random_range(0.45..0.62));
    let ref_centre = Point {
        x: x2 + w2 / 2.0,
        y: y2 + h2 / 2.0,
    };
    // Moved object and hand.
    let (w1, h1) = (rng.random_range(0.08..0.12), rng.random_range(0.08..0.12));
    let (hw, hh) = (rng.random_range(0.10..0.13), rng.random_range(0.10..0.13));
    let grip = Point { x: 0.03, y: -0.06 };

    let rest_x = ref_centre.x + rng.random_range(-1.0..1.0) * 0.6 * (w2 - w1) / 2.0;
    let rest_y = match class_id {
        INTO => ref_centre.y + rng.random_range(-0.06..0.04),
        UNDERNEATH => ref_centre.y + rng.random_range(0.0..0.12),
        _ => y2 - h1 / 2.0 + rng.random_range(0.0..0.02),
    };
    let rest = Point { x: rest_x, y: rest_y };
    let release = Point {
        x: rest.x,
        y: rest.y - rng.random_range(0.10..0.14),
    };
    let entry = Point {
        x: 1.0 - hw / 2.0 - grip.x - 0.005,
        y: rng.random_range(0.2..0.35),
    };
    let exit = Point {
        x: 1.0 - hw / 2.0 - 0.005,
        y: rng.random_range(0.15..0.3),
    };

    let ref_depth = rng.random_range(1.8..2.2);
    let hand_depth = ref_depth - rng.random_range(0.35..0.45);
    let rest_depth = match class_id {
        UNDERNEATH => ref_depth + UNDERNEATH_DEPTH_GAP * params.depth_signal,
        _ => ref_depth,
    };
    let container: [f64; 2] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let container_noise = Normal::new(0.0, 0.05).expect("finite sigma");

    let jitter = Jitter::new(params);
    let with_grip = |p: Point| Point {
        x: p.x + grip.x,
        y: p.y + grip.y,
    };
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let mut f = FrameAnnotation::empty(t);
        let progress = |phase: usize| (t + 1 - bounds[phase]) as f64 / lengths[phase] as f64;
        let (object1, hand, object1_depth) = if t < bounds[1] {
            (None, None, None)
        } else if t < bounds[2] {
            let c = entry.lerp(release, progress(1));
            (Some(c), Some(with_grip(c)), Some(hand_depth))
        } else if t < bounds[3] {
            let u = progress(2);
            let c = release.lerp(rest, u);
            let d = hand_depth + (rest_depth - hand_depth) * u;
            (Some(c), Some(with_grip(c)), Some(d))
        } else if t < bounds[4] {
            let h = with_grip(rest).lerp(exit, progress(3));
            (Some(rest), Some(h), Some(rest_depth))
        } else {
            (Some(rest), None, Some(rest_depth))
        };

        f.object2 = Some(jitter.place(ref_centre, w2, h2, &mut rng));
        f.depth_object2 = Some(jitter.depth(ref_depth, &mut rng));
        f.container_object2 =
            Some((container[1] + container_noise.sample(&mut rng)).clamp(0.0, 1.0));
        if let Some(c) = object1 {
            f.object1 = Some(jitter.place(c, w1, h1, &mut rng));
            f.depth_object1 = object1_depth.map(|d| jitter.depth(d, &mut rng));
            f.container_object1 =
                Some((container[0] + container_noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        if let Some(c) = hand {
            f.hand = Some(jitter.place(c, hw, hh, &mut rng));
            f.depth_hand = Some(jitter.depth(hand_depth, &mut rng));
        }
        frames.push(f);
    }

    let phase_truth = PhaseSegmentation::from_starts([bounds[1], bounds[2], bounds[3], bounds[4]], n)?;
    let sample = VideoSample {
        video_id: format!("synth-{class_id}-{:016x}", params.seed),
        class_id: Some(class_id),
        frames,
        phase_truth: Some(phase_truth),
    };
    sample.validate()?;
    Ok(sample)
}

/// `3 * n_per_class` videos, interleaved 106, 112, 118, 106, ...; sample
/// `k` of class `c` is seeded by `(params.seed, c, k)`.
pub fn gen_dataset(n_per_class: usize, params: &ScenarioParams) -> Result<Vec<VideoSample>> {
    if n_per_class == 0 {
        return Err(TdmError::Argument("n_per_class must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(3 * n_per_class);
    for k in 0..n_per_class {
        for c in SYNTH_CLASSES {
            let sample_params = ScenarioParams {
                seed: derive_seed(params.seed, &[c as u64, k as u64]),
                ..*params
            };
            out.push(gen_sample(c, &sample_params)?);
        }
    }
    Ok(out)
}

/// Disjoint train and evaluation sets derived from one root seed.
pub fn gen_splits(
    n_train_per_class: usize,
    n_eval_per_class: usize,
    params: &ScenarioParams,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    let split = |tag: u64| ScenarioParams {
        seed: derive_seed(params.seed, &[tag]),
        ..*params
    };
    Ok((
        gen_dataset(n_train_per_class, &split(0))?,
        gen_dataset(n_eval_per_class, &split(1))?,
    ))
}
