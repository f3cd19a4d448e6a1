//! Five-phase temporal segmentation.
//!
//! Every frame is summarized by an 11-dimensional [`FrameDescriptor`]. A
//! [`PhaseModel`] holds one diagonal Gaussian per phase over those
//! descriptors, fitted from phase-labelled videos. [`segment`] then finds
//! the monotone a..e labelling with the highest total log-likelihood by
//! dynamic programming over (frame, phase).
//!
//! Phase `c` must contain at least one frame; the others may be empty, so
//! videos that start or end in the middle of the manipulation are legal.
//! Among equal-scoring segmentations the one whose phase `c` starts
//! earliest and ends latest wins: boundary starts `(b, c, d, e)` are
//! compared lexicographically, smaller first for `b` and `c`, larger first
//! for `d` and `e`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::features::iou;
use crate::track::{BoundingBox, Entity, VideoSample};

pub const DESCRIPTOR_DIM: usize = 11;
pub const N_PHASES: usize = 5;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;
/// Imputed centroid distance for an absent entity; exceeds the in-frame
/// maximum of sqrt(2).
pub const DEFAULT_ABSENT_DISTANCE: f64 = 1.5;
/// Largest video accepted by [`brute_force_segment`].
pub const BRUTE_FORCE_MAX_FRAMES: usize = 16;

const PHASE_MODEL_FORMAT: &str = "tdm-phase-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseLabel {
    A,
    B,
    C,
    D,
    E,
}

impl PhaseLabel {
    pub const ALL: [PhaseLabel; N_PHASES] = [
        PhaseLabel::A,
        PhaseLabel::B,
        PhaseLabel::C,
        PhaseLabel::D,
        PhaseLabel::E,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'a' => Some(PhaseLabel::A),
            'b' => Some(PhaseLabel::B),
            'c' => Some(PhaseLabel::C),
            'd' => Some(PhaseLabel::D),
            'e' => Some(PhaseLabel::E),
            _ => None,
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Consecutive half-open frame ranges for phases a..e covering `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhaseSegmentation {
    /// Start of phases b, c, d, e. Phase a always starts at 0.
    starts: [usize; 4],
    n_frames: usize,
}

impl PhaseSegmentation {
    /// Builds a segmentation from the start frames of phases b, c, d, e.
    pub fn from_starts(starts: [usize; 4], n_frames: usize) -> Result<Self> {
        let [b, c, d, e] = starts;
        if !(b <= c && c <= d && d <= e && e <= n_frames) {
            return Err(TdmError::Argument(format!(
                "phase starts {starts:?} are not ordered within {n_frames} frames"
            )));
        }
        if c == d {
            return Err(TdmError::Argument("phase c must not be empty".into()));
        }
        Ok(PhaseSegmentation { starts, n_frames })
    }

    /// Builds a segmentation from explicit `(start, end)` pairs for a..e.
    pub fn from_ranges(ranges: [(usize, usize); N_PHASES], n_frames: usize) -> Result<Self> {
        if ranges[0].0 != 0 {
            return Err(TdmError::Argument("phase a must start at frame 0".into()));
        }
        for (i, w) in ranges.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(TdmError::Argument(format!(
                    "phase {} ends at {} but phase {} starts at {}",
                    PhaseLabel::ALL[i],
                    w[0].1,
                    PhaseLabel::ALL[i + 1],
                    w[1].0
                )));
            }
        }
        for (i, &(s, e)) in ranges.iter().enumerate() {
            if s > e {
                return Err(TdmError::Argument(format!(
                    "phase {} has start {s} after end {e}",
                    PhaseLabel::ALL[i]
                )));
            }
        }
        if ranges[4].1 != n_frames {
            return Err(TdmError::Argument(format!(
                "phase e ends at {} instead of {n_frames}",
                ranges[4].1
            )));
        }
        Self::from_starts(
            [ranges[1].0, ranges[2].0, ranges[3].0, ranges[4].0],
            n_frames,
        )
    }

    /// Builds a segmentation from a per-frame monotone label sequence.
    pub fn from_labels(labels: &[PhaseLabel]) -> Result<Self> {
        let n = labels.len();
        if labels.windows(2).any(|w| w[0] > w[1]) {
            return Err(TdmError::Argument("labels are not monotone".into()));
        }
        let mut starts = [n; 4];
        for (k, start) in starts.iter_mut().enumerate() {
            if let Some(pos) = labels.iter().position(|&l| l.index() > k) {
                *start = pos;
            }
        }
        Self::from_starts(starts, n)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn starts(&self) -> [usize; 4] {
        self.starts
    }

    pub fn range(&self, p: PhaseLabel) -> Range<usize> {
        let i = p.index();
        let start = if i == 0 { 0 } else { self.starts[i - 1] };
        let end = if i == 4 { self.n_frames } else { self.starts[i] };
        start..end
    }

    pub fn ranges(&self) -> [Range<usize>; N_PHASES] {
        PhaseLabel::ALL.map(|p| self.range(p))
    }

    pub fn label_of(&self, frame: usize) -> Option<PhaseLabel> {
        PhaseLabel::ALL
            .into_iter()
            .find(|&p| self.range(p).contains(&frame))
    }

    pub fn labels(&self) -> Vec<PhaseLabel> {
        let mut out = Vec::with_capacity(self.n_frames);
        for p in PhaseLabel::ALL {
            out.extend(self.range(p).map(|_| p));
        }
        out
    }
}

impl fmt::Display for PhaseSegmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in PhaseLabel::ALL.iter().enumerate() {
            let r = self.range(*p);
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{p}=[{},{})", r.start, r.end)?;
        }
        Ok(())
    }
}

/// Per-frame summary used by the phase scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDescriptor(pub [f64; DESCRIPTOR_DIM]);

impl FrameDescriptor {
    pub const NAMES: [&'static str; DESCRIPTOR_DIM] = [
        "hand_present",
        "hand_speed",
        "object1_speed",
        "object2_speed",
        "hand_obj1_distance",
        "hand_obj2_distance",
        "obj1_obj2_distance",
        "overlap_hand_obj1",
        "overlap_hand_obj2",
        "obj1_present",
        "obj2_present",
    ];

    pub fn values(&self) -> &[f64; DESCRIPTOR_DIM] {
        &self.0
    }
}

/// Knobs shared by descriptor extraction and model fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub variance_floor: f64,
    pub absent_distance: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            absent_distance: DEFAULT_ABSENT_DISTANCE,
        }
    }
}

fn displacement(prev: Option<&BoundingBox>, cur: Option<&BoundingBox>) -> f64 {
    match (prev, cur) {
        (Some(p), Some(c)) => {
            let (px, py) = p.centroid();
            let (cx, cy) = c.centroid();
            (cx - px).hypot(cy - py)
        }
        _ => 0.0,
    }
}

fn centroid_distance(a: Option<&BoundingBox>, b: Option<&BoundingBox>, absent: f64) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => {
            let (ax, ay) = a.centroid();
            let (bx, by) = b.centroid();
            (ax - bx).hypot(ay - by)
        }
        _ => absent,
    }
}

fn overlap(a: Option<&BoundingBox>, b: Option<&BoundingBox>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => iou(a, b),
        _ => 0.0,
    }
}

/// Descriptor of frame `index`, imputing `absent_distance` for distances
/// that involve a missing entity.
pub fn frame_descriptor(
    sample: &VideoSample,
    index: usize,
    absent_distance: f64,
) -> Result<FrameDescriptor> {
    if index >= sample.frames.len() {
        return Err(TdmError::Argument(format!(
            "frame {index} out of range for video \"{}\" with {} frames",
            sample.video_id,
            sample.frames.len()
        )));
    }
    let cur = &sample.frames[index];
    let prev = index.checked_sub(1).map(|i| &sample.frames[i]);
    let speed = |e: Entity| displacement(prev.and_then(|p| p.bbox(e)), cur.bbox(e));
    let hand = cur.bbox(Entity::Hand);
    let o1 = cur.bbox(Entity::Object1);
    let o2 = cur.bbox(Entity::Object2);
    let flag = |b: Option<&BoundingBox>| if b.is_some() { 1.0 } else { 0.0 };
    Ok(FrameDescriptor([
        flag(hand),
        speed(Entity::Hand),
        speed(Entity::Object1),
        speed(Entity::Object2),
        centroid_distance(hand, o1, absent_distance),
        centroid_distance(hand, o2, absent_distance),
        centroid_distance(o1, o2, absent_distance),
        overlap(hand, o1),
        overlap(hand, o2),
        flag(o1),
        flag(o2),
    ]))
}

pub fn video_descriptors(sample: &VideoSample, absent_distance: f64) -> Vec<FrameDescriptor> {
    (0..sample.frames.len())
        .map(|i| frame_descriptor(sample, i, absent_distance).expect("index in range"))
        .collect()
}

/// Per-phase diagonal Gaussians over frame descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseModel {
    pub means: [[f64; DESCRIPTOR_DIM]; N_PHASES],
    pub variances: [[f64; DESCRIPTOR_DIM]; N_PHASES],
    pub variance_floor: f64,
    pub absent_distance: f64,
}

impl PhaseModel {
    /// Builds a model from explicit parameters, clamping variances to the floor.
    pub fn new(
        means: [[f64; DESCRIPTOR_DIM]; N_PHASES],
        variances: [[f64; DESCRIPTOR_DIM]; N_PHASES],
        config: SegmenterConfig,
    ) -> Result<Self> {
        if !(config.variance_floor > 0.0 && config.variance_floor.is_finite()) {
            return Err(TdmError::Argument(format!(
                "variance floor must be positive, got {}",
                config.variance_floor
            )));
        }
        let mut variances = variances;
        for v in variances.iter_mut().flatten() {
            *v = v.max(config.variance_floor);
        }
        if means.iter().flatten().chain(variances.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(TdmError::Argument("phase model parameters must be finite".into()));
        }
        Ok(PhaseModel {
            means,
            variances,
            variance_floor: config.variance_floor,
            absent_distance: config.absent_distance,
        })
    }

    pub fn config(&self) -> SegmenterConfig {
        SegmenterConfig {
            variance_floor: self.variance_floor,
            absent_distance: self.absent_distance,
        }
    }

    pub fn to_json(&self) -> String {
        let wire = PhaseModelWire {
            format: PHASE_MODEL_FORMAT.to_string(),
            variance_floor: self.variance_floor,
            absent_distance: self.absent_distance,
            phases: PhaseLabel::ALL
                .iter()
                .map(|&p| {
                    (
                        p.letter().to_string(),
                        GaussianWire {
                            mean: self.means[p.index()].to_vec(),
                            variance: self.variances[p.index()].to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("phase model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: PhaseModelWire = serde_json::from_str(text)?;
        if wire.format != PHASE_MODEL_FORMAT {
            return Err(TdmError::Format(format!(
                "expected format \"{PHASE_MODEL_FORMAT}\", found \"{}\"",
                wire.format
            )));
        }
        let mut means = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
        let mut variances = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
        for p in PhaseLabel::ALL {
            let g = wire
                .phases
                .get(&p.letter().to_string())
                .ok_or_else(|| TdmError::Format(format!("phase {p} missing")))?;
            if g.mean.len() != DESCRIPTOR_DIM || g.variance.len() != DESCRIPTOR_DIM {
                return Err(TdmError::Format(format!(
                    "phase {p} needs {DESCRIPTOR_DIM} means and variances"
                )));
            }
            means[p.index()].copy_from_slice(&g.mean);
            variances[p.index()].copy_from_slice(&g.variance);
            if g.variance.iter().any(|&v| v < wire.variance_floor) {
                return Err(TdmError::Format(format!(
                    "phase {p} has a variance below the floor"
                )));
            }
        }
        PhaseModel::new(
            means,
            variances,
            SegmenterConfig {
                variance_floor: wire.variance_floor,
                absent_distance: wire.absent_distance,
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseModelWire {
    format: String,
    variance_floor: f64,
    absent_distance: f64,
    phases: BTreeMap<String, GaussianWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianWire {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

/// Fits per-phase means and population variances from labelled videos.
pub fn fit_phase_model(samples: &[VideoSample], config: SegmenterConfig) -> Result<PhaseModel> {
    let mut labelled = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = s.phase_truth.clone().ok_or_else(|| {
            TdmError::Training(format!("video \"{}\" has no phase labels", s.video_id))
        })?;
        labelled.push((video_descriptors(s, config.absent_distance), seg));
    }
    fit_phase_model_from_descriptors(&labelled, config)
}

/// Fitting on precomputed descriptors.
///
/// Values are pooled and summed in sorted order, so the result is
/// bit-identical under any permutation of the training videos.
pub fn fit_phase_model_from_descriptors(
    labelled: &[(Vec<FrameDescriptor>, PhaseSegmentation)],
    config: SegmenterConfig,
) -> Result<PhaseModel> {
    let mut pooled: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); DESCRIPTOR_DIM]; N_PHASES];
    for (descriptors, seg) in labelled {
        if descriptors.len() != seg.n_frames() {
            return Err(TdmError::Argument(format!(
                "{} descriptors for a {}-frame segmentation",
                descriptors.len(),
                seg.n_frames()
            )));
        }
        for p in PhaseLabel::ALL {
            for d in &descriptors[seg.range(p)] {
                for (dim, &v) in d.0.iter().enumerate() {
                    pooled[p.index()][dim].push(v);
                }
            }
        }
    }
    let mut means = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
    let mut variances = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
    for p in PhaseLabel::ALL {
        let per_dim = &mut pooled[p.index()];
        if per_dim[0].is_empty() {
            return Err(TdmError::Training(format!("phase {p} has no training frames")));
        }
        for (dim, values) in per_dim.iter_mut().enumerate() {
            values.sort_by(f64::total_cmp);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
            sq.sort_by(f64::total_cmp);
            means[p.index()][dim] = mean;
            variances[p.index()][dim] = sq.iter().sum::<f64>() / n;
        }
    }
    PhaseModel::new(means, variances, config)
}

/// Diagonal-Gaussian log-likelihood of `d` under phase `p`.
pub fn phase_log_score(model: &PhaseModel, d: &FrameDescriptor, p: PhaseLabel) -> f64 {
    let mu = &model.means[p.index()];
    let var = &model.variances[p.index()];
    d.0.iter()
        .zip(mu)
        .zip(var)
        .map(|((&x, &m), &v)| -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * PI * v).ln())
        .sum()
}

/// Per-frame log-scores for every phase.
pub fn score_table(model: &PhaseModel, descriptors: &[FrameDescriptor]) -> Vec<[f64; N_PHASES]> {
    descriptors
        .iter()
        .map(|d| PhaseLabel::ALL.map(|p| phase_log_score(model, d, p)))
        .collect()
}

/// Total score of a segmentation, summed in frame order.
pub fn segmentation_score(scores: &[[f64; N_PHASES]], seg: &PhaseSegmentation) -> f64 {
    seg.labels()
        .iter()
        .zip(scores)
        .fold(0.0, |acc, (l, row)| acc + row[l.index()])
}

/// Tie-break order on boundary starts: is `a` preferred over `b`?
/// Only the first `known` starts are compared.
fn starts_cmp(a: &[usize; 4], b: &[usize; 4], known: usize) -> Ordering {
    for k in 0..known {
        let ord = if k < 2 { b[k].cmp(&a[k]) } else { a[k].cmp(&b[k]) };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

fn transition_allowed(from: usize, to: usize) -> bool {
    const C: usize = 2;
    from <= to && !(from < C && to > C)
}

#[derive(Clone, Copy)]
struct Cell {
    score: f64,
    starts: [usize; 4],
    prev: usize,
}

/// Optimal monotone segmentation of a precomputed score table.
pub fn segment_scores(scores: &[[f64; N_PHASES]]) -> Result<PhaseSegmentation> {
    let n = scores.len();
    if n == 0 {
        return Err(TdmError::Argument("cannot segment an empty video".into()));
    }
    let mut table: Vec<[Option<Cell>; N_PHASES]> = vec![[None; N_PHASES]; n];
    for p in 0..=2 {
        table[0][p] = Some(Cell {
            score: scores[0][p],
            starts: [0; 4],
            prev: p,
        });
    }
    for t in 1..n {
        for p in 0..N_PHASES {
            let mut best: Option<Cell> = None;
            for q in 0..=p {
                if !transition_allowed(q, p) {
                    continue;
                }
                let Some(from) = table[t - 1][q] else { continue };
                let mut starts = from.starts;
                for s in starts.iter_mut().take(p).skip(q) {
                    *s = t;
                }
                let cand = Cell {
                    score: from.score + scores[t][p],
                    starts,
                    prev: q,
                };
                best = match best {
                    None => Some(cand),
                    Some(b) if cand.score > b.score => Some(cand),
                    Some(b)
                        if cand.score == b.score
                            && starts_cmp(&cand.starts, &b.starts, p) == Ordering::Greater =>
                    {
                        Some(cand)
                    }
                    keep => keep,
                };
            }
            table[t][p] = best;
        }
    }
    let mut best: Option<(usize, [usize; 4], f64)> = None;
    for p in 2..N_PHASES {
        let Some(cell) = table[n - 1][p] else { continue };
        let mut starts = cell.starts;
        for s in starts.iter_mut().skip(p) {
            *s = n;
        }
        best = match best {
            None => Some((p, starts, cell.score)),
            Some((_, bs, bscore))
                if cell.score > bscore
                    || (cell.score == bscore && starts_cmp(&starts, &bs, 4) == Ordering::Greater) =>
            {
                Some((p, starts, cell.score))
            }
            keep => keep,
        };
    }
    let (last, _, _) = best.expect("phase c is reachable at the final frame");
    let mut labels = vec![PhaseLabel::A; n];
    let mut p = last;
    for t in (0..n).rev() {
        labels[t] = PhaseLabel::ALL[p];
        p = table[t][p].expect("backtrack stays on reachable cells").prev;
    }
    PhaseSegmentation::from_labels(&labels)
}

/// Segments `sample` with the maximum-likelihood monotone phase labelling.
pub fn segment(model: &PhaseModel, sample: &VideoSample) -> Result<PhaseSegmentation> {
    segment_descriptors(model, &video_descriptors(sample, model.absent_distance))
}

pub fn segment_descriptors(
    model: &PhaseModel,
    descriptors: &[FrameDescriptor],
) -> Result<PhaseSegmentation> {
    segment_scores(&score_table(model, descriptors))
}

/// Exhaustive reference for [`segment_scores`].
pub fn brute_force_scores(scores: &[[f64; N_PHASES]]) -> Result<PhaseSegmentation> {
    let n = scores.len();
    if n == 0 {
        return Err(TdmError::Argument("cannot segment an empty video".into()));
    }
    if n > BRUTE_FORCE_MAX_FRAMES {
        return Err(TdmError::Argument(format!(
            "brute force limited to {BRUTE_FORCE_MAX_FRAMES} frames, got {n}"
        )));
    }
    let mut best: Option<(PhaseSegmentation, f64)> = None;
    for b in 0..=n {
        for c in b..=n {
            for d in c + 1..=n {
                for e in d..=n {
                    let seg = PhaseSegmentation::from_starts([b, c, d, e], n)?;
                    let score = segmentation_score(scores, &seg);
                    let better = match &best {
                        None => true,
                        Some((bs, bscore)) => {
                            score > *bscore
                                || (score == *bscore
                                    && starts_cmp(&seg.starts, &bs.starts, 4) == Ordering::Greater)
                        }
                    };
                    if better {
                        best = Some((seg, score));
                    }
                }
            }
        }
    }
    Ok(best.expect("at least one legal segmentation").0)
}

pub fn brute_force_segment(model: &PhaseModel, sample: &VideoSample) -> Result<PhaseSegmentation> {
    if sample.frames.len() > BRUTE_FORCE_MAX_FRAMES {
        return Err(TdmError::Argument(format!(
            "brute force limited to {BRUTE_FORCE_MAX_FRAMES} frames, got {}",
            sample.frames.len()
        )));
    }
    brute_force_scores(&score_table(
        model,
        &video_descriptors(sample, model.absent_distance),
    ))
}
