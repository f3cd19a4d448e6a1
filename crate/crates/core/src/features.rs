//! Relational per-phase features.
//!
//! A video and its segmentation map to a fixed 117-entry [`FeatureVector`]:
//! 22 relational statistics for each of the five phases, five
//! phase-present flags and two video-level container scores. Missing data
//! is encoded as 0 next to explicit presence flags.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::phase::{PhaseLabel, PhaseSegmentation, N_PHASES};
use crate::track::{BoundingBox, ClassId, Entity, VideoSample};

pub const PHASE_FEATURE_DIM: usize = 22;
pub const FEATURE_DIM: usize = PHASE_FEATURE_DIM * N_PHASES + N_PHASES + 2;

pub const DEFAULT_ANGLE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_SPEED_EPSILON: f64 = 0.005;

/// Index of the first depth entry inside a [`PhaseFeatureVector`].
const DEPTH_OFFSET: usize = 18;
const FLAGS_OFFSET: usize = PHASE_FEATURE_DIM * N_PHASES;
const CONTAINER_OFFSET: usize = FLAGS_OFFSET + N_PHASES;

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(p: &BoundingBox, q: &BoundingBox) -> f64 {
    // edge arithmetic can leave identical boxes a hair below 1
    if p == q {
        return 1.0;
    }
    let inter = p.intersection_area(q);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = p.area() + q.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `inner`'s area lying inside `outer`.
pub fn containment(inner: &BoundingBox, outer: &BoundingBox) -> f64 {
    let inside = inner.x >= outer.x
        && inner.y >= outer.y
        && inner.x + inner.w <= outer.x + outer.w
        && inner.y + inner.h <= outer.y + outer.h;
    if inside {
        return 1.0;
    }
    (inner.intersection_area(outer) / inner.area()).clamp(0.0, 1.0)
}

/// Thresholds for the "moving with the hand" test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarryParams {
    /// Minimum cosine between hand and object displacement.
    pub angle_threshold: f64,
    /// Minimum displacement magnitude, in frame fractions per frame.
    pub speed_epsilon: f64,
}

impl Default for CarryParams {
    fn default() -> Self {
        CarryParams {
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            speed_epsilon: DEFAULT_SPEED_EPSILON,
        }
    }
}

/// Named column groups that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub base: bool,
    pub depth: bool,
    pub container: bool,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        base: true,
        depth: true,
        container: true,
    };
    pub const BASE: FeatureMask = FeatureMask {
        base: true,
        depth: false,
        container: false,
    };

    fn keeps(&self, index: usize) -> bool {
        match column_group(index) {
            ColumnGroup::Base => self.base,
            ColumnGroup::Depth => self.depth,
            ColumnGroup::Container => self.container,
        }
    }
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::ALL
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.base, "base"),
            (self.depth, "depth"),
            (self.container, "container"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        write!(f, "{}", names.join(","))
    }
}

impl FromStr for FeatureMask {
    type Err = TdmError;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = FeatureMask {
            base: false,
            depth: false,
            container: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "base" => mask.base = true,
                "depth" => mask.depth = true,
                "container" => mask.container = true,
                other => {
                    return Err(TdmError::Argument(format!(
                        "unknown feature group \"{other}\" (expected base, depth, container)"
                    )))
                }
            }
        }
        if !(mask.base || mask.depth || mask.container) {
            return Err(TdmError::Argument("feature mask selects nothing".into()));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnGroup {
    Base,
    Depth,
    Container,
}

pub fn column_group(index: usize) -> ColumnGroup {
    if index >= CONTAINER_OFFSET {
        ColumnGroup::Container
    } else if index < FLAGS_OFFSET && index % PHASE_FEATURE_DIM >= DEPTH_OFFSET {
        ColumnGroup::Depth
    } else {
        ColumnGroup::Base
    }
}

/// Relational statistics for one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFeatureVector(pub [f64; PHASE_FEATURE_DIM]);

impl PhaseFeatureVector {
    pub const NAMES: [&'static str; PHASE_FEATURE_DIM] = [
        "size1",
        "size2",
        "size_hand",
        "motion1",
        "motion2",
        "motion_hand",
        "rel_motion_12",
        "vert_offset_12",
        "horiz_offset_12",
        "iou_12",
        "iou_1h",
        "iou_2h",
        "carry_1",
        "carry_2",
        "containment_12",
        "presence_1",
        "presence_2",
        "presence_h",
        "depth1",
        "depth2",
        "depth_hand",
        "depth_diff_12",
    ];

    pub fn zero() -> Self {
        PhaseFeatureVector([0.0; PHASE_FEATURE_DIM])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }
}

/// The full per-video vector consumed by the forests.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        feature_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.0[i])
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Stable column names, e.g. `c.depth_diff_12`, `a.phase_present`,
/// `container_object1`.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_DIM);
    for p in PhaseLabel::ALL {
        for n in PhaseFeatureVector::NAMES {
            names.push(format!("{p}.{n}"));
        }
    }
    for p in PhaseLabel::ALL {
        names.push(format!("{p}.phase_present"));
    }
    names.push("container_object1".into());
    names.push("container_object2".into());
    names
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

fn delta(prev: &BoundingBox, cur: &BoundingBox) -> (f64, f64) {
    let (px, py) = prev.centroid();
    let (cx, cy) = cur.centroid();
    (cx - px, cy - py)
}

fn centroid_gap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.centroid();
    let (bx, by) = b.centroid();
    (ax - bx).hypot(ay - by)
}

/// Fraction of frame pairs in `range` where `object` moves with the hand.
///
/// A pair `(t-1, t)` qualifies when hand and object are present in both
/// frames; it counts when both displacements exceed `speed_epsilon` and
/// their cosine exceeds `angle_threshold`.
pub fn hand_carry(
    sample: &VideoSample,
    range: Range<usize>,
    object: Entity,
    params: CarryParams,
) -> f64 {
    let mut qualifying = 0usize;
    let mut carried = 0usize;
    let end = range.end.min(sample.frames.len());
    for t in range.start.max(1)..end {
        let (prev, cur) = (&sample.frames[t - 1], &sample.frames[t]);
        let (Some(hp), Some(hc), Some(op), Some(oc)) = (
            prev.bbox(Entity::Hand),
            cur.bbox(Entity::Hand),
            prev.bbox(object),
            cur.bbox(object),
        ) else {
            continue;
        };
        qualifying += 1;
        let (hx, hy) = delta(hp, hc);
        let (ox, oy) = delta(op, oc);
        let (hn, on) = (hx.hypot(hy), ox.hypot(oy));
        if hn > params.speed_epsilon && on > params.speed_epsilon {
            let cosine = (hx * ox + hy * oy) / (hn * on);
            if cosine > params.angle_threshold {
                carried += 1;
            }
        }
    }
    if qualifying == 0 {
        0.0
    } else {
        carried as f64 / qualifying as f64
    }
}

/// Per-phase means of the normalized depths and of the object1 - object2
/// depth difference (over frames where both depths exist).
pub fn depth_features(sample: &VideoSample, seg: &PhaseSegmentation, p: PhaseLabel) -> [f64; 4] {
    let mut d1 = Mean::default();
    let mut d2 = Mean::default();
    let mut dh = Mean::default();
    let mut diff = Mean::default();
    for frame in &sample.frames[seg.range(p)] {
        if let Some(v) = frame.depth_object1 {
            d1.push(v);
        }
        if let Some(v) = frame.depth_object2 {
            d2.push(v);
        }
        if let Some(v) = frame.depth_hand {
            dh.push(v);
        }
        if let (Some(a), Some(b)) = (frame.depth_object1, frame.depth_object2) {
            diff.push(a - b);
        }
    }
    [d1.value(), d2.value(), dh.value(), diff.value()]
}

/// The 22 relational statistics of phase `p`. An empty phase is all zero.
pub fn phase_features(
    sample: &VideoSample,
    seg: &PhaseSegmentation,
    p: PhaseLabel,
    carry: CarryParams,
) -> PhaseFeatureVector {
    let range = seg.range(p);
    if range.is_empty() {
        return PhaseFeatureVector::zero();
    }
    let mut size = [Mean::default(), Mean::default(), Mean::default()];
    let mut motion = [Mean::default(), Mean::default(), Mean::default()];
    let mut presence = [0usize; 3];
    let mut rel_motion = Mean::default();
    let mut vert = Mean::default();
    let mut horiz = Mean::default();
    let mut iou_12 = Mean::default();
    let mut iou_1h = Mean::default();
    let mut iou_2h = Mean::default();
    let mut contain = Mean::default();

    for t in range.clone() {
        let frame = &sample.frames[t];
        let prev = t.checked_sub(1).map(|i| &sample.frames[i]);
        for (k, entity) in Entity::ALL.into_iter().enumerate() {
            if let Some(b) = frame.bbox(entity) {
                presence[k] += 1;
                size[k].push(b.area());
                if let Some(pb) = prev.and_then(|f| f.bbox(entity)) {
                    let (dx, dy) = delta(pb, b);
                    motion[k].push(dx.hypot(dy));
                }
            }
        }
        let (o1, o2, hand) = (frame.object1.as_ref(), frame.object2.as_ref(), frame.hand.as_ref());
        if let (Some(a), Some(b)) = (o1, o2) {
            let (ax, ay) = a.centroid();
            let (bx, by) = b.centroid();
            vert.push(ay - by);
            horiz.push(ax - bx);
            iou_12.push(iou(a, b));
            contain.push(containment(a, b));
            if let Some(pf) = prev {
                if let (Some(pa), Some(pb)) = (pf.object1.as_ref(), pf.object2.as_ref()) {
                    rel_motion.push(centroid_gap(a, b) - centroid_gap(pa, pb));
                }
            }
        }
        if let (Some(a), Some(h)) = (o1, hand) {
            iou_1h.push(iou(a, h));
        }
        if let (Some(b), Some(h)) = (o2, hand) {
            iou_2h.push(iou(b, h));
        }
    }

    let len = range.len() as f64;
    let [depth1, depth2, depth_hand, depth_diff] = depth_features(sample, seg, p);
    PhaseFeatureVector([
        size[0].value(),
        size[1].value(),
        size[2].value(),
        motion[0].value(),
        motion[1].value(),
        motion[2].value(),
        rel_motion.value(),
        vert.value(),
        horiz.value(),
        iou_12.value(),
        iou_1h.value(),
        iou_2h.value(),
        hand_carry(sample, range.clone(), Entity::Object1, carry),
        hand_carry(sample, range.clone(), Entity::Object2, carry),
        contain.value(),
        presence[0] as f64 / len,
        presence[1] as f64 / len,
        presence[2] as f64 / len,
        depth1,
        depth2,
        depth_hand,
        depth_diff,
    ])
}

/// Assembles the 117-entry vector; columns outside `mask` are zeroed.
pub fn video_features(
    sample: &VideoSample,
    seg: &PhaseSegmentation,
    mask: FeatureMask,
    carry: CarryParams,
) -> Result<FeatureVector> {
    if seg.n_frames() != sample.frames.len() {
        return Err(TdmError::Argument(format!(
            "segmentation covers {} frames but video \"{}\" has {}",
            seg.n_frames(),
            sample.video_id,
            sample.frames.len()
        )));
    }
    let mut out = [0.0; FEATURE_DIM];
    for p in PhaseLabel::ALL {
        let f = phase_features(sample, seg, p, carry);
        let at = p.index() * PHASE_FEATURE_DIM;
        out[at..at + PHASE_FEATURE_DIM].copy_from_slice(&f.0);
        out[FLAGS_OFFSET + p.index()] = if seg.range(p).is_empty() { 0.0 } else { 1.0 };
    }
    let mut c1 = Mean::default();
    let mut c2 = Mean::default();
    for frame in &sample.frames {
        if let Some(v) = frame.container_object1 {
            c1.push(v);
        }
        if let Some(v) = frame.container_object2 {
            c2.push(v);
        }
    }
    out[CONTAINER_OFFSET] = c1.value();
    out[CONTAINER_OFFSET + 1] = c2.value();
    for (i, v) in out.iter_mut().enumerate() {
        if !mask.keeps(i) {
            *v = 0.0;
        }
    }
    Ok(FeatureVector(out))
}

/// One row of a feature dump.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub video_id: String,
    pub class_id: Option<ClassId>,
    pub features: FeatureVector,
}

/// Writes the feature table as CSV: `video_id, class_id`, then one column
/// per feature name. Values use the shortest round-tripping decimal form.
pub fn write_feature_table<W: Write>(sink: W, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["video_id".to_string(), "class_id".to_string()];
    header.extend(feature_names());
    w.write_record(&header)?;
    for row in rows {
        let mut record = vec![
            row.video_id.clone(),
            row.class_id.map(|c| c.to_string()).unwrap_or_default(),
        ];
        record.extend(row.features.0.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_table<R: std::io::Read>(source: R) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_reader(source);
    let header = r.headers()?.clone();
    let expected = feature_names();
    if header.len() != FEATURE_DIM + 2
        || &header[0] != "video_id"
        || &header[1] != "class_id"
        || header.iter().skip(2).zip(&expected).any(|(a, b)| a != b)
    {
        return Err(TdmError::Format("unexpected feature table header".into()));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let class_id = match &record[1] {
            "" => None,
            s => Some(s.parse().map_err(|_| TdmError::Format(format!("bad class_id \"{s}\"")))?),
        };
        let mut features = [0.0; FEATURE_DIM];
        for (slot, cell) in features.iter_mut().zip(record.iter().skip(2)) {
            *slot = cell
                .parse()
                .map_err(|_| TdmError::Format(format!("bad feature value \"{cell}\"")))?;
        }
        rows.push(FeatureRow {
            video_id: record[0].to_string(),
            class_id,
            features: FeatureVector(features),
        });
    }
    Ok(rows)
}
