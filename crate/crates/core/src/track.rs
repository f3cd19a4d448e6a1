//! Annotated video tracks: data model, line-delimited ingestion, gap
//! interpolation and per-video depth normalization.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::phase::{PhaseLabel, PhaseSegmentation};

/// Integer action-class identifier (e.g. an SSV2 label id).
pub type ClassId = u32;

/// Slack allowed on the `x + w <= 1` style bounds so interpolated boxes
/// are not rejected over a rounding ulp.
const BOUND_EPS: f64 = 1e-9;

/// Default bridgeable detector dropout, in frames.
pub const DEFAULT_MAX_GAP: usize = 3;

/// Axis-aligned box in normalized frame coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.check()
            .map_err(|(field, msg)| TdmError::Argument(format!("{field}: {msg}")))?;
        Ok(b)
    }

    /// Returns the offending field suffix and a message on violation.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let BoundingBox { x, y, w, h } = *self;
        for (name, v) in [("x", x), ("y", y), ("w", w), ("h", h)] {
            if !v.is_finite() {
                return Err((name, format!("{v} is not finite")));
            }
        }
        if x < 0.0 {
            return Err(("x", format!("{x} is negative")));
        }
        if y < 0.0 {
            return Err(("y", format!("{y} is negative")));
        }
        if w <= 0.0 {
            return Err(("w", format!("{w} must be positive")));
        }
        if h <= 0.0 {
            return Err(("h", format!("{h} must be positive")));
        }
        if x + w > 1.0 + BOUND_EPS {
            return Err(("x+w", format!("{} exceeds 1", x + w)));
        }
        if y + h > 1.0 + BOUND_EPS {
            return Err(("y+h", format!("{} exceeds 1", y + h)));
        }
        Ok(())
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix * iy
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    fn lerp(&self, other: &BoundingBox, t: f64) -> BoundingBox {
        BoundingBox {
            x: lerp(self.x, other.x, t),
            y: lerp(self.y, other.y, t),
            w: lerp(self.w, other.w, t),
            h: lerp(self.h, other.h, t),
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// The three tracked entities of a manipulation video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entity {
    Object1,
    Object2,
    Hand,
}

impl Entity {
    pub const ALL: [Entity; 3] = [Entity::Object1, Entity::Object2, Entity::Hand];

    pub fn name(self) -> &'static str {
        match self {
            Entity::Object1 => "object1",
            Entity::Object2 => "object2",
            Entity::Hand => "hand",
        }
    }
}

/// Per-frame annotations. Every field except `index` may be missing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameAnnotation {
    pub index: usize,
    pub object1: Option<BoundingBox>,
    pub object2: Option<BoundingBox>,
    pub hand: Option<BoundingBox>,
    pub depth_object1: Option<f64>,
    pub depth_object2: Option<f64>,
    pub depth_hand: Option<f64>,
    pub container_object1: Option<f64>,
    pub container_object2: Option<f64>,
}

impl FrameAnnotation {
    pub fn empty(index: usize) -> Self {
        FrameAnnotation {
            index,
            ..Default::default()
        }
    }

    pub fn bbox(&self, entity: Entity) -> Option<&BoundingBox> {
        match entity {
            Entity::Object1 => self.object1.as_ref(),
            Entity::Object2 => self.object2.as_ref(),
            Entity::Hand => self.hand.as_ref(),
        }
    }

    pub fn bbox_mut(&mut self, entity: Entity) -> &mut Option<BoundingBox> {
        match entity {
            Entity::Object1 => &mut self.object1,
            Entity::Object2 => &mut self.object2,
            Entity::Hand => &mut self.hand,
        }
    }

    pub fn depth(&self, entity: Entity) -> Option<f64> {
        match entity {
            Entity::Object1 => self.depth_object1,
            Entity::Object2 => self.depth_object2,
            Entity::Hand => self.depth_hand,
        }
    }

    pub fn depth_mut(&mut self, entity: Entity) -> &mut Option<f64> {
        match entity {
            Entity::Object1 => &mut self.depth_object1,
            Entity::Object2 => &mut self.depth_object2,
            Entity::Hand => &mut self.depth_hand,
        }
    }

    fn depths_mut(&mut self) -> [&mut Option<f64>; 3] {
        [
            &mut self.depth_object1,
            &mut self.depth_object2,
            &mut self.depth_hand,
        ]
    }
}

/// One annotated video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub class_id: Option<ClassId>,
    pub frames: Vec<FrameAnnotation>,
    pub phase_truth: Option<PhaseSegmentation>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks every data-model invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let vid = self.video_id.as_str();
        if self.frames.is_empty() {
            return Err(TdmError::validation(vid, "frames", "must not be empty"));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.index != i {
                return Err(TdmError::validation(
                    vid,
                    format!("frames[{i}].index"),
                    format!("expected {i}, found {}", frame.index),
                ));
            }
            for entity in Entity::ALL {
                if let Some(b) = frame.bbox(entity) {
                    b.check().map_err(|(suffix, msg)| {
                        TdmError::validation(
                            vid,
                            format!("frames[{i}].{}.{suffix}", entity.name()),
                            msg,
                        )
                    })?;
                }
                if let Some(d) = frame.depth(entity) {
                    if !d.is_finite() {
                        return Err(TdmError::validation(
                            vid,
                            format!("frames[{i}].depth.{}", entity.name()),
                            format!("{d} is not finite"),
                        ));
                    }
                }
            }
            for (name, c) in [
                ("object1", frame.container_object1),
                ("object2", frame.container_object2),
            ] {
                if let Some(c) = c {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(TdmError::validation(
                            vid,
                            format!("frames[{i}].container.{name}"),
                            format!("{c} outside [0, 1]"),
                        ));
                    }
                }
            }
        }
        if let Some(seg) = &self.phase_truth {
            if seg.n_frames() != self.frames.len() {
                return Err(TdmError::validation(
                    vid,
                    "phases",
                    format!(
                        "cover {} frames but the video has {}",
                        seg.n_frames(),
                        self.frames.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A named action category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionClass {
    pub id: ClassId,
    pub name: String,
}

impl ActionClass {
    pub fn new(id: ClassId, name: impl Into<String>) -> Self {
        ActionClass {
            id,
            name: name.into(),
        }
    }

    /// The three "putting" actions of Something-Something v2.
    pub fn putting_classes() -> Vec<ActionClass> {
        vec![
            ActionClass::new(106, "Putting something into something"),
            ActionClass::new(112, "Putting something onto something"),
            ActionClass::new(118, "Putting something underneath something"),
        ]
    }
}

// ---------------------------------------------------------------------------
// Line-delimited record format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_id: Option<ClassId>,
    frames: Vec<FrameWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phases: Option<BTreeMap<String, [usize; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameWire {
    index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object1: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object2: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hand: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<DepthWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    container: Option<ContainerWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hand: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object2: Option<f64>,
}

impl From<&FrameAnnotation> for FrameWire {
    fn from(f: &FrameAnnotation) -> Self {
        let depth = (f.depth_object1.is_some() || f.depth_object2.is_some() || f.depth_hand.is_some())
            .then_some(DepthWire {
                object1: f.depth_object1,
                object2: f.depth_object2,
                hand: f.depth_hand,
            });
        let container = (f.container_object1.is_some() || f.container_object2.is_some()).then_some({
            ContainerWire {
                object1: f.container_object1,
                object2: f.container_object2,
            }
        });
        FrameWire {
            index: f.index,
            object1: f.object1,
            object2: f.object2,
            hand: f.hand,
            depth,
            container,
        }
    }
}

impl From<FrameWire> for FrameAnnotation {
    fn from(w: FrameWire) -> Self {
        let (depth_object1, depth_object2, depth_hand) = match w.depth {
            Some(d) => (d.object1, d.object2, d.hand),
            None => (None, None, None),
        };
        let (container_object1, container_object2) = match w.container {
            Some(c) => (c.object1, c.object2),
            None => (None, None),
        };
        FrameAnnotation {
            index: w.index,
            object1: w.object1,
            object2: w.object2,
            hand: w.hand,
            depth_object1,
            depth_object2,
            depth_hand,
            container_object1,
            container_object2,
        }
    }
}

fn phases_from_wire(
    video_id: &str,
    n_frames: usize,
    wire: BTreeMap<String, [usize; 2]>,
) -> Result<PhaseSegmentation> {
    for key in wire.keys() {
        if key.len() != 1 || PhaseLabel::from_letter(key.chars().next().unwrap()).is_none() {
            return Err(TdmError::validation(
                video_id,
                format!("phases.{key}"),
                "unknown phase letter",
            ));
        }
    }
    // Omitted letters are empty ranges at the end of the previous phase.
    let mut ranges = [(0usize, 0usize); 5];
    let mut cursor = 0;
    for p in PhaseLabel::ALL {
        let key = p.letter().to_string();
        ranges[p.index()] = match wire.get(&key) {
            Some(&[start, end]) => (start, end),
            None => (cursor, cursor),
        };
        cursor = ranges[p.index()].1;
    }
    PhaseSegmentation::from_ranges(ranges, n_frames)
        .map_err(|e| TdmError::validation(video_id, "phases", e.to_string()))
}

fn phases_to_wire(seg: &PhaseSegmentation) -> BTreeMap<String, [usize; 2]> {
    PhaseLabel::ALL
        .iter()
        .map(|&p| {
            let r = seg.range(p);
            (p.letter().to_string(), [r.start, r.end])
        })
        .collect()
}

/// Parses and validates a single record line.
pub fn parse_record(line: &str, line_no: usize) -> Result<VideoSample> {
    let wire: RecordWire = serde_json::from_str(line).map_err(|e| TdmError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let n = wire.frames.len();
    let phase_truth = match wire.phases {
        Some(p) => Some(phases_from_wire(&wire.video_id, n, p)?),
        None => None,
    };
    let sample = VideoSample {
        video_id: wire.video_id,
        class_id: wire.class_id,
        frames: wire.frames.into_iter().map(FrameAnnotation::from).collect(),
        phase_truth,
    };
    sample.validate()?;
    Ok(sample)
}

/// Reads one sample per non-empty line, in file order.
pub fn parse_dataset<R: BufRead>(source: R) -> Result<Vec<VideoSample>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

/// Serializes a sample as one record line (no trailing newline).
pub fn to_record_line(sample: &VideoSample) -> String {
    let wire = RecordWire {
        video_id: sample.video_id.clone(),
        class_id: sample.class_id,
        frames: sample.frames.iter().map(FrameWire::from).collect(),
        phases: sample.phase_truth.as_ref().map(phases_to_wire),
    };
    serde_json::to_string(&wire).expect("record serialization is infallible")
}

pub fn write_dataset<W: Write>(mut sink: W, samples: &[VideoSample]) -> Result<()> {
    for s in samples {
        writeln!(sink, "{}", to_record_line(s))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

/// Bridges short detector dropouts by linear interpolation.
///
/// Each entity is handled independently. A run of absent frames of length
/// at most `max_gap` lying strictly between two present frames is filled;
/// depth is filled too when both endpoints carry it. Leading and trailing
/// absences are never extrapolated.
pub fn interpolate_missing(sample: &VideoSample, max_gap: usize) -> VideoSample {
    let mut out = sample.clone();
    for entity in Entity::ALL {
        let present: Vec<usize> = out
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.bbox(entity).is_some())
            .map(|(i, _)| i)
            .collect();
        for pair in present.windows(2) {
            let (left, right) = (pair[0], pair[1]);
            let gap = right - left - 1;
            if gap == 0 || gap > max_gap {
                continue;
            }
            let lb = *out.frames[left].bbox(entity).unwrap();
            let rb = *out.frames[right].bbox(entity).unwrap();
            let ld = out.frames[left].depth(entity);
            let rd = out.frames[right].depth(entity);
            let span = (right - left) as f64;
            for k in left + 1..right {
                let t = (k - left) as f64 / span;
                let frame = &mut out.frames[k];
                *frame.bbox_mut(entity) = Some(lb.lerp(&rb, t));
                if let (Some(a), Some(b)) = (ld, rd) {
                    let slot = frame.depth_mut(entity);
                    if slot.is_none() {
                        *slot = Some(lerp(a, b, t));
                    }
                }
            }
        }
    }
    out
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median-centres and range-scales all depth values of one video.
///
/// With fewer than two values, or a zero range, every present depth
/// becomes 0.
pub fn normalize_depth(sample: &VideoSample) -> VideoSample {
    let mut values: Vec<f64> = sample
        .frames
        .iter()
        .flat_map(|f| Entity::ALL.map(|e| f.depth(e)))
        .flatten()
        .collect();
    let mut out = sample.clone();
    if values.is_empty() {
        return out;
    }
    values.sort_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let range = hi - lo;
    let centre = median(&values);
    let degenerate = values.len() < 2 || range <= 0.0;
    for frame in &mut out.frames {
        for v in frame.depths_mut().into_iter().flatten() {
            *v = if degenerate { 0.0 } else { (*v - centre) / range };
        }
    }
    out
}
