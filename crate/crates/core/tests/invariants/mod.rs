//! Property checks for every module invariant, written against an explicit
//! `TestRunner` so the same checks run under `cargo test` and inside the
//! acceptance binary.

use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::sample::subsequence;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use tdm_core::eval::{parse_report_csv, render_csv, ClassMetrics};
use tdm_core::features::{read_feature_table, write_feature_table, FeatureRow};
use tdm_core::forest::{argmax_class, Node};
use tdm_core::phase::{
    fit_phase_model_from_descriptors, score_table, segment_descriptors,
    segment_scores, segmentation_score, DESCRIPTOR_DIM, N_PHASES,
};
use tdm_core::seed::{derive_seed, rng_for};
use tdm_core::synth::{INTO, SYNTH_CLASSES, UNDERNEATH};
use tdm_core::*;

// the crate's own alias is fixed to its error type
use std::result::Result;

pub type Check = fn(&mut TestRunner) -> Result<(), String>;

#[allow(dead_code)]
pub const ALL: &[(&str, Check)] = &[
    ("dataset round-trip", dataset_round_trip),
    ("interpolation idempotent", interpolation_idempotent),
    ("interpolation keeps present frames", interpolation_keeps_present_frames),
    ("depth normalization range and order", depth_normalization_range_and_order),
    ("segment equals brute force", segment_equals_brute_force),
    ("segment output is legal", segment_output_is_legal),
    ("segment is score-optimal", segment_is_score_optimal),
    ("phase fit order-invariant", phase_fit_order_invariant),
    ("segment translation equivariant", segment_translation_equivariant),
    ("phase model json round-trip", phase_model_json_round_trip),
    ("features translation invariant", features_translation_invariant),
    ("depth difference antisymmetric", depth_difference_antisymmetric),
    ("feature dimension constant", feature_dimension_constant),
    ("iou symmetric and bounded", iou_symmetric_and_bounded),
    ("presence fractions", presence_fractions),
    ("feature table round-trip", feature_table_round_trip),
    ("forest probability is mean leaf", forest_probability_is_mean_leaf),
    ("perfect separator fits training set", perfect_separator_fits),
    ("monotone feature transform", monotone_feature_transform),
    ("argmax affine invariant", argmax_affine_invariant),
    ("forest bundle round-trip", forest_bundle_round_trip),
    ("forest thread-count invariant", forest_thread_invariant),
    ("confusion matches recount", confusion_matches_recount),
    ("macro average bounds and order", macro_average_bounds_and_order),
    ("report csv round-trip", report_csv_round_trip),
    ("generated samples valid", generated_samples_valid),
    ("generator order-independent", generator_order_independent),
    ("zero depth signal hides depth", zero_depth_signal_hides_depth),
];

pub fn runner() -> TestRunner {
    runner_with_cases(64)
}

pub fn runner_with_cases(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

// ---- strategies ------------------------------------------------------------

/// Boxes whose corners stay within `[lo, hi + 0.2]`.
fn bbox_within(lo: f64, hi: f64) -> impl Strategy<Value = BoundingBox> {
    (lo..hi, lo..hi, 0.02..0.2f64, 0.02..0.2f64).prop_map(|(x, y, w, h)| BoundingBox { x, y, w, h })
}

/// Depths on a 1/64 grid, so differences are exact.
fn grid_depth() -> impl Strategy<Value = f64> {
    (-256i32..=256).prop_map(|k| k as f64 / 64.0)
}

fn frame_within(lo: f64, hi: f64) -> impl Strategy<Value = FrameAnnotation> {
    let boxes = (
        prop::option::weighted(0.8, bbox_within(lo, hi)),
        prop::option::weighted(0.8, bbox_within(lo, hi)),
        prop::option::weighted(0.8, bbox_within(lo, hi)),
    );
    let depths = (
        prop::option::weighted(0.8, grid_depth()),
        prop::option::weighted(0.8, grid_depth()),
        prop::option::weighted(0.8, grid_depth()),
    );
    let containers = (
        prop::option::weighted(0.7, 0.0..=1.0f64),
        prop::option::weighted(0.7, 0.0..=1.0f64),
    );
    (boxes, depths, containers).prop_map(|((o1, o2, h), (d1, d2, dh), (c1, c2))| FrameAnnotation {
        index: 0,
        object1: o1,
        object2: o2,
        hand: h,
        depth_object1: d1,
        depth_object2: d2,
        depth_hand: dh,
        container_object1: c1,
        container_object2: c2,
    })
}

/// Any legal boundary starts for `n >= 1` frames.
fn legal_starts(n: usize) -> impl Strategy<Value = [usize; 4]> {
    [0..=n, 0..=n, 0..=n, 0..=n].prop_map(move |mut s| {
        s.sort_unstable();
        if s[1] == s[2] {
            if s[2] < n {
                s[2] += 1;
                s[3] = s[3].max(s[2]);
            } else {
                s[1] = n - 1;
                s[0] = s[0].min(s[1]);
            }
        }
        s
    })
}

fn frames_to_sample(mut frames: Vec<FrameAnnotation>, id: String) -> VideoSample {
    for (i, f) in frames.iter_mut().enumerate() {
        f.index = i;
    }
    VideoSample {
        video_id: id,
        class_id: None,
        frames,
        phase_truth: None,
    }
}

fn sample_within(lo: f64, hi: f64, max_frames: usize) -> impl Strategy<Value = VideoSample> {
    vec(frame_within(lo, hi), 1..=max_frames).prop_map(|f| frames_to_sample(f, "v".into()))
}

/// A sample plus a legal segmentation of it.
fn segmented(lo: f64, hi: f64, max_frames: usize) -> impl Strategy<Value = (VideoSample, PhaseSegmentation)> {
    sample_within(lo, hi, max_frames).prop_flat_map(|s| {
        let n = s.frames.len();
        (Just(s), legal_starts(n))
            .prop_map(move |(s, st)| (s, PhaseSegmentation::from_starts(st, n).unwrap()))
    })
}

fn labelled_sample() -> impl Strategy<Value = VideoSample> {
    let class = prop::option::of(prop::sample::select(vec![106u32, 112, 118]));
    (segmented(0.0, 0.8, 12), "\\PC{1,12}", class, any::<bool>()).prop_map(
        |((mut s, seg), id, class_id, with_truth)| {
            s.video_id = id;
            s.class_id = class_id;
            s.phase_truth = with_truth.then_some(seg);
            s
        },
    )
}

const MASKS: [FeatureMask; 8] = {
    let mut out = [FeatureMask::ALL; 8];
    let mut i = 0;
    while i < 8 {
        out[i] = FeatureMask {
            base: i & 1 != 0,
            depth: i & 2 != 0,
            container: i & 4 != 0,
        };
        i += 1;
    }
    out
};

fn mask() -> impl Strategy<Value = FeatureMask> {
    prop::sample::select(MASKS.to_vec())
}

/// Phase models where several phases may share parameters, which makes
/// exact score ties common.
fn phase_model() -> impl Strategy<Value = PhaseModel> {
    let gaussian = (
        [(); DESCRIPTOR_DIM].map(|_| -1.0..2.0f64),
        [(); DESCRIPTOR_DIM].map(|_| 0.001..2.0f64),
    );
    (vec(gaussian, N_PHASES), [(); N_PHASES].map(|_| 0..N_PHASES)).prop_map(|(params, alias)| {
        let mut means = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
        let mut variances = [[0.0; DESCRIPTOR_DIM]; N_PHASES];
        for p in 0..N_PHASES {
            // alias[p] <= p keeps roughly half the phases as copies
            let src = alias[p].min(p);
            means[p] = params[src].0;
            variances[p] = params[src].1;
        }
        PhaseModel::new(means, variances, SegmenterConfig::default()).unwrap()
    })
}

/// Small samples with repeated frames, so that ties show up.
fn tie_prone_sample() -> impl Strategy<Value = VideoSample> {
    (vec(frame_within(0.0, 0.8), 1..=3), vec(0..3usize, 1..=12)).prop_map(|(pool, picks)| {
        let frames = picks.iter().map(|&k| pool[k % pool.len()].clone()).collect();
        frames_to_sample(frames, "t".into())
    })
}

fn descriptor() -> impl Strategy<Value = FrameDescriptor> {
    [(); DESCRIPTOR_DIM].map(|_| -2.0..2.0f64).prop_map(FrameDescriptor)
}

/// Descriptor sequences labelled so that every phase has frames.
fn labelled_descriptors() -> impl Strategy<Value = (Vec<FrameDescriptor>, PhaseSegmentation)> {
    (5usize..=12).prop_flat_map(|n| {
        (vec(descriptor(), n), subsequence((1..n).collect::<Vec<_>>(), 4)).prop_map(move |(d, st)| {
            let seg = PhaseSegmentation::from_starts([st[0], st[1], st[2], st[3]], n).unwrap();
            (d, seg)
        })
    })
}

fn fully_labelled_sample() -> impl Strategy<Value = VideoSample> {
    (5usize..=12).prop_flat_map(|n| {
        (
            vec(frame_within(0.0, 0.8), n),
            subsequence((1..n).collect::<Vec<_>>(), 4),
        )
            .prop_map(move |(frames, st)| {
                let mut s = frames_to_sample(frames, "f".into());
                s.phase_truth =
                    Some(PhaseSegmentation::from_starts([st[0], st[1], st[2], st[3]], n).unwrap());
                s
            })
    })
}

/// Feature rows on a 1/8 grid with binary labels.
fn grid_table(n_features: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    vec(
        (vec((-32i32..=32).prop_map(|k| k as f64 / 8.0), n_features), any::<bool>()),
        4..40,
    )
    .prop_map(|rows| rows.into_iter().unzip())
}

fn small_params() -> impl Strategy<Value = ForestParams> {
    (1usize..6, 1usize..6, 1usize..3, 1usize..4, any::<u64>()).prop_map(
        |(n_trees, max_depth, min_leaf, n_candidate_features, seed)| ForestParams {
            n_trees,
            max_depth,
            min_leaf,
            n_candidate_features,
            seed,
        },
    )
}

fn tree_leaves(tree: &Tree) -> Vec<(usize, f64)> {
    tree.nodes
        .iter()
        .map(|n| match n {
            Node::Split { feature, .. } => (*feature, f64::NAN),
            Node::Leaf { fraction } => (usize::MAX, *fraction),
        })
        .collect()
}

// ---- track ----------------------------------------------------------------

pub fn dataset_round_trip(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&vec(labelled_sample(), 1..4), |samples| {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).map_err(|e| fail(e.to_string()))?;
        let back = parse_dataset(buf.as_slice()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(back, samples);
        Ok(())
    }))
}

pub fn interpolation_idempotent(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(sample_within(0.0, 0.8, 16), 0usize..6), |(s, gap)| {
        let once = interpolate_missing(&s, gap);
        prop_assert_eq!(interpolate_missing(&once, gap), once);
        Ok(())
    }))
}

pub fn interpolation_keeps_present_frames(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(sample_within(0.0, 0.8, 16), 0usize..6), |(s, gap)| {
        let out = interpolate_missing(&s, gap);
        for (before, after) in s.frames.iter().zip(&out.frames) {
            for e in track::Entity::ALL {
                if let Some(b) = before.bbox(e) {
                    prop_assert_eq!(Some(b), after.bbox(e));
                    prop_assert_eq!(before.depth(e), after.depth(e));
                }
            }
        }
        Ok(())
    }))
}

fn all_depths(s: &VideoSample) -> Vec<f64> {
    s.frames
        .iter()
        .flat_map(|f| track::Entity::ALL.map(|e| f.depth(e)))
        .flatten()
        .collect()
}

pub fn depth_normalization_range_and_order(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&sample_within(0.0, 0.8, 16), |s| {
        let before = all_depths(&s);
        let after = all_depths(&normalize_depth(&s));
        prop_assert_eq!(before.len(), after.len());
        let lo = before.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if before.len() < 2 || hi == lo {
            prop_assert!(after.iter().all(|&v| v == 0.0));
            return Ok(());
        }
        for &v in &after {
            prop_assert!((-1.0..=1.0).contains(&v), "{} out of range", v);
        }
        for i in 0..before.len() {
            for j in 0..before.len() {
                let a = before[i].partial_cmp(&before[j]);
                let b = after[i].partial_cmp(&after[j]);
                prop_assert_eq!(a, b);
            }
        }
        Ok(())
    }))
}

// ---- phase segmentation ---------------------------------------------------

/// Independent enumeration: highest frame-order score sum, then smallest
/// b and c starts, then largest d and e starts.
pub fn enumerate_best(scores: &[[f64; N_PHASES]]) -> [usize; 4] {
    let n = scores.len();
    let mut best: Option<(f64, [usize; 4])> = None;
    for b in 0..=n {
        for c in b..=n {
            for d in c + 1..=n {
                for e in d..=n {
                    let mut total = 0.0;
                    for (i, row) in scores.iter().enumerate() {
                        let phase = [b, c, d, e].iter().filter(|&&s| i >= s).count();
                        total += row[phase];
                    }
                    let key = (b, c, std::cmp::Reverse(d), std::cmp::Reverse(e));
                    let replace = match best {
                        None => true,
                        Some((bs, st)) => {
                            let best_key = (st[0], st[1], std::cmp::Reverse(st[2]), std::cmp::Reverse(st[3]));
                            total > bs || (total == bs && key < best_key)
                        }
                    };
                    if replace {
                        best = Some((total, [b, c, d, e]));
                    }
                }
            }
        }
    }
    best.expect("n >= 1").1
}

fn segmentation_case() -> impl Strategy<Value = (PhaseModel, VideoSample)> {
    (phase_model(), prop_oneof![sample_within(0.0, 0.8, 12), tie_prone_sample()])
}

pub fn segment_equals_brute_force(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&segmentation_case(), |(model, s)| {
        let dp = segment(&model, &s).map_err(|e| fail(e.to_string()))?;
        let bf = brute_force_segment(&model, &s).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(&dp, &bf);
        let table = score_table(&model, &tdm_core::phase::video_descriptors(&s, model.absent_distance));
        prop_assert_eq!(dp.starts(), enumerate_best(&table));
        Ok(())
    }))
}

pub fn segment_output_is_legal(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&segmentation_case(), |(model, s)| {
        let seg = segment(&model, &s).map_err(|e| fail(e.to_string()))?;
        let n = s.frames.len();
        prop_assert_eq!(seg.n_frames(), n);
        prop_assert!(!seg.range(PhaseLabel::C).is_empty());
        let labels = seg.labels();
        prop_assert_eq!(labels.len(), n);
        prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(PhaseSegmentation::from_labels(&labels).map_err(|e| fail(e.to_string()))?, seg);
        Ok(())
    }))
}

pub fn segment_is_score_optimal(r: &mut TestRunner) -> Result<(), String> {
    let case = (phase_model(), vec(descriptor(), 1..=30)).prop_flat_map(|(m, d)| {
        let n = d.len();
        (Just(m), Just(d), legal_starts(n))
    });
    report(r.run(&case, |(model, d, other)| {
        let table = score_table(&model, &d);
        let best = segment_scores(&table).map_err(|e| fail(e.to_string()))?;
        let other = PhaseSegmentation::from_starts(other, d.len()).unwrap();
        prop_assert!(segmentation_score(&table, &best) >= segmentation_score(&table, &other));
        Ok(())
    }))
}

pub fn phase_fit_order_invariant(r: &mut TestRunner) -> Result<(), String> {
    let case = vec(fully_labelled_sample(), 1..6).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    report(r.run(&case, |(a, b)| {
        let fa = fit_phase_model(&a, SegmenterConfig::default()).map_err(|e| fail(e.to_string()))?;
        let fb = fit_phase_model(&b, SegmenterConfig::default()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(fa, fb);
        Ok(())
    }))
}

pub fn segment_translation_equivariant(r: &mut TestRunner) -> Result<(), String> {
    let case = (vec(labelled_descriptors(), 1..4), vec(descriptor(), 1..=12), -3.0..3.0f64);
    report(r.run(&case, |(train, query, offset)| {
        let shift = |d: &FrameDescriptor| FrameDescriptor(d.0.map(|v| v + offset));
        let shifted_train: Vec<_> = train
            .iter()
            .map(|(d, seg)| (d.iter().map(shift).collect::<Vec<_>>(), seg.clone()))
            .collect();
        let shifted_query: Vec<_> = query.iter().map(shift).collect();
        let cfg = SegmenterConfig::default();
        let m0 = fit_phase_model_from_descriptors(&train, cfg).map_err(|e| fail(e.to_string()))?;
        let m1 = fit_phase_model_from_descriptors(&shifted_train, cfg).map_err(|e| fail(e.to_string()))?;
        let s0 = segment_descriptors(&m0, &query).map_err(|e| fail(e.to_string()))?;
        let s1 = segment_descriptors(&m1, &shifted_query).map_err(|e| fail(e.to_string()))?;
        if s0 != s1 {
            // Rounding in the shifted means may only reorder exact or
            // near-exact ties.
            let table = score_table(&m0, &query);
            let (a, b) = (segmentation_score(&table, &s0), segmentation_score(&table, &s1));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}: {} vs {}", s0, s1, a, b);
        }
        Ok(())
    }))
}

pub fn phase_model_json_round_trip(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&phase_model(), |m| {
        let back = PhaseModel::from_json(&m.to_json()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(back, m);
        Ok(())
    }))
}

// ---- features -------------------------------------------------------------

pub fn features_translation_invariant(r: &mut TestRunner) -> Result<(), String> {
    let case = (segmented(0.2, 0.6, 12), -0.15..0.15f64, -0.15..0.15f64, mask());
    report(r.run(&case, |((s, seg), dx, dy, mask)| {
        let mut moved = s.clone();
        for f in &mut moved.frames {
            for e in track::Entity::ALL {
                if let Some(b) = f.bbox_mut(e) {
                    *b = b.translated(dx, dy);
                }
            }
        }
        let carry = CarryParams::default();
        let a = video_features(&s, &seg, mask, carry).map_err(|e| fail(e.to_string()))?;
        let b = video_features(&moved, &seg, mask, carry).map_err(|e| fail(e.to_string()))?;
        for (i, (x, y)) in a.0.iter().zip(b.0.iter()).enumerate() {
            prop_assert!((x - y).abs() <= 1e-9, "{}: {} vs {}", feature_names()[i], x, y);
        }
        Ok(())
    }))
}

fn swap_objects(s: &VideoSample) -> VideoSample {
    let mut out = s.clone();
    for f in &mut out.frames {
        std::mem::swap(&mut f.object1, &mut f.object2);
        std::mem::swap(&mut f.depth_object1, &mut f.depth_object2);
        std::mem::swap(&mut f.container_object1, &mut f.container_object2);
    }
    out
}

pub fn depth_difference_antisymmetric(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&segmented(0.0, 0.8, 12), |(s, seg)| {
        let carry = CarryParams::default();
        let a = video_features(&s, &seg, FeatureMask::ALL, carry).map_err(|e| fail(e.to_string()))?;
        let b = video_features(&swap_objects(&s), &seg, FeatureMask::ALL, carry)
            .map_err(|e| fail(e.to_string()))?;
        for p in PhaseLabel::ALL {
            let name = format!("{p}.depth_diff_12");
            let (x, y) = (a.get(&name).unwrap(), b.get(&name).unwrap());
            prop_assert!(x == -y, "{}: {} vs {}", name, x, y);
        }
        Ok(())
    }))
}

pub fn feature_dimension_constant(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(segmented(0.0, 0.8, 12), mask()), |((s, seg), mask)| {
        let v = video_features(&s, &seg, mask, CarryParams::default()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(v.as_slice().len(), FEATURE_DIM);
        prop_assert_eq!(feature_names().len(), FEATURE_DIM);
        prop_assert!(v.0.iter().all(|x| x.is_finite()));
        for (i, x) in v.0.iter().enumerate() {
            let kept = match tdm_core::features::column_group(i) {
                tdm_core::features::ColumnGroup::Base => mask.base,
                tdm_core::features::ColumnGroup::Depth => mask.depth,
                tdm_core::features::ColumnGroup::Container => mask.container,
            };
            prop_assert!(kept || *x == 0.0, "{} survived mask {}", feature_names()[i], mask);
        }
        Ok(())
    }))
}

pub fn iou_symmetric_and_bounded(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(bbox_within(0.0, 0.8), bbox_within(0.0, 0.8)), |(a, b)| {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
        Ok(())
    }))
}

pub fn presence_fractions(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&segmented(0.0, 0.8, 12), |(s, seg)| {
        let v = video_features(&s, &seg, FeatureMask::ALL, CarryParams::default())
            .map_err(|e| fail(e.to_string()))?;
        for p in PhaseLabel::ALL {
            let range = seg.range(p);
            for (name, e) in [
                ("presence_1", track::Entity::Object1),
                ("presence_2", track::Entity::Object2),
                ("presence_h", track::Entity::Hand),
            ] {
                let expected = if range.is_empty() {
                    0.0
                } else {
                    let hits = s.frames[range.clone()].iter().filter(|f| f.bbox(e).is_some()).count();
                    hits as f64 / range.len() as f64
                };
                prop_assert_eq!(v.get(&format!("{p}.{name}")).unwrap(), expected);
            }
        }
        Ok(())
    }))
}

pub fn feature_table_round_trip(r: &mut TestRunner) -> Result<(), String> {
    let row = (segmented(0.0, 0.8, 8), "\\PC{1,10}", prop::option::of(any::<u32>())).prop_map(
        |((s, seg), video_id, class_id)| FeatureRow {
            video_id,
            class_id,
            features: video_features(&s, &seg, FeatureMask::ALL, CarryParams::default()).unwrap(),
        },
    );
    report(r.run(&vec(row, 0..4), |rows| {
        let mut buf = Vec::new();
        write_feature_table(&mut buf, &rows).map_err(|e| fail(e.to_string()))?;
        let back = read_feature_table(buf.as_slice()).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(back, rows);
        Ok(())
    }))
}

// ---- forest ---------------------------------------------------------------

pub fn forest_probability_is_mean_leaf(r: &mut TestRunner) -> Result<(), String> {
    let case = (grid_table(3), small_params(), vec(-5.0..5.0f64, 3));
    report(r.run(&case, |((rows, labels), params, x)| {
        let forest = train_forest(&rows, &labels, &params).map_err(|e| fail(e.to_string()))?;
        let p = predict_proba(&forest, &x).map_err(|e| fail(e.to_string()))?;
        let mut sum = 0.0;
        for t in &forest {
            let leaf = match t.nodes[t.leaf_index(&x)] {
                Node::Leaf { fraction } => fraction,
                Node::Split { .. } => return Err(fail("leaf_index landed on a split")),
            };
            sum += leaf;
        }
        prop_assert_eq!(p, sum / forest.len() as f64);
        prop_assert!((0.0..=1.0).contains(&p));
        Ok(())
    }))
}

pub fn perfect_separator_fits(r: &mut TestRunner) -> Result<(), String> {
    let case = (grid_table(3), 0usize..3, 1usize..6, any::<u64>());
    report(r.run(&case, |((mut rows, labels), col, max_depth, seed)| {
        for (row, &l) in rows.iter_mut().zip(&labels) {
            row[col] = if l { 1.0 + row[col].abs() } else { -1.0 - row[col].abs() };
        }
        let params = ForestParams {
            n_trees: 1,
            max_depth,
            min_leaf: 1,
            n_candidate_features: 3,
            seed,
        };
        let tree = train_tree(&rows, &labels, &mut rng_for(seed, &[]), &params).map_err(|e| fail(e.to_string()))?;
        for (row, &l) in rows.iter().zip(&labels) {
            let p = tree.predict(row).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(p > 0.5, l);
        }
        Ok(())
    }))
}

pub fn monotone_feature_transform(r: &mut TestRunner) -> Result<(), String> {
    let case = (grid_table(3), 0usize..3, small_params());
    report(r.run(&case, |((rows, labels), col, params)| {
        // x^3 + 2x is strictly increasing and exact on the 1/8 grid.
        let warp = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let mut r = r.clone();
                    r[col] = r[col].powi(3) + 2.0 * r[col];
                    r
                })
                .collect()
        };
        let warped = warp(&rows);
        let a = train_tree(&rows, &labels, &mut rng_for(params.seed, &[]), &params).map_err(|e| fail(e.to_string()))?;
        let b = train_tree(&warped, &labels, &mut rng_for(params.seed, &[]), &params).map_err(|e| fail(e.to_string()))?;
        let (la, lb) = (tree_leaves(&a), tree_leaves(&b));
        prop_assert_eq!(la.len(), lb.len());
        for (x, y) in la.iter().zip(&lb) {
            prop_assert!(x.0 == y.0 && (x.1 == y.1 || (x.1.is_nan() && y.1.is_nan())));
        }
        for (x, y) in rows.iter().zip(&warped) {
            prop_assert_eq!(a.predict(x).unwrap(), b.predict(y).unwrap());
        }
        Ok(())
    }))
}

pub fn argmax_affine_invariant(r: &mut TestRunner) -> Result<(), String> {
    // Probabilities and coefficients on a dyadic grid keep a*p+b exact.
    let case = (
        vec(0u32..=64, 1..6),
        prop::sample::select(vec![0.25, 0.5, 1.0, 2.0, 4.0]),
        (-64i32..=64).prop_map(|k| k as f64 / 64.0),
    );
    report(r.run(&case, |(ps, a, b)| {
        let probs: BTreeMap<ClassId, f64> =
            ps.iter().enumerate().map(|(i, &k)| (100 + i as ClassId, k as f64 / 64.0)).collect();
        let scaled: BTreeMap<ClassId, f64> = probs.iter().map(|(&c, &p)| (c, a * p + b)).collect();
        prop_assert_eq!(argmax_class(&probs), argmax_class(&scaled));
        Ok(())
    }))
}

pub fn forest_bundle_round_trip(r: &mut TestRunner) -> Result<(), String> {
    let case = (grid_table(FEATURE_DIM), small_params(), phase_model(), mask());
    report(r.run(&case, |((rows, labels), params, phase_model, mask)| {
        let forest = train_forest(&rows, &labels, &params).map_err(|e| fail(e.to_string()))?;
        let model = ClassModel {
            class_id: 7,
            phase_model,
            forest,
            params,
            mask,
            carry: CarryParams::default(),
        };
        let text = model.to_bundle_json("phase_7.json");
        let back = ClassModel::from_bundle_json(&text, |r| {
            assert_eq!(r, "phase_7.json");
            Ok(model.phase_model.clone())
        })
        .map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(back, model);
        Ok(())
    }))
}

pub fn forest_thread_invariant(r: &mut TestRunner) -> Result<(), String> {
    let pools: Vec<_> = [1, 3]
        .map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())
        .into();
    report(r.run(&(grid_table(4), small_params()), |((rows, labels), params)| {
        let a = pools[0].install(|| train_forest(&rows, &labels, &params)).map_err(|e| fail(e.to_string()))?;
        let b = pools[1].install(|| train_forest(&rows, &labels, &params)).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(a, b);
        Ok(())
    }))
}

// ---- evaluation -----------------------------------------------------------

const CLASSES: [ClassId; 3] = [106, 112, 118];

fn pairs() -> impl Strategy<Value = Vec<(ClassId, ClassId)>> {
    let c = || prop::sample::select(CLASSES.to_vec());
    vec((c(), c()), 0..40)
}

pub fn confusion_matches_recount(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&pairs(), |pairs| {
        let m = confusion(&pairs, &CLASSES).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(m.total(), pairs.len() as u64);
        for c in CLASSES {
            let hit = pairs.iter().filter(|(t, p)| *t == c && *p == c).count();
            let predicted = pairs.iter().filter(|(_, p)| *p == c).count();
            let actual = pairs.iter().filter(|(t, _)| *t == c).count();
            let ratio = |den: usize| if den == 0 { 0.0 } else { hit as f64 / den as f64 };
            let got = precision_recall(&m, c).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(got, (ratio(predicted), ratio(actual)));
        }
        Ok(())
    }))
}

pub fn macro_average_bounds_and_order(r: &mut TestRunner) -> Result<(), String> {
    let case = vec(0.0..=1.0f64, 1..8).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    report(r.run(&case, |(a, b)| {
        let ma = macro_average(&a).map_err(|e| fail(e.to_string()))?;
        let mb = macro_average(&b).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(ma, mb);
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= ma && ma <= hi, "{} not in [{}, {}]", ma, lo, hi);
        Ok(())
    }))
}

pub fn report_csv_round_trip(r: &mut TestRunner) -> Result<(), String> {
    let metrics = (
        "\\PC{1,12}",
        vec((any::<u32>(), 0.0..=1.0f64, 0.0..=1.0f64), 0..5),
        0.0..=1.0f64,
        0.0..=1.0f64,
    );
    report(r.run(&metrics, |(model_id, rows, mp, mr)| {
        let table = MetricsTable {
            per_class: rows
                .into_iter()
                .map(|(class_id, precision, recall)| ClassMetrics {
                    class_id,
                    precision,
                    recall,
                })
                .collect(),
            macro_precision: mp,
            macro_recall: mr,
        };
        let csv = render_csv(&model_id, &table);
        let (id, back) = parse_report_csv(&csv).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(&id, &model_id);
        prop_assert_eq!(render_csv(&id, &back), csv);
        Ok(())
    }))
}

// ---- synthetic generator --------------------------------------------------

fn scenario() -> impl Strategy<Value = ScenarioParams> {
    (5usize..60, 0.0..0.02f64, 0.0..0.05f64, 0.0..=1.0f64, any::<u64>()).prop_map(
        |(n_frames, noise_sigma, depth_noise_sigma, depth_signal, seed)| ScenarioParams {
            n_frames,
            noise_sigma,
            depth_noise_sigma,
            depth_signal,
            seed,
        },
    )
}

pub fn generated_samples_valid(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&scenario(), |params| {
        let data = gen_dataset(1, &params).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(data.len(), 3);
        for s in &data {
            s.validate().map_err(|e| fail(e.to_string()))?;
            let truth = s.phase_truth.clone().ok_or_else(|| fail("no phase truth"))?;
            prop_assert_eq!(truth.n_frames(), params.n_frames);
            prop_assert!(!truth.range(PhaseLabel::C).is_empty());
            prop_assert_eq!(PhaseSegmentation::from_starts(truth.starts(), truth.n_frames()).ok(), Some(truth));
        }
        Ok(())
    }))
}

pub fn generator_order_independent(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(scenario(), 1usize..4, 1usize..4), |(params, small, extra)| {
        let short = gen_dataset(small, &params).map_err(|e| fail(e.to_string()))?;
        let long = gen_dataset(small + extra, &params).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(&long[..short.len()], &short[..]);
        // Regenerate back to front from the per-sample seed alone.
        for (i, s) in long.iter().enumerate().rev() {
            let (k, c) = (i / 3, SYNTH_CLASSES[i % 3]);
            let seed = derive_seed(params.seed, &[c as u64, k as u64]);
            let again = gen_sample(c, &ScenarioParams { seed, ..params }).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(&again, s);
        }
        Ok(())
    }))
}

pub fn zero_depth_signal_hides_depth(r: &mut TestRunner) -> Result<(), String> {
    report(r.run(&(any::<u64>(), 5usize..60), |(seed, n_frames)| {
        let params = ScenarioParams {
            n_frames,
            noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            depth_signal: 0.0,
            seed,
        };
        let into = gen_sample(INTO, &params).map_err(|e| fail(e.to_string()))?;
        let under = gen_sample(UNDERNEATH, &params).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(all_depths(&into), all_depths(&under));
        prop_assert_eq!(into.phase_truth, under.phase_truth);
        Ok(())
    }))
}
