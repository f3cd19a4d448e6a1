//! Gini decision trees, bagged forests, and one-vs-rest arbitration.
//!
//! Split selection works on exact integer label counts, so ties between
//! candidate splits are genuine ties and resolve to the lowest feature
//! index, then the lowest threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::features::{video_features, CarryParams, FeatureMask, FeatureVector, FEATURE_DIM};
use crate::phase::{segment, PhaseModel};
use crate::seed::{derive_seed, rng_for};
use crate::track::{ActionClass, ClassId, VideoSample};

pub const BUNDLE_FORMAT: &str = "tdm-forest-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_candidate_features: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 2,
            // ceil(sqrt(117))
            n_candidate_features: 11,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_trees", self.n_trees),
            ("max_depth", self.max_depth),
            ("min_leaf", self.min_leaf),
            ("n_candidate_features", self.n_candidate_features),
        ] {
            if v == 0 {
                return Err(TdmError::Argument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `value <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { fraction: f64 },
}

/// Binary tree stored as a flat node list; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub n_features: usize,
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Positive fraction of the leaf reached by `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.n_features)?;
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { fraction } => return Ok(fraction),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[at]
        {
            at = if x[feature] <= threshold { left } else { right };
        }
        at
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Checks that the node list forms a tree whose leaves are all
    /// reachable and whose fractions lie in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            let node = self
                .nodes
                .get(at)
                .ok_or_else(|| TdmError::Format(format!("node {at} out of range")))?;
            if std::mem::replace(&mut seen[at], true) {
                return Err(TdmError::Format(format!("node {at} reached twice")));
            }
            match *node {
                Node::Leaf { fraction } => {
                    if !(0.0..=1.0).contains(&fraction) {
                        return Err(TdmError::Format(format!("leaf fraction {fraction}")));
                    }
                }
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature >= self.n_features {
                        return Err(TdmError::Format(format!("feature {feature} out of range")));
                    }
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(TdmError::Format("unreachable nodes".into()));
        }
        Ok(())
    }
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(TdmError::Argument(format!(
            "feature dimension {got} does not match {want}"
        )));
    }
    Ok(())
}

/// Gini impurity `1 - p^2 - (1-p)^2` of a binary label multiset.
pub fn gini(labels: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(TdmError::Argument("gini of an empty label set".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    Ok(1.0 - p * p - (1.0 - p) * (1.0 - p))
}

/// `(pos^2 + neg^2) / n` kept as an exact fraction. Larger means purer;
/// the weighted child Gini of a split is `1 - (left + right) / n`.
#[derive(Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of(pos: usize, total: usize) -> Self {
        let (p, q) = (pos as u128, (total - pos) as u128);
        Purity {
            num: p * p + q * q,
            den: total as u128,
        }
    }

    fn plus(self, other: Purity) -> Purity {
        Purity {
            num: self.num * other.den + other.num * self.den,
            den: self.den * other.den,
        }
    }

    fn cmp(&self, other: &Purity) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    purity: Purity,
}

struct Builder<'a, R, G> {
    rows: &'a [R],
    labels: &'a [bool],
    params: &'a ForestParams,
    n_features: usize,
    rng: &'a mut G,
    nodes: Vec<Node>,
}

impl<R: AsRef<[f64]>, G: Rng> Builder<'_, R, G> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.labels[i]).count();
        self.nodes.push(Node::Leaf {
            fraction: pos as f64 / idx.len() as f64,
        });
        self.nodes.len() - 1
    }

    fn best_split(&mut self, idx: &[usize], parent: Purity) -> Option<SplitChoice> {
        let k = self.params.n_candidate_features.min(self.n_features);
        let mut candidates = index::sample(self.rng, self.n_features, k).into_vec();
        candidates.sort_unstable();
        let n = idx.len();
        let min_leaf = self.params.min_leaf;
        let mut best: Option<SplitChoice> = None;
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(n);
        for feature in candidates {
            column.clear();
            column.extend(idx.iter().map(|&i| (self.rows[i].as_ref()[feature], self.labels[i])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_pos = column.iter().filter(|c| c.1).count();
            let mut left_pos = 0;
            for i in 0..n - 1 {
                if column[i].1 {
                    left_pos += 1;
                }
                let (lo, hi) = (column[i].0, column[i + 1].0);
                if lo == hi {
                    continue;
                }
                let n_left = i + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let purity = Purity::of(left_pos, n_left)
                    .plus(Purity::of(total_pos - left_pos, n - n_left));
                if purity.cmp(&parent) != Ordering::Greater {
                    continue;
                }
                if best.as_ref().is_none_or(|b| purity.cmp(&b.purity) == Ordering::Greater) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(SplitChoice {
                        feature,
                        threshold,
                        purity,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.labels[i]).count();
        if depth >= self.params.max_depth
            || pos == 0
            || pos == n
            || n < 2 * self.params.min_leaf
        {
            return self.leaf(idx);
        }
        let Some(split) = self.best_split(idx, Purity::of(pos, n)) else {
            return self.leaf(idx);
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.rows[i].as_ref()[split.feature] <= split.threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { fraction: 0.0 });
        let left = self.grow(&left_idx, depth + 1);
        let right = self.grow(&right_idx, depth + 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

fn check_rows<R: AsRef<[f64]>>(rows: &[R], labels: &[bool]) -> Result<usize> {
    if rows.is_empty() {
        return Err(TdmError::Argument("no training rows".into()));
    }
    if rows.len() != labels.len() {
        return Err(TdmError::Argument(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let dim = rows[0].as_ref().len();
    if dim == 0 {
        return Err(TdmError::Argument("rows have no features".into()));
    }
    for r in rows {
        check_dim(r.as_ref().len(), dim)?;
    }
    Ok(dim)
}

/// Grows one tree on all of `rows`.
pub fn train_tree<R: AsRef<[f64]>, G: Rng>(
    rows: &[R],
    labels: &[bool],
    rng: &mut G,
    params: &ForestParams,
) -> Result<Tree> {
    let idx: Vec<usize> = (0..rows.len()).collect();
    train_tree_on(rows, labels, &idx, rng, params)
}

fn train_tree_on<R: AsRef<[f64]>, G: Rng>(
    rows: &[R],
    labels: &[bool],
    idx: &[usize],
    rng: &mut G,
    params: &ForestParams,
) -> Result<Tree> {
    params.validate()?;
    let n_features = check_rows(rows, labels)?;
    let mut builder = Builder {
        rows,
        labels,
        params,
        n_features,
        rng,
        nodes: Vec::new(),
    };
    builder.grow(idx, 0);
    Ok(Tree {
        n_features,
        nodes: builder.nodes,
    })
}

/// Bagged forest. Tree `t` draws its bootstrap and its feature subsets
/// from a stream keyed by `(params.seed, t)`, so the result does not depend
/// on how trees are scheduled across threads.
pub fn train_forest<R: AsRef<[f64]> + Sync>(
    rows: &[R],
    labels: &[bool],
    params: &ForestParams,
) -> Result<Vec<Tree>> {
    params.validate()?;
    check_rows(rows, labels)?;
    let n = rows.len();
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(params.seed, &[t as u64]);
            let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            train_tree_on(rows, labels, &bootstrap, &mut rng, params)
        })
        .collect()
}

/// Mean leaf fraction over the forest.
pub fn predict_proba(forest: &[Tree], x: &[f64]) -> Result<f64> {
    if forest.is_empty() {
        return Err(TdmError::Argument("empty forest".into()));
    }
    let mut sum = 0.0;
    for tree in forest {
        sum += tree.predict(x)?;
    }
    Ok(sum / forest.len() as f64)
}

/// One action class's top-down model: its own phase segmenter and forest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub class_id: ClassId,
    pub phase_model: PhaseModel,
    pub forest: Vec<Tree>,
    pub params: ForestParams,
    pub mask: FeatureMask,
    pub carry: CarryParams,
}

impl ClassModel {
    /// Segments with this class's phase model, then scores with its forest.
    pub fn probability(&self, sample: &VideoSample) -> Result<f64> {
        let seg = segment(&self.phase_model, sample)?;
        let x = video_features(sample, &seg, self.mask, self.carry)?;
        predict_proba(&self.forest, x.as_slice())
    }

    /// Serializes the model with a reference to its separately stored
    /// phase model.
    pub fn to_bundle_json(&self, phase_model_ref: &str) -> String {
        let wire = BundleWire {
            format: BUNDLE_FORMAT.to_string(),
            class_id: self.class_id,
            params: self.params,
            mask: self.mask,
            carry: self.carry,
            phase_model: phase_model_ref.to_string(),
            trees: self.forest.clone(),
        };
        serde_json::to_string_pretty(&wire).expect("bundle serialization is infallible")
    }

    /// Parses a bundle; `resolve` loads the referenced phase model.
    pub fn from_bundle_json(
        text: &str,
        resolve: impl FnOnce(&str) -> Result<PhaseModel>,
    ) -> Result<ClassModel> {
        let wire: BundleWire = serde_json::from_str(text)?;
        if wire.format != BUNDLE_FORMAT {
            return Err(TdmError::Format(format!(
                "expected format \"{BUNDLE_FORMAT}\", found \"{}\"",
                wire.format
            )));
        }
        wire.params.validate()?;
        if wire.trees.len() != wire.params.n_trees {
            return Err(TdmError::Format(format!(
                "bundle for class {} has {} trees, params say {}",
                wire.class_id,
                wire.trees.len(),
                wire.params.n_trees
            )));
        }
        for t in &wire.trees {
            t.validate()?;
        }
        Ok(ClassModel {
            class_id: wire.class_id,
            phase_model: resolve(&wire.phase_model)?,
            forest: wire.trees,
            params: wire.params,
            mask: wire.mask,
            carry: wire.carry,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleWire {
    format: String,
    class_id: ClassId,
    params: ForestParams,
    mask: FeatureMask,
    carry: CarryParams,
    phase_model: String,
    trees: Vec<Tree>,
}

/// Forest seed for class `class_id` under root seed `root`.
pub fn class_seed(root: u64, class_id: ClassId) -> u64 {
    derive_seed(root, &[class_id as u64])
}

/// Trains the binary forest for `class_id` on rows labelled by class.
pub fn train_class_forest<R: AsRef<[f64]> + Sync>(
    rows: &[R],
    row_classes: &[ClassId],
    class_id: ClassId,
    params: &ForestParams,
) -> Result<Vec<Tree>> {
    let labels: Vec<bool> = row_classes.iter().map(|&c| c == class_id).collect();
    if !labels.iter().any(|&l| l) {
        return Err(TdmError::Training(format!(
            "class {class_id} has no positive examples"
        )));
    }
    let per_class = ForestParams {
        seed: class_seed(params.seed, class_id),
        ..*params
    };
    train_forest(rows, &labels, &per_class)
}

/// One forest per class on a shared feature table, each class taking its
/// own rows as positives and every other row as negative.
pub fn train_one_vs_rest(
    dataset: &[(FeatureVector, ClassId)],
    classes: &[ActionClass],
    phase_models: &BTreeMap<ClassId, PhaseModel>,
    params: &ForestParams,
    mask: FeatureMask,
    carry: CarryParams,
) -> Result<BTreeMap<ClassId, ClassModel>> {
    let rows: Vec<&[f64]> = dataset.iter().map(|(x, _)| x.as_slice()).collect();
    let row_classes: Vec<ClassId> = dataset.iter().map(|(_, c)| *c).collect();
    for r in &rows {
        check_dim(r.len(), FEATURE_DIM)?;
    }
    classes
        .par_iter()
        .map(|class| {
            let phase_model = phase_models.get(&class.id).cloned().ok_or_else(|| {
                TdmError::Training(format!("class {} has no phase model", class.id))
            })?;
            let forest = train_class_forest(&rows, &row_classes, class.id, params)?;
            Ok((
                class.id,
                ClassModel {
                    class_id: class.id,
                    phase_model,
                    forest,
                    params: *params,
                    mask,
                    carry,
                },
            ))
        })
        .collect()
}

/// Highest probability wins; exact ties go to the lowest class id.
pub fn argmax_class(probabilities: &BTreeMap<ClassId, f64>) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for (&c, &p) in probabilities {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((c, p));
        }
    }
    best.map(|(c, _)| c)
}

pub fn class_probabilities(
    models: &BTreeMap<ClassId, ClassModel>,
    sample: &VideoSample,
) -> Result<BTreeMap<ClassId, f64>> {
    models
        .iter()
        .map(|(&c, m)| Ok((c, m.probability(sample)?)))
        .collect()
}

/// Runs every class model on the video and returns the best fit.
pub fn predict_class(
    models: &BTreeMap<ClassId, ClassModel>,
    sample: &VideoSample,
) -> Result<ClassId> {
    if models.is_empty() {
        return Err(TdmError::Argument("no class models".into()));
    }
    let probs = class_probabilities(models, sample)?;
    Ok(argmax_class(&probs).expect("non-empty"))
}
