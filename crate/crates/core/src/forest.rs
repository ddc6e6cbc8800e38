//! Severity-class random forest: a from-scratch CART ensemble over the 29
//! count-severity classes induced by the 28 count thresholds, used to
//! rectify the Gaussian count predictions with covariate and size
//! information.
//!
//! Trees are classic Breiman CART: each tree grows on a bootstrap resample
//! (with replacement), each node draws `mtry` candidate features (without
//! replacement), and the best split minimizes the weighted child Gini
//! impurity over midpoints between sorted distinct values. Growth stops at
//! pure nodes or when no candidate split separates the rows. A tree votes
//! with its leaf's majority class; the forest's class probabilities are
//! vote shares. Ties in split score resolve to the lowest feature index,
//! then the lowest threshold; ties in votes resolve to the lowest class.
//!
//! Out-of-bag rows (never drawn in a tree's bootstrap) give the error
//! estimate and the permutation importances; Gini importance accumulates
//! each split's impurity decrease on the feature it used. Every tree draws
//! from its own counter-based substream, so training is byte-identical in
//! serial and parallel execution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::cnt_thresholds;
use crate::mathx::{fmt_hex_f64, parse_hex_f64};
use crate::rngx::{RngLattice, DOMAIN_TREE};

/// Ordered severity cut points; class 0 is {0}, class c is (u_{c-1}, u_c],
/// and the last class holds everything above the top threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityBins {
    cuts: Vec<f64>,
}

impl SeverityBins {
    /// The challenge's 28 count thresholds, giving 29 classes.
    pub fn standard() -> SeverityBins {
        SeverityBins { cuts: cnt_thresholds() }
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn n_classes(&self) -> usize {
        self.cuts.len() + 1
    }
}

/// Class of a count: the index of the first cut at or above it, so 0 maps
/// to class 0 and anything above the top cut to the overflow class.
pub fn bin_label(cnt: u32, bins: &SeverityBins) -> usize {
    bins.cuts.partition_point(|&u| u < cnt as f64)
}

/// Gini impurity 1 - sum_c p_c^2 of a class-count vector.
pub fn gini_impurity(counts: &[u32]) -> f64 {
    let n: u32 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / nf).powi(2)).sum::<f64>()
}

/// Row-major numeric feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<FeatureTable> {
        if data.len() != rows * cols || cols == 0 {
            return Err(Error::Dimension(format!(
                "feature table of {} values cannot be {rows} x {cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "feature table has non-finite entries; impute before training".into(),
            ));
        }
        Ok(FeatureTable { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// `feature == NO_FEATURE` marks a leaf.
const NO_FEATURE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    /// Bootstrap class counts reaching the node; retained on leaves.
    counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Leaf class-count vector for a feature row.
    fn leaf_counts(&self, row: &[f64]) -> &[u32] {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            if node.feature == NO_FEATURE {
                return &node.counts;
            }
            at = if row[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    /// Majority-class vote, ties to the lowest class.
    pub fn predict(&self, row: &[f64]) -> usize {
        argmax_lowest(self.leaf_counts(row))
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

fn argmax_lowest(counts: &[u32]) -> usize {
    let mut best = 0usize;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ForestConfig {
    pub ntree: usize,
    /// Candidate features per node; `None` uses all of them.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> ForestConfig {
        ForestConfig { ntree: 200, mtry: None, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    /// Rows never drawn by each tree's bootstrap.
    pub oob_indices: Vec<Vec<u32>>,
    /// Per-tree, per-feature summed Gini decreases (bootstrap-size scaled).
    gini_decrease: Vec<Vec<f64>>,
    pub n_classes: usize,
    pub n_features: usize,
    pub mtry: usize,
    /// Out-of-bag misclassification rate over rows with at least one vote.
    pub oob_error: f64,
}

/// Permutation (out-of-bag accuracy) and Gini importances per feature.
#[derive(Debug, Clone)]
pub struct Importance {
    pub accuracy: Vec<f64>,
    /// Standard error of the per-tree accuracy decreases.
    pub accuracy_se: Vec<f64>,
    pub gini: Vec<f64>,
}

struct TreeBuilder<'a> {
    features: &'a FeatureTable,
    labels: &'a [usize],
    n_classes: usize,
    mtry: usize,
    min_leaf: usize,
}

struct BuiltTree {
    tree: DecisionTree,
    oob: Vec<u32>,
    gini_decrease: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn build(&self, tree_id: u64, lattice: &RngLattice) -> BuiltTree {
        let n = self.features.rows();
        let mut rng = lattice.stream(DOMAIN_TREE, tree_id, 0);
        let mut in_bag = vec![false; n];
        let mut sample: Vec<u32> = (0..n)
            .map(|_| {
                let i = rand::Rng::gen_range(&mut rng, 0..n);
                in_bag[i] = true;
                i as u32
            })
            .collect();
        let oob: Vec<u32> = (0..n as u32).filter(|&i| !in_bag[i as usize]).collect();
        let mut nodes = Vec::new();
        let mut gini_decrease = vec![0.0; self.features.cols()];
        let total = sample.len() as f64;
        self.grow(&mut sample, &mut nodes, &mut gini_decrease, total, &mut rng);
        BuiltTree { tree: DecisionTree { nodes }, oob, gini_decrease }
    }

    /// Grow a subtree over `rows` (in-place partitioned), returning its
    /// node index.
    fn grow(
        &self,
        rows: &mut [u32],
        nodes: &mut Vec<Node>,
        gini_decrease: &mut [f64],
        total: f64,
        rng: &mut impl rand::Rng,
    ) -> u32 {
        let mut counts = vec![0u32; self.n_classes];
        for &i in rows.iter() {
            counts[self.labels[i as usize]] += 1;
        }
        let node_id = nodes.len() as u32;
        nodes.push(Node {
            feature: NO_FEATURE,
            threshold: 0.0,
            left: 0,
            right: 0,
            counts: counts.clone(),
        });
        let n_node = rows.len();
        let impurity = gini_impurity(&counts);
        if impurity == 0.0 || n_node <= self.min_leaf {
            return node_id;
        }

        // Candidate features: mtry drawn without replacement, then sorted
        // so score ties resolve to the lowest feature index.
        let p = self.features.cols();
        let mut candidates: Vec<usize> = (0..p).collect();
        for k in 0..self.mtry {
            let j = rand::Rng::gen_range(&mut *rng, k..p);
            candidates.swap(k, j);
        }
        candidates.truncate(self.mtry);
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(n_node);
        for &f in &candidates {
            sorted.clear();
            sorted.extend(
                rows.iter()
                    .map(|&i| (self.features.value(i as usize, f), self.labels[i as usize])),
            );
            sorted.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if sorted[0].0 == sorted[n_node - 1].0 {
                continue;
            }
            let mut left = vec![0u32; self.n_classes];
            let mut right = counts.clone();
            let mut left_sq = 0.0f64;
            let mut right_sq: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum();
            for j in 0..n_node - 1 {
                let c = sorted[j].1;
                left_sq += 2.0 * left[c] as f64 + 1.0;
                right_sq += -2.0 * right[c] as f64 + 1.0;
                left[c] += 1;
                right[c] -= 1;
                if sorted[j].0 == sorted[j + 1].0 {
                    continue;
                }
                let nl = (j + 1) as f64;
                let nr = (n_node - j - 1) as f64;
                // Weighted child impurity nl*Gl + nr*Gr, expanded via the
                // running sums of squared counts.
                let score = n_node as f64 - left_sq / nl - right_sq / nr;
                if best.map_or(true, |(s, _, _)| score < s) {
                    best = Some((score, f, 0.5 * (sorted[j].0 + sorted[j + 1].0)));
                }
            }
        }

        let Some((score, feature, threshold)) = best else {
            return node_id; // all candidates constant on this node
        };
        gini_decrease[feature] += (n_node as f64 * impurity - score) / total;

        let split_at = partition_rows(rows, |i| {
            self.features.value(i as usize, feature) <= threshold
        });
        let (left_rows, right_rows) = rows.split_at_mut(split_at);
        let left = self.grow(left_rows, nodes, gini_decrease, total, rng);
        let right = self.grow(right_rows, nodes, gini_decrease, total, rng);
        let node = &mut nodes[node_id as usize];
        node.feature = feature as u32;
        node.threshold = threshold;
        node.left = left;
        node.right = right;
        node_id
    }
}

/// Stable partition: rows satisfying the predicate first; returns the
/// boundary. Stability keeps training independent of how the slice was
/// ordered by earlier splits on equal keys.
fn partition_rows(rows: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut buf: Vec<u32> = Vec::with_capacity(rows.len());
    buf.extend(rows.iter().copied().filter(|&i| pred(i)));
    let split = buf.len();
    buf.extend(rows.iter().copied().filter(|&i| !pred(i)));
    rows.copy_from_slice(&buf);
    split
}

/// Train a forest; labels must be in `0..n_classes`.
pub fn train_forest(
    features: &FeatureTable,
    labels: &[usize],
    n_classes: usize,
    config: &ForestConfig,
    lattice: RngLattice,
) -> Result<ForestModel> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Parameter("cannot train a forest on zero rows".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Parameter(format!(
            "label {bad} outside the {n_classes} classes"
        )));
    }
    if config.ntree == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let mtry = config.mtry.unwrap_or(features.cols());
    if mtry == 0 || mtry > features.cols() {
        return Err(Error::Config(format!(
            "mtry {mtry} outside 1..={}",
            features.cols()
        )));
    }
    let builder = TreeBuilder {
        features,
        labels,
        n_classes,
        mtry,
        min_leaf: config.min_leaf.max(1),
    };
    let built: Vec<BuiltTree> = (0..config.ntree as u64)
        .into_par_iter()
        .map(|tree_id| builder.build(tree_id, &lattice))
        .collect();

    let mut model = ForestModel {
        trees: Vec::with_capacity(config.ntree),
        oob_indices: Vec::with_capacity(config.ntree),
        gini_decrease: Vec::with_capacity(config.ntree),
        n_classes,
        n_features: features.cols(),
        mtry,
        oob_error: 0.0,
    };
    for b in built {
        model.trees.push(b.tree);
        model.oob_indices.push(b.oob);
        model.gini_decrease.push(b.gini_decrease);
    }

    // Out-of-bag majority votes.
    let mut votes = vec![0u32; n * n_classes];
    for (tree, oob) in model.trees.iter().zip(&model.oob_indices) {
        for &i in oob {
            let c = tree.predict(features.row(i as usize));
            votes[i as usize * n_classes + c] += 1;
        }
    }
    let mut wrong = 0usize;
    let mut voted = 0usize;
    for i in 0..n {
        let v = &votes[i * n_classes..(i + 1) * n_classes];
        if v.iter().all(|&c| c == 0) {
            continue;
        }
        voted += 1;
        if argmax_lowest(v) != labels[i] {
            wrong += 1;
        }
    }
    model.oob_error = if voted == 0 { 0.0 } else { wrong as f64 / voted as f64 };
    Ok(model)
}

/// Vote shares over classes for one feature row.
pub fn predict_class_probs(model: &ForestModel, row: &[f64]) -> Result<Vec<f64>> {
    if row.len() != model.n_features {
        return Err(Error::Dimension(format!(
            "row has {} features, model expects {}",
            row.len(),
            model.n_features
        )));
    }
    let mut shares = vec![0.0; model.n_classes];
    for tree in &model.trees {
        shares[tree.predict(row)] += 1.0;
    }
    let nt = model.trees.len() as f64;
    for s in &mut shares {
        *s /= nt;
    }
    Ok(shares)
}

/// CDF at the 28 thresholds from class vote shares: F(u_c) is the
/// cumulative share of classes 0..=c, leaving the overflow class above the
/// top threshold.
pub fn rf_predictive_cdf(probs: &[f64], bins: &SeverityBins) -> Result<Vec<f64>> {
    if probs.len() != bins.n_classes() {
        return Err(Error::Dimension(format!(
            "{} class shares for {} classes",
            probs.len(),
            bins.n_classes()
        )));
    }
    if probs.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p))
        || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Parameter("class shares must be a probability vector".into()));
    }
    let mut out = Vec::with_capacity(bins.cuts.len());
    let mut acc = 0.0;
    for c in 0..bins.cuts.len() {
        acc += probs[c];
        out.push(acc.min(1.0));
    }
    Ok(out)
}

/// Out-of-bag permutation importance (mean and SE over trees of the
/// accuracy decrease) plus accumulated Gini importance.
pub fn variable_importance(
    model: &ForestModel,
    features: &FeatureTable,
    labels: &[usize],
    lattice: RngLattice,
) -> Result<Importance> {
    if features.rows() != labels.len() || features.cols() != model.n_features {
        return Err(Error::Dimension(
            "importance inputs do not match the trained model".into(),
        ));
    }
    let p = model.n_features;
    let ntree = model.trees.len();
    // Per-tree accuracy decrease for each feature, OOB rows only.
    let drops: Vec<Vec<f64>> = model
        .trees
        .par_iter()
        .zip(&model.oob_indices)
        .enumerate()
        .map(|(tree_id, (tree, oob))| {
            let mut rng = lattice.stream(DOMAIN_TREE, tree_id as u64, 1);
            let mut out = vec![0.0; p];
            if oob.is_empty() {
                return out;
            }
            let baseline = oob
                .iter()
                .filter(|&&i| tree.predict(features.row(i as usize)) == labels[i as usize])
                .count() as f64
                / oob.len() as f64;
            let mut buf: Vec<f64> = Vec::with_capacity(features.cols());
            let mut perm: Vec<u32> = oob.clone();
            for f in 0..p {
                // Fisher-Yates over the OOB rows' values of feature f.
                perm.copy_from_slice(oob);
                for k in (1..perm.len()).rev() {
                    let j = rand::Rng::gen_range(&mut rng, 0..=k);
                    perm.swap(k, j);
                }
                let mut correct = 0usize;
                for (slot, &i) in oob.iter().enumerate() {
                    buf.clear();
                    buf.extend_from_slice(features.row(i as usize));
                    buf[f] = features.value(perm[slot] as usize, f);
                    if tree.predict(&buf) == labels[i as usize] {
                        correct += 1;
                    }
                }
                out[f] = baseline - correct as f64 / oob.len() as f64;
            }
            out
        })
        .collect();

    let mut accuracy = vec![0.0; p];
    let mut accuracy_se = vec![0.0; p];
    let mut gini = vec![0.0; p];
    for f in 0..p {
        let mean = drops.iter().map(|d| d[f]).sum::<f64>() / ntree as f64;
        accuracy[f] = mean;
        if ntree > 1 {
            let var = drops.iter().map(|d| (d[f] - mean).powi(2)).sum::<f64>()
                / (ntree - 1) as f64;
            accuracy_se[f] = (var / ntree as f64).sqrt();
        }
        gini[f] = model.gini_decrease.iter().map(|g| g[f]).sum::<f64>() / ntree as f64;
    }
    Ok(Importance { accuracy, accuracy_se, gini })
}

/// Flat text serialization, one node per line:
/// `tree node feature threshold left right count,count,...`
/// with feature -1 on leaves and thresholds in hex floats for exactness.
pub fn forest_to_text(model: &ForestModel) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "forest ntree={} classes={} features={} mtry={} oob={}\n",
        model.trees.len(),
        model.n_classes,
        model.n_features,
        model.mtry,
        fmt_hex_f64(model.oob_error),
    ));
    for (ti, tree) in model.trees.iter().enumerate() {
        for (ni, node) in tree.nodes.iter().enumerate() {
            let feature = if node.feature == NO_FEATURE {
                -1
            } else {
                node.feature as i64
            };
            let counts = node
                .counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{ti} {ni} {feature} {} {} {} {counts}\n",
                fmt_hex_f64(node.threshold),
                node.left,
                node.right
            ));
        }
        let oob = model.oob_indices[ti]
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("oob {ti} {oob}\n"));
        let gini = model.gini_decrease[ti]
            .iter()
            .map(|&g| fmt_hex_f64(g))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("gini {ti} {gini}\n"));
    }
    out
}

/// Inverse of `forest_to_text`.
pub fn forest_from_text(text: &str) -> Result<ForestModel> {
    let bad = |line: usize, reason: &str| Error::Parse {
        path: "forest model".into(),
        line,
        reason: reason.into(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(0, "empty model text"))?;
    let mut ntree = 0usize;
    let mut n_classes = 0usize;
    let mut n_features = 0usize;
    let mut mtry = 0usize;
    let mut oob_error = 0.0f64;
    if !header.starts_with("forest ") {
        return Err(bad(1, "missing forest header"));
    }
    for part in header.split_whitespace().skip(1) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(1, "malformed header field"))?;
        match key {
            "ntree" => ntree = value.parse().map_err(|_| bad(1, "bad ntree"))?,
            "classes" => n_classes = value.parse().map_err(|_| bad(1, "bad classes"))?,
            "features" => n_features = value.parse().map_err(|_| bad(1, "bad features"))?,
            "mtry" => mtry = value.parse().map_err(|_| bad(1, "bad mtry"))?,
            "oob" => oob_error = parse_hex_f64(value).ok_or_else(|| bad(1, "bad oob"))?,
            _ => return Err(bad(1, "unknown header field")),
        }
    }
    let mut model = ForestModel {
        trees: vec![DecisionTree { nodes: Vec::new() }; ntree],
        oob_indices: vec![Vec::new(); ntree],
        gini_decrease: vec![Vec::new(); ntree],
        n_classes,
        n_features,
        mtry,
        oob_error,
    };
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match fields[0] {
            "oob" => {
                let ti: usize = fields[1].parse().map_err(|_| bad(lineno, "bad tree id"))?;
                if fields.len() > 2 && !fields[2].is_empty() {
                    model.oob_indices[ti] = fields[2]
                        .split(',')
                        .map(|v| v.parse::<u32>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(lineno, "bad oob index"))?;
                }
            }
            "gini" => {
                let ti: usize = fields[1].parse().map_err(|_| bad(lineno, "bad tree id"))?;
                model.gini_decrease[ti] = fields[2]
                    .split(',')
                    .map(parse_hex_f64)
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad(lineno, "bad gini value"))?;
            }
            _ => {
                if fields.len() != 7 {
                    return Err(bad(lineno, "node line needs 7 fields"));
                }
                let ti: usize = fields[0].parse().map_err(|_| bad(lineno, "bad tree id"))?;
                let ni: usize = fields[1].parse().map_err(|_| bad(lineno, "bad node id"))?;
                let feature: i64 =
                    fields[2].parse().map_err(|_| bad(lineno, "bad feature"))?;
                let threshold =
                    parse_hex_f64(fields[3]).ok_or_else(|| bad(lineno, "bad threshold"))?;
                let left: u32 = fields[4].parse().map_err(|_| bad(lineno, "bad left"))?;
                let right: u32 = fields[5].parse().map_err(|_| bad(lineno, "bad right"))?;
                let counts: Vec<u32> = fields[6]
                    .split(',')
                    .map(|v| v.parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(lineno, "bad count"))?;
                if ti >= ntree {
                    return Err(bad(lineno, "tree id beyond header ntree"));
                }
                let nodes = &mut model.trees[ti].nodes;
                if ni != nodes.len() {
                    return Err(bad(lineno, "node ids must be dense and in order"));
                }
                nodes.push(Node {
                    feature: if feature < 0 { NO_FEATURE } else { feature as u32 },
                    threshold,
                    left,
                    right,
                    counts,
                });
            }
        }
    }
    Ok(model)
}
