//! Random forest regression with axis-aligned trees, without-replacement row
//! subsampling, and out-of-bag error for hyper-parameter tuning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Reader, Writer};
use crate::error::CanopyError;
use crate::par;
use crate::Result;

/// Forest hyper-parameters. `max_depth: None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestHyperParams {
    /// Fraction of features considered at every split.
    pub feature_ratio: f64,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub sample_ratio: f64,
    pub max_depth: Option<usize>,
    /// Minimum training samples in every leaf.
    pub min_leaf: usize,
}

impl ForestHyperParams {
    fn validate(&self, n_rows: usize) -> Result<()> {
        if !(self.feature_ratio > 0.0 && self.feature_ratio <= 1.0) {
            return Err(CanopyError::InvalidConfig(format!(
                "feature_ratio {} outside (0, 1]",
                self.feature_ratio
            )));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(CanopyError::InvalidConfig(format!(
                "sample_ratio {} outside (0, 1]",
                self.sample_ratio
            )));
        }
        if self.min_leaf == 0 {
            return Err(CanopyError::InvalidConfig("min_leaf must be >= 1".into()));
        }
        if self.min_leaf >= n_rows {
            return Err(CanopyError::InsufficientSamples(format!(
                "min_leaf {} >= {} rows",
                self.min_leaf, n_rows
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// One regression tree: axis-aligned splits, leaves hold the mean target.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone)]
pub struct RandomForestModel {
    pub trees: Vec<RegressionTree>,
    pub hyper_params: ForestHyperParams,
    pub tree_seeds: Vec<u64>,
    /// Row sets each tree trained on (sorted indices into the training data).
    pub subsamples: Vec<Vec<usize>>,
    /// OOB mean squared error measured at fit time, when any row had OOB trees.
    pub oob_error: Option<f64>,
}

impl RandomForestModel {
    /// Mean of tree predictions, summed in value order so the result is
    /// independent of tree order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut preds: Vec<f64> = self.trees.iter().map(|t| t.predict_row(row)).collect();
        preds.sort_by(f64::total_cmp);
        preds.iter().sum::<f64>() / preds.len() as f64
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        par::map_ordered(rows, |row| self.predict_row(row))
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.f64(self.hyper_params.feature_ratio)
            .f64(self.hyper_params.sample_ratio)
            .u64(match self.hyper_params.max_depth {
                Some(d) => d as u64,
                None => u64::MAX,
            })
            .u64(self.hyper_params.min_leaf as u64)
            .f64(self.oob_error.unwrap_or(f64::NAN))
            .u64(self.trees.len() as u64);
        for (tree, (seed, subsample)) in self
            .trees
            .iter()
            .zip(self.tree_seeds.iter().zip(&self.subsamples))
        {
            w.u64(*seed);
            w.u64(subsample.len() as u64);
            for &i in subsample {
                w.u64(i as u64);
            }
            w.u64(tree.nodes.len() as u64);
            for node in &tree.nodes {
                match node {
                    TreeNode::Leaf { value } => {
                        w.u32(0).f64(*value);
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u32(1)
                            .u64(*feature as u64)
                            .f64(*threshold)
                            .u64(*left as u64)
                            .u64(*right as u64);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let feature_ratio = r.f64()?;
        let sample_ratio = r.f64()?;
        let depth_raw = r.u64()?;
        let max_depth = if depth_raw == u64::MAX {
            None
        } else {
            Some(depth_raw as usize)
        };
        let min_leaf = r.u64()? as usize;
        let oob = r.f64()?;
        let n_trees = r.u64()? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        let mut tree_seeds = Vec::with_capacity(n_trees);
        let mut subsamples = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            tree_seeds.push(r.u64()?);
            let n_sub = r.u64()? as usize;
            let mut subsample = Vec::with_capacity(n_sub);
            for _ in 0..n_sub {
                subsample.push(r.u64()? as usize);
            }
            subsamples.push(subsample);
            let n_nodes = r.u64()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                match r.u32()? {
                    0 => nodes.push(TreeNode::Leaf { value: r.f64()? }),
                    1 => nodes.push(TreeNode::Split {
                        feature: r.u64()? as usize,
                        threshold: r.f64()?,
                        left: r.u64()? as usize,
                        right: r.u64()? as usize,
                    }),
                    tag => {
                        return Err(CanopyError::InvalidContainer(format!(
                            "unknown tree node tag {tag}"
                        )))
                    }
                }
            }
            trees.push(RegressionTree { nodes });
        }
        Ok(RandomForestModel {
            trees,
            hyper_params: ForestHyperParams {
                feature_ratio,
                sample_ratio,
                max_depth,
                min_leaf,
            },
            tree_seeds,
            subsamples,
            oob_error: if oob.is_nan() { None } else { Some(oob) },
        })
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    n_split_features: usize,
    n_features: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
    rng: ChaCha8Rng,
}

impl<'a> TreeBuilder<'a> {
    /// Recursively grow the subtree for `indices`; returns its node id.
    fn grow(&mut self, indices: &mut [usize], depth: usize) -> usize {
        let n = indices.len();
        let sum: f64 = indices.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;

        let depth_cap = self.max_depth.map_or(false, |d| depth >= d);
        if depth_cap || n < 2 * self.min_leaf {
            return self.leaf(mean);
        }
        let all_equal = indices.windows(2).all(|w| self.y[w[0]] == self.y[w[1]]);
        if all_equal {
            return self.leaf(mean);
        }

        match self.best_split(indices) {
            None => self.leaf(mean),
            Some((feature, threshold)) => {
                // Partition preserving ascending index order within each side
                // so child growth is independent of incidental ordering.
                let mut left: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| self.x[i][feature] <= threshold)
                    .collect();
                let mut right: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| self.x[i][feature] > threshold)
                    .collect();
                left.sort_unstable();
                right.sort_unstable();
                let node = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { value: mean }); // placeholder
                let left_id = self.grow(&mut left, depth + 1);
                let right_id = self.grow(&mut right, depth + 1);
                self.nodes[node] = TreeNode::Split {
                    feature,
                    threshold,
                    left: left_id,
                    right: right_id,
                };
                node
            }
        }
    }

    fn leaf(&mut self, value: f64) -> usize {
        self.nodes.push(TreeNode::Leaf { value });
        self.nodes.len() - 1
    }

    /// Exhaustive threshold scan over midpoints of sorted distinct values of a
    /// fresh random feature subset. Best SSE reduction wins; ties go to the
    /// lowest feature index, then the lowest threshold (guaranteed by scan
    /// order and strict improvement).
    fn best_split(&mut self, indices: &[usize]) -> Option<(usize, f64)> {
        let mut features: Vec<usize> = (0..self.n_features).collect();
        features.shuffle(&mut self.rng);
        features.truncate(self.n_split_features);
        features.sort_unstable();

        let n = indices.len() as f64;
        let total_sum: f64 = indices.iter().map(|&i| self.y[i]).sum();
        let total_sq: f64 = indices.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let parent_sse = total_sq - total_sum * total_sum / n;

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = Vec::with_capacity(indices.len());
        for &feature in &features {
            order.clear();
            order.extend_from_slice(indices);
            order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));

            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for (k, &i) in order.iter().enumerate().take(order.len() - 1) {
                let yi = self.y[i];
                left_sum += yi;
                left_sq += yi * yi;
                let v = self.x[i][feature];
                let v_next = self.x[order[k + 1]][feature];
                if v == v_next {
                    continue;
                }
                let n_left = k + 1;
                let n_right = order.len() - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let right_sum = total_sum - left_sum;
                let right_sq = total_sq - left_sq;
                let sse_left = left_sq - left_sum * left_sum / n_left as f64;
                let sse_right = right_sq - right_sum * right_sum / n_right as f64;
                let reduction = parent_sse - sse_left - sse_right;
                let threshold = 0.5 * (v + v_next);
                if reduction > 0.0 && best.map_or(true, |(r, _, _)| reduction > r) {
                    best = Some((reduction, feature, threshold));
                }
            }
        }
        best.map(|(_, feature, threshold)| (feature, threshold))
    }
}

fn build_tree(
    x: &[Vec<f64>],
    y: &[f64],
    hp: &ForestHyperParams,
    seed: u64,
) -> (RegressionTree, Vec<usize>) {
    let n = x.len();
    let n_features = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Without-replacement subsample: stable shuffle of the index range.
    let k = ((hp.sample_ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    let mut subsample: Vec<usize> = all[..k].to_vec();
    subsample.sort_unstable();

    let n_split_features = ((hp.feature_ratio * n_features as f64).ceil() as usize)
        .clamp(1, n_features);
    let mut builder = TreeBuilder {
        x,
        y,
        n_split_features,
        n_features,
        max_depth: hp.max_depth,
        min_leaf: hp.min_leaf,
        nodes: Vec::new(),
        rng,
    };
    let mut working = subsample.clone();
    let root = builder.grow(&mut working, 0);
    debug_assert_eq!(root, 0);
    (
        RegressionTree {
            nodes: builder.nodes,
        },
        subsample,
    )
}

/// Fit a forest of `n_trees` trees. Deterministic given `seed`: per-tree seeds
/// are drawn up front, so tree construction order (including parallel
/// construction) cannot change the model.
pub fn fit_random_forest(
    x: &[Vec<f64>],
    y: &[f64],
    hp: &ForestHyperParams,
    n_trees: usize,
    seed: u64,
) -> Result<RandomForestModel> {
    assert_eq!(x.len(), y.len());
    if n_trees == 0 {
        return Err(CanopyError::InvalidConfig("n_trees must be >= 1".into()));
    }
    if x.is_empty() {
        return Err(CanopyError::InsufficientSamples("no rows".into()));
    }
    hp.validate(x.len())?;

    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let tree_seeds: Vec<u64> = (0..n_trees).map(|_| seed_rng.gen()).collect();

    let built: Vec<(RegressionTree, Vec<usize>)> =
        par::map_ordered(&tree_seeds, |&s| build_tree(x, y, hp, s));
    let (trees, subsamples): (Vec<_>, Vec<_>) = built.into_iter().unzip();

    let mut model = RandomForestModel {
        trees,
        hyper_params: *hp,
        tree_seeds,
        subsamples,
        oob_error: None,
    };
    model.oob_error = oob_error(&model, x, y).ok();
    Ok(model)
}

/// Mean squared error of out-of-bag predictions: each row is predicted by the
/// trees whose subsample excluded it. Rows covered by every tree are skipped
/// (and counted); if no row has an OOB tree the error is undefined.
pub fn oob_error(model: &RandomForestModel, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let mut in_sample = vec![vec![false; n]; model.trees.len()];
    for (t, subsample) in model.subsamples.iter().enumerate() {
        for &i in subsample {
            in_sample[t][i] = true;
        }
    }

    let mut total = 0.0;
    let mut evaluated = 0usize;
    for row in 0..n {
        let mut preds: Vec<f64> = model
            .trees
            .iter()
            .enumerate()
            .filter(|(t, _)| !in_sample[*t][row])
            .map(|(_, tree)| tree.predict_row(&x[row]))
            .collect();
        if preds.is_empty() {
            continue;
        }
        preds.sort_by(f64::total_cmp);
        let pred = preds.iter().sum::<f64>() / preds.len() as f64;
        let d = pred - y[row];
        total += d * d;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CanopyError::NoOobRows);
    }
    Ok(total / evaluated as f64)
}

/// Hyper-parameter grids for the exhaustive OOB search.
#[derive(Debug, Clone)]
pub struct HyperParamGrids {
    pub feature_ratios: Vec<f64>,
    pub sample_ratios: Vec<f64>,
    pub max_depths: Vec<Option<usize>>,
    pub min_leafs: Vec<usize>,
}

impl HyperParamGrids {
    pub fn is_empty(&self) -> bool {
        self.feature_ratios.is_empty()
            || self.sample_ratios.is_empty()
            || self.max_depths.is_empty()
            || self.min_leafs.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridSearchRow {
    pub params: ForestHyperParams,
    /// +inf when the cell had no OOB rows (e.g. sample_ratio = 1).
    pub oob: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: ForestHyperParams,
    pub best_oob: f64,
    pub table: Vec<GridSearchRow>,
}

/// Exhaustive search minimizing OOB error. Ties keep the first cell in
/// lexicographic grid order (feature ratio, sample ratio, depth, min leaf).
pub fn grid_search_oob(
    x: &[Vec<f64>],
    y: &[f64],
    grids: &HyperParamGrids,
    n_trees: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    if grids.is_empty() {
        return Err(CanopyError::InvalidConfig("empty hyper-parameter grid".into()));
    }
    let mut cells = Vec::new();
    for &feature_ratio in &grids.feature_ratios {
        for &sample_ratio in &grids.sample_ratios {
            for &max_depth in &grids.max_depths {
                for &min_leaf in &grids.min_leafs {
                    cells.push(ForestHyperParams {
                        feature_ratio,
                        sample_ratio,
                        max_depth,
                        min_leaf,
                    });
                }
            }
        }
    }

    let rows: Vec<GridSearchRow> = par::try_map_ordered(&cells, |hp| {
        let model = fit_random_forest(x, y, hp, n_trees, seed)?;
        let oob = model.oob_error.unwrap_or(f64::INFINITY);
        Ok(GridSearchRow { params: *hp, oob })
    })?;

    let mut best_idx = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.oob < rows[best_idx].oob {
            best_idx = i;
        }
    }
    if rows[best_idx].oob.is_infinite() {
        return Err(CanopyError::NoOobRows);
    }
    Ok(GridSearchResult {
        best: rows[best_idx].params,
        best_oob: rows[best_idx].oob,
        table: rows,
    })
}
