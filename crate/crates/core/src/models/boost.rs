//! Functional-gradient boosting with depth-limited regression trees.
//!
//! Each stage fits a tree to the negative gradient by squared error, then
//! replaces every leaf value by the loss-specific line-search optimum on the
//! leaf's residuals (mean for squared loss, the tau-quantile for pinball
//! loss), shrunk by the learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbqrConfig {
    pub n_stages: usize,
    pub learning_rate: f64,
    /// 0 means every tree is a single root leaf.
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbqrConfig {
    fn default() -> Self {
        GbqrConfig {
            n_stages: 500,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 5,
        }
    }
}

impl GbqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::InvalidParameter("n_stages must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate = {} not in (0, 1]",
                self.learning_rate
            )));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParameter("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Squared,
    Pinball(f64),
}

impl Loss {
    pub fn value(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (y - f) * (y - f),
            Loss::Pinball(tau) => pinball(tau, y - f),
        }
    }

    fn negative_gradient(self, y: f64, f: f64) -> f64 {
        match self {
            Loss::Squared => y - f,
            Loss::Pinball(tau) => {
                if y > f {
                    tau
                } else {
                    tau - 1.0
                }
            }
        }
    }

    /// Minimizer of the summed loss over a constant shift of the residuals.
    fn line_search(self, residuals: &mut [f64]) -> f64 {
        match self {
            Loss::Squared => residuals.iter().sum::<f64>() / residuals.len() as f64,
            Loss::Pinball(tau) => empirical_quantile(residuals, tau),
        }
    }
}

pub fn pinball(tau: f64, residual: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

/// Lower empirical tau-quantile: the `ceil(tau n)`-th order statistic
/// (clamped to `1..=n`). Reorders `values`.
pub fn empirical_quantile(values: &mut [f64], tau: f64) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let k = ((tau * n as f64).ceil() as usize).clamp(1, n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostedTrees {
    init: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
    loss: Loss,
}

/// Column-major feature matrix with per-feature sort orders.
struct Columns {
    cols: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
}

impl Columns {
    fn new(xs: &[&[f64]]) -> Self {
        let d = xs[0].len();
        let cols: Vec<Vec<f64>> = (0..d).map(|j| xs.iter().map(|x| x[j]).collect()).collect();
        let order = cols
            .iter()
            .map(|c| {
                let mut o: Vec<u32> = (0..c.len() as u32).collect();
                o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                o
            })
            .collect();
        Columns { cols, order }
    }
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grow one tree level by level. Returns the tree and the leaf id per sample.
fn grow_tree(cols: &Columns, grad: &[f64], max_depth: usize, min_leaf: usize) -> (Vec<Node>, Vec<usize>) {
    const NONE: usize = usize::MAX;
    let n = grad.len();
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut node_of = vec![0usize; n];
    // frontier: node ids open for splitting, indexed by slot
    let mut frontier: Vec<usize> = vec![0];
    for _ in 0..max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of = vec![NONE; nodes.len()];
        for (s, &id) in frontier.iter().enumerate() {
            slot_of[id] = s;
        }
        let k = frontier.len();
        let mut tot_n = vec![0usize; k];
        let mut tot_s = vec![0.0f64; k];
        for i in 0..n {
            let s = slot_of[node_of[i]];
            if s != NONE {
                tot_n[s] += 1;
                tot_s[s] += grad[i];
            }
        }
        let parent_score: Vec<f64> = (0..k)
            .map(|s| if tot_n[s] > 0 { tot_s[s] * tot_s[s] / tot_n[s] as f64 } else { 0.0 })
            .collect();
        let mut best: Vec<Option<Best>> = vec![None; k];
        let mut cnt = vec![0usize; k];
        let mut sum = vec![0.0f64; k];
        let mut prev = vec![f64::NAN; k];
        for (j, order) in cols.order.iter().enumerate() {
            let col = &cols.cols[j];
            cnt.fill(0);
            sum.fill(0.0);
            prev.fill(f64::NAN);
            for &i in order {
                let i = i as usize;
                let s = slot_of[node_of[i]];
                if s == NONE {
                    continue;
                }
                let v = col[i];
                let nl = cnt[s];
                if nl >= min_leaf && tot_n[s] - nl >= min_leaf && v > prev[s] {
                    let nr = tot_n[s] - nl;
                    let sr = tot_s[s] - sum[s];
                    let gain = sum[s] * sum[s] / nl as f64 + sr * sr / nr as f64 - parent_score[s];
                    if gain > 1e-12 && best[s].is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Best {
                            gain,
                            feature: j,
                            threshold: 0.5 * (prev[s] + v),
                        });
                    }
                }
                cnt[s] += 1;
                sum[s] += grad[i];
                prev[s] = v;
            }
        }
        let mut next = Vec::new();
        let mut children: Vec<Option<(usize, usize, Best)>> = vec![None; k];
        for s in 0..k {
            if let Some(b) = best[s] {
                let left = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                nodes[frontier[s]] = Node::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left,
                    right: left + 1,
                };
                children[s] = Some((left, left + 1, b));
                next.push(left);
                next.push(left + 1);
            }
        }
        for i in 0..n {
            let s = slot_of[node_of[i]];
            if s == NONE {
                continue;
            }
            if let Some((l, r, b)) = children[s] {
                node_of[i] = if cols.cols[b.feature][i] <= b.threshold { l } else { r };
            }
        }
        frontier = next;
    }
    (nodes, node_of)
}

impl BoostedTrees {
    /// Fit on rows `xs` with targets `ys`. Returns the model and the training
    /// loss (mean) after the initial constant and after each stage.
    pub fn fit(xs: &[&[f64]], ys: &[f64], loss: Loss, cfg: &GbqrConfig) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        if xs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if let Loss::Pinball(tau) = loss {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::InvalidParameter(format!("quantile level {tau} not in (0, 1)")));
            }
        }
        let n = ys.len();
        let init = loss.line_search(&mut ys.to_vec());
        let mut f = vec![init; n];
        let mean_loss = |f: &[f64]| ys.iter().zip(f).map(|(&y, &p)| loss.value(y, p)).sum::<f64>() / n as f64;
        let mut trace = vec![mean_loss(&f)];
        let cols = Columns::new(xs);
        let mut trees = Vec::with_capacity(cfg.n_stages);
        let mut grad = vec![0.0; n];
        for _ in 0..cfg.n_stages {
            for i in 0..n {
                grad[i] = loss.negative_gradient(ys[i], f[i]);
            }
            let (mut nodes, node_of) = grow_tree(&cols, &grad, cfg.max_depth, cfg.min_leaf);
            let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
            for i in 0..n {
                residuals[node_of[i]].push(ys[i] - f[i]);
            }
            for (id, res) in residuals.iter_mut().enumerate() {
                if !res.is_empty() {
                    nodes[id] = Node::Leaf(cfg.learning_rate * loss.line_search(res));
                }
            }
            let tree = Tree { nodes };
            for i in 0..n {
                f[i] += match tree.nodes[node_of[i]] {
                    Node::Leaf(v) => v,
                    Node::Split { .. } => unreachable!("samples end in leaves"),
                };
            }
            trace.push(mean_loss(&f));
            trees.push(tree);
        }
        Ok((
            BoostedTrees {
                init,
                learning_rate: cfg.learning_rate,
                trees,
                loss,
            },
            trace,
        ))
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn n_stages(&self) -> usize {
        self.trees.len()
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }
}
