//! Relationship scoring and the group-diversity regularizer.
//!
//! Pairs of refined node features are fused with the union feature, scored
//! against a relationship classifier plus a category-pair frequency prior,
//! and collected into a row-stochastic prediction matrix. The diversity bonus
//! rewards a large column-wise l2,1 norm per group of pairs sharing object
//! categories, which pushes hard predictions to spread over distinct
//! relation classes instead of collapsing onto the majority ones.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tape::{row_softmax_value, NodeId, Tape};

/// Fusion and relationship-classifier weights. `w_x`/`w_y` are shared by both
/// applications of the two-argument fusion; the three-way fusion is applied
/// left-associatively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_x: DenseMatrix,
    pub w_y: DenseMatrix,
    pub w_r: DenseMatrix,
}

/// Tape handles for [`FusionParams`].
#[derive(Debug, Clone, Copy)]
pub struct FusionLeaves {
    pub w_x: NodeId,
    pub w_y: NodeId,
    pub w_r: NodeId,
}

impl FusionParams {
    pub fn register(&self, tape: &mut Tape) -> FusionLeaves {
        FusionLeaves {
            w_x: tape.leaf(self.w_x.clone()),
            w_y: tape.leaf(self.w_y.clone()),
            w_r: tape.leaf(self.w_r.clone()),
        }
    }
}

/// Two-argument fusion applied row-wise to equally shaped inputs:
/// `ReLU(a W_x^T + b W_y^T) - (a W_x^T - b W_y^T) ** 2`.
pub fn fuse_rows(
    a: &DenseMatrix,
    b: &DenseMatrix,
    w_x: &DenseMatrix,
    w_y: &DenseMatrix,
) -> Result<DenseMatrix> {
    if a.shape() != b.shape() {
        return Err(Error::dims("fuse", a.shape(), b.shape()));
    }
    let ha = a.matmul(&w_x.transpose())?;
    let hb = b.matmul(&w_y.transpose())?;
    let sum = ha.add(&hb)?.map(|v| v.max(0.0));
    let diff = ha.sub(&hb)?;
    sum.sub(&diff.hadamard(&diff)?)
}

/// Single-row convenience form of [`fuse_rows`].
pub fn fuse(x: &DenseMatrix, y: &DenseMatrix, params: &FusionParams) -> Result<DenseMatrix> {
    fuse_rows(x, y, &params.w_x, &params.w_y)
}

/// Tape version of [`fuse_rows`].
pub fn fuse_node(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    w_x: NodeId,
    w_y: NodeId,
) -> Result<NodeId> {
    let wxt = tape.transpose(w_x);
    let wyt = tape.transpose(w_y);
    let ha = tape.matmul(a, wxt)?;
    let hb = tape.matmul(b, wyt)?;
    let sum = tape.add(ha, hb)?;
    let relu = tape.relu(sum);
    let diff = tape.sub(ha, hb)?;
    let sq = tape.hadamard(diff, diff)?;
    tape.sub(relu, sq)
}

/// Category-pair-conditional relationship prior: add-one smoothed
/// log-frequencies of each relation class given (subject, object) categories.
/// Stored dense as an `(O*O) x R` table so it can double as a trainable leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBias {
    num_objects: usize,
    num_relations: usize,
    pub table: DenseMatrix,
}

impl FrequencyBias {
    /// Build from observed `(subject category, object category, relation)`
    /// triples; every candidate pair of a scene should be fed, background
    /// (relation 0) included.
    pub fn from_observations<I>(num_objects: usize, num_relations: usize, obs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, usize)>,
    {
        let mut counts = vec![0u64; num_objects * num_objects * num_relations];
        for (s, o, r) in obs {
            if s >= num_objects || o >= num_objects {
                return Err(Error::UnknownCategory {
                    index: s.max(o),
                    bound: num_objects,
                });
            }
            if r >= num_relations {
                return Err(Error::UnknownCategory {
                    index: r,
                    bound: num_relations,
                });
            }
            counts[(s * num_objects + o) * num_relations + r] += 1;
        }
        let mut table = DenseMatrix::zeros(num_objects * num_objects, num_relations);
        for row in 0..num_objects * num_objects {
            let slice = &counts[row * num_relations..(row + 1) * num_relations];
            let total: u64 = slice.iter().sum();
            for (r, &c) in slice.iter().enumerate() {
                let p = (c as f64 + 1.0) / (total as f64 + num_relations as f64);
                table.set(row, r, p.ln());
            }
        }
        Ok(FrequencyBias {
            num_objects,
            num_relations,
            table,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn row_index(&self, subject_cat: usize, object_cat: usize) -> Result<usize> {
        if subject_cat >= self.num_objects || object_cat >= self.num_objects {
            return Err(Error::UnknownCategory {
                index: subject_cat.max(object_cat),
                bound: self.num_objects,
            });
        }
        Ok(subject_cat * self.num_objects + object_cat)
    }

    pub fn lookup(&self, subject_cat: usize, object_cat: usize) -> Result<&[f64]> {
        let row = self.row_index(subject_cat, object_cat)?;
        Ok(self.table.row(row))
    }
}

/// Row-stochastic relationship predictions for a set of node pairs, plus the
/// metadata needed to group and evaluate them.
#[derive(Debug, Clone)]
pub struct PredictionMatrix {
    pub probs: DenseMatrix,
    pub pair_index: Vec<(usize, usize)>,
    pub group_keys: Vec<(usize, usize)>,
}

/// Relationship scores for a set of pairs, computed with plain matrix values
/// (the trained path builds the same math on a tape).
///
/// The three-way fusion associates left: `(y_i * y_j) * u_ij`.
pub fn relationship_scores(
    y_hat: &DenseMatrix,
    u_proj: &DenseMatrix,
    pairs: &[(usize, usize)],
    pair_cats: &[(usize, usize)],
    fusion: &FusionParams,
    bias: &FrequencyBias,
) -> Result<PredictionMatrix> {
    if pairs.len() != pair_cats.len() {
        return Err(Error::Contract(format!(
            "{} pairs with {} category pairs",
            pairs.len(),
            pair_cats.len()
        )));
    }
    let n = y_hat.rows();
    let d = y_hat.cols();
    let gather = |rows: &dyn Fn(usize) -> usize| -> DenseMatrix {
        DenseMatrix::from_fn(pairs.len(), d, |k, c| y_hat.get(rows(k), c))
    };
    let subjects = gather(&|k| pairs[k].0);
    let objects = gather(&|k| pairs[k].1);
    let unions = DenseMatrix::from_fn(pairs.len(), d, |k, c| {
        u_proj.get(pairs[k].0 * n + pairs[k].1, c)
    });

    let pair_feat = fuse_rows(&subjects, &objects, &fusion.w_x, &fusion.w_y)?;
    let fused = fuse_rows(&pair_feat, &unions, &fusion.w_x, &fusion.w_y)?;
    let mut logits = fused.matmul(&fusion.w_r.transpose())?;
    for (k, &(s, o)) in pair_cats.iter().enumerate() {
        let prior = bias.lookup(s, o)?;
        for r in 0..bias.num_relations {
            logits.set(k, r, logits.get(k, r) + prior[r]);
        }
    }
    Ok(PredictionMatrix {
        probs: row_softmax_value(&logits, None)?,
        pair_index: pairs.to_vec(),
        group_keys: pair_cats.to_vec(),
    })
}

/// Column-wise l2,1 norm: the sum over columns of each column's l2 norm.
pub fn l21_norm(p: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for j in 0..p.cols() {
        let mut sq = 0.0;
        for i in 0..p.rows() {
            let v = p.get(i, j);
            sq += v * v;
        }
        total += sq.sqrt();
    }
    total
}

/// Tape version of [`l21_norm`] over a row block of `probs`.
pub fn l21_node(tape: &mut Tape, probs: NodeId, rows: &[usize]) -> Result<NodeId> {
    let block = tape.gather_rows(probs, rows)?;
    let sq = tape.hadamard(block, block)?;
    let col_sums = tape.sum_cols(sq);
    let col_norms = tape.sqrt(col_sums);
    Ok(tape.sum_all(col_norms))
}

/// How prediction rows are grouped for the diversity bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingVariant {
    /// One group per scene.
    PerScene,
    /// Batch-wide groups keyed by (subject category, object category).
    CategoryPair,
    /// As `CategoryPair`, dropping groups below the minimum size.
    CategoryPairPruned,
}

impl GroupingVariant {
    pub fn name(self) -> &'static str {
        match self {
            GroupingVariant::PerScene => "scene",
            GroupingVariant::CategoryPair => "category",
            GroupingVariant::CategoryPairPruned => "category-pruned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(GroupingVariant::PerScene),
            "category" => Ok(GroupingVariant::CategoryPair),
            "category-pruned" => Ok(GroupingVariant::CategoryPairPruned),
            other => Err(Error::InvalidParam(format!("unknown grouping '{other}'"))),
        }
    }
}

/// Metadata of one scored pair, used for grouping.
#[derive(Debug, Clone, Copy)]
pub struct PairMeta {
    pub scene: usize,
    pub subject_cat: usize,
    pub object_cat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKey {
    Scene(usize),
    Cats(usize, usize),
}

/// Disjoint groups of row indices. Rows in dropped (too-small) groups are
/// excluded from the diversity bonus only; classification losses keep them.
#[derive(Debug, Clone)]
pub struct GroupPartition {
    pub groups: Vec<(GroupKey, Vec<usize>)>,
}

pub fn partition_groups(
    rows: &[PairMeta],
    variant: GroupingVariant,
    min_group_size: usize,
) -> GroupPartition {
    let mut map: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (idx, meta) in rows.iter().enumerate() {
        let key = match variant {
            GroupingVariant::PerScene => GroupKey::Scene(meta.scene),
            GroupingVariant::CategoryPair | GroupingVariant::CategoryPairPruned => {
                GroupKey::Cats(meta.subject_cat, meta.object_cat)
            }
        };
        map.entry(key).or_default().push(idx);
    }
    let groups = map
        .into_iter()
        .filter(|(_, members)| {
            variant != GroupingVariant::CategoryPairPruned || members.len() >= min_group_size
        })
        .collect();
    GroupPartition { groups }
}

/// Relationship loss over one batch of scored pairs: mean cross-entropy over
/// all rows minus `tau / B` times the group-averaged, size-normalized l2,1
/// bonus. `probs` rows must be row-stochastic.
pub fn diversity_loss(
    probs: &DenseMatrix,
    targets: &[usize],
    partition: &GroupPartition,
    tau: f64,
) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::Contract("diversity_loss over an empty batch".into()));
    }
    if targets.len() != probs.rows() {
        return Err(Error::Contract(format!(
            "{} targets for {} prediction rows",
            targets.len(),
            probs.rows()
        )));
    }
    if tau < 0.0 {
        return Err(Error::InvalidParam(format!("tau must be nonnegative, got {tau}")));
    }
    let mut ce = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        ce -= probs.get(i, t).ln();
    }
    ce /= probs.rows() as f64;

    let mut bonus = 0.0;
    if tau > 0.0 && !partition.groups.is_empty() {
        for (_, members) in &partition.groups {
            let block =
                DenseMatrix::from_fn(members.len(), probs.cols(), |i, j| probs.get(members[i], j));
            bonus += l21_norm(&block) / members.len() as f64;
        }
        bonus *= tau / partition.groups.len() as f64;
    }
    Ok(ce - bonus)
}

/// Total training loss: node cross-entropy summed over the batch divided by
/// the node count, plus the relationship loss.
pub fn total_loss(
    node_logits: &DenseMatrix,
    node_targets: &[usize],
    rel_loss: f64,
    batch_nodes: usize,
) -> Result<f64> {
    if batch_nodes == 0 {
        return Err(Error::Contract("total_loss over zero nodes".into()));
    }
    if node_targets.len() != node_logits.rows() {
        return Err(Error::Contract(format!(
            "{} targets for {} logit rows",
            node_targets.len(),
            node_logits.rows()
        )));
    }
    let mut ce = 0.0;
    for (i, &t) in node_targets.iter().enumerate() {
        let row = node_logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
        ce -= node_logits.get(i, t) - lse;
    }
    Ok(ce / batch_nodes as f64 + rel_loss)
}

/// Row-wise argmax labels for objects and relationships; ties break to the
/// lowest index.
pub fn infer(node_probs: &DenseMatrix, rel_probs: &DenseMatrix) -> (Vec<usize>, Vec<usize>) {
    let objects = (0..node_probs.rows()).map(|i| node_probs.argmax_row(i)).collect();
    let relations = (0..rel_probs.rows()).map(|i| rel_probs.argmax_row(i)).collect();
    (objects, relations)
}
