//! The full trainable model: input projection, unrolled message-passing
//! stack, node classifier, pairwise fusion, relationship classifier and the
//! (trainable) frequency-bias table, assembled into one scalar loss on a
//! tape.
//!
//! Raw union features share the node input projection, so `u_ij` lives in
//! the same learned space as the refined node features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::{
    partition_groups, FrequencyBias, FusionLeaves, FusionParams, GroupPartition, GroupingVariant,
    PairMeta,
};
use crate::diversity::{fuse_node, l21_node};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::mp::{node_logits, run_stack, MpConfig, MpLeaves, MpParams, MpStack};
use crate::synth::SceneGraphSample;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of the learned feature space (`d`).
    pub feature_dim: usize,
    /// Width of raw node/union features.
    pub raw_dim: usize,
    pub num_objects: usize,
    pub num_relations: usize,
}

/// Names and order of the parameter blocks; gradients, momentum buffers and
/// checkpoints all follow this order.
pub const BLOCK_NAMES: [&str; 7] = [
    "attn",
    "input_proj",
    "classifier",
    "w_x",
    "w_y",
    "w_r",
    "bias",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub mp: MpParams,
    pub fusion: FusionParams,
    pub bias: FrequencyBias,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> DenseMatrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

impl ModelParams {
    /// Fresh parameters with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights
    /// and a uniform frequency prior.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let d = dims.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            dims,
            mp: MpParams {
                attn: uniform_init(&mut rng, 3 * d, 1, 3 * d),
                classifier: uniform_init(&mut rng, dims.num_objects, d, d),
                input_proj: uniform_init(&mut rng, dims.raw_dim, d, dims.raw_dim),
            },
            fusion: FusionParams {
                w_x: uniform_init(&mut rng, d, d, d),
                w_y: uniform_init(&mut rng, d, d, d),
                w_r: uniform_init(&mut rng, dims.num_relations, d, d),
            },
            bias: FrequencyBias::from_observations(
                dims.num_objects,
                dims.num_relations,
                Vec::new(),
            )?,
        })
    }

    /// Rebuild the frequency prior from the visible relation labels of the
    /// given scenes (every ordered candidate pair counts, background too).
    pub fn fit_bias(&mut self, scenes: &[SceneGraphSample]) -> Result<()> {
        let mut obs = Vec::new();
        for scene in scenes {
            let n = scene.num_nodes();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        obs.push((
                            scene.object_labels[i],
                            scene.object_labels[j],
                            scene.rel_labels[i * n + j],
                        ));
                    }
                }
            }
        }
        self.bias =
            FrequencyBias::from_observations(self.dims.num_objects, self.dims.num_relations, obs)?;
        Ok(())
    }

    pub fn blocks(&self) -> [&DenseMatrix; 7] {
        [
            &self.mp.attn,
            &self.mp.input_proj,
            &self.mp.classifier,
            &self.fusion.w_x,
            &self.fusion.w_y,
            &self.fusion.w_r,
            &self.bias.table,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut DenseMatrix; 7] {
        [
            &mut self.mp.attn,
            &mut self.mp.input_proj,
            &mut self.mp.classifier,
            &mut self.fusion.w_x,
            &mut self.fusion.w_y,
            &mut self.fusion.w_r,
            &mut self.bias.table,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> ModelLeaves {
        let mp = self.mp.register(tape);
        let fusion = self.fusion.register(tape);
        let bias = tape.leaf(self.bias.table.clone());
        ModelLeaves { mp, fusion, bias }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelLeaves {
    pub mp: MpLeaves,
    pub fusion: FusionLeaves,
    pub bias: NodeId,
}

impl ModelLeaves {
    /// Leaf handles in [`BLOCK_NAMES`] order.
    pub fn ordered(&self) -> [NodeId; 7] {
        [
            self.mp.attn,
            self.mp.input_proj,
            self.mp.classifier,
            self.fusion.w_x,
            self.fusion.w_y,
            self.fusion.w_r,
            self.bias,
        ]
    }
}

/// Relationship head of one scene's forward pass.
#[derive(Debug, Clone)]
pub struct RelForward {
    pub pairs: Vec<(usize, usize)>,
    /// Categories used for the bias lookup and grouping (ground truth while
    /// training, protocol-dependent at evaluation).
    pub bias_cats: Vec<(usize, usize)>,
    pub logits: NodeId,
}

/// One scene's forward pass.
#[derive(Debug, Clone)]
pub struct SceneForward {
    pub stack: MpStack,
    pub node_logits: NodeId,
    pub rel: Option<RelForward>,
}

/// Build the forward pass of a single scene. `pairs` selects the ordered node
/// pairs to score (empty means no relationship head); `bias_cats` must give
/// the category pair used for the frequency lookup of each scored pair.
pub fn scene_forward(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    scene: &SceneGraphSample,
    config: &MpConfig,
    pairs: &[(usize, usize)],
    bias_cats: &[(usize, usize)],
    frozen_reweights: Option<&[DenseMatrix]>,
    bias: &FrequencyBias,
) -> Result<SceneForward> {
    if pairs.len() != bias_cats.len() {
        return Err(Error::Contract(format!(
            "{} pairs with {} bias category pairs",
            pairs.len(),
            bias_cats.len()
        )));
    }
    let stack = run_stack(
        tape,
        &scene.node_features,
        &scene.union_features,
        &leaves.mp,
        config,
        frozen_reweights,
    )?;
    let logits = node_logits(tape, stack.y_hat, leaves.mp.classifier)?;

    let rel = if pairs.is_empty() {
        None
    } else {
        let n = scene.num_nodes();
        let subject_rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let object_rows: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let union_rows: Vec<usize> = pairs.iter().map(|&(i, j)| i * n + j).collect();
        let subjects = tape.gather_rows(stack.y_hat, &subject_rows)?;
        let objects = tape.gather_rows(stack.y_hat, &object_rows)?;
        let unions = tape.gather_rows(stack.u_proj, &union_rows)?;
        let pair_feat = fuse_node(tape, subjects, objects, leaves.fusion.w_x, leaves.fusion.w_y)?;
        let fused = fuse_node(tape, pair_feat, unions, leaves.fusion.w_x, leaves.fusion.w_y)?;
        let w_r_t = tape.transpose(leaves.fusion.w_r);
        let raw = tape.matmul(fused, w_r_t)?;
        let bias_rows: Vec<usize> = bias_cats
            .iter()
            .map(|&(s, o)| bias.row_index(s, o))
            .collect::<Result<_>>()?;
        let prior = tape.gather_rows(leaves.bias, &bias_rows)?;
        let logits = tape.add(raw, prior)?;
        Some(RelForward {
            pairs: pairs.to_vec(),
            bias_cats: bias_cats.to_vec(),
            logits,
        })
    };

    Ok(SceneForward {
        stack,
        node_logits: logits,
        rel,
    })
}

fn one_hot(rows: usize, cols: usize, targets: &[usize]) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    for (i, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::Contract(format!("target {t} outside {cols} classes")));
        }
        m.set(i, t, 1.0);
    }
    Ok(m)
}

/// One scene plus the node pairs to score for it this step.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub scene: &'a SceneGraphSample,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub grouping: GroupingVariant,
    pub min_group_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            grouping: GroupingVariant::CategoryPairPruned,
            min_group_size: 3,
        }
    }
}

/// The assembled batch loss and everything needed to inspect it.
#[derive(Debug)]
pub struct BatchLoss {
    pub loss: NodeId,
    /// Concatenated row-stochastic relationship predictions, when any pair
    /// was scored.
    pub rel_probs: Option<NodeId>,
    pub rel_targets: Vec<usize>,
    pub pair_meta: Vec<PairMeta>,
    pub partition: GroupPartition,
    pub scenes: Vec<SceneForward>,
    pub batch_nodes: usize,
}

/// Build the total training loss of a batch on the tape:
/// node cross-entropy summed over all nodes divided by the node count, plus
/// mean relationship cross-entropy over all scored pairs, minus the grouped
/// l2,1 diversity bonus.
///
/// Training always looks bias and grouping categories up with ground-truth
/// object labels. `frozen_reweights`, when given, must hold one matrix per
/// layer per scene.
pub fn batch_loss(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    items: &[BatchItem<'_>],
    config: &MpConfig,
    loss_config: &LossConfig,
    bias: &FrequencyBias,
    frozen_reweights: Option<&[Vec<DenseMatrix>]>,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::Contract("batch_loss over an empty batch".into()));
    }

    let mut scenes = Vec::with_capacity(items.len());
    let mut node_ce_terms = Vec::new();
    let mut batch_nodes = 0;
    let mut rel_logit_nodes = Vec::new();
    let mut rel_targets = Vec::new();
    let mut pair_meta = Vec::new();

    for (scene_idx, item) in items.iter().enumerate() {
        let scene = item.scene;
        let n = scene.num_nodes();
        let bias_cats: Vec<(usize, usize)> = item
            .pairs
            .iter()
            .map(|&(i, j)| (scene.object_labels[i], scene.object_labels[j]))
            .collect();
        let frozen = frozen_reweights.map(|f| f[scene_idx].as_slice());
        let fwd = scene_forward(
            tape, leaves, scene, config, &item.pairs, &bias_cats, frozen, bias,
        )?;

        let log_probs = tape.row_log_softmax(fwd.node_logits);
        let targets = one_hot(n, bias.num_relations().max(1) * 0 + tape.value(fwd.node_logits).cols(), &scene.object_labels)?;
        let hot = tape.constant(targets);
        let picked = tape.hadamard(log_probs, hot)?;
        node_ce_terms.push(tape.sum_all(picked));
        batch_nodes += n;

        if let Some(rel) = &fwd.rel {
            for (&(i, j), &(s, o)) in rel.pairs.iter().zip(&rel.bias_cats) {
                rel_targets.push(scene.rel_labels[i * n + j]);
                pair_meta.push(PairMeta {
                    scene: scene_idx,
                    subject_cat: s,
                    object_cat: o,
                });
            }
            rel_logit_nodes.push(rel.logits);
        }
        scenes.push(fwd);
    }

    // (1 / n_b) * summed node cross-entropy
    let mut node_sum = node_ce_terms[0];
    for &t in &node_ce_terms[1..] {
        node_sum = tape.add(node_sum, t)?;
    }
    let mut loss = tape.scale(node_sum, -1.0 / batch_nodes as f64);

    let mut rel_probs = None;
    let mut partition = GroupPartition { groups: Vec::new() };
    if !rel_logit_nodes.is_empty() {
        let logits = if rel_logit_nodes.len() == 1 {
            rel_logit_nodes[0]
        } else {
            tape.concat_rows(&rel_logit_nodes)?
        };
        let total_pairs = rel_targets.len();
        let log_probs = tape.row_log_softmax(logits);
        let hot = one_hot(total_pairs, tape.value(logits).cols(), &rel_targets)?;
        let hot_node = tape.constant(hot);
        let picked = tape.hadamard(log_probs, hot_node)?;
        let ce_sum = tape.sum_all(picked);
        let rel_ce = tape.scale(ce_sum, -1.0 / total_pairs as f64);
        loss = tape.add(loss, rel_ce)?;

        let probs = tape.row_softmax(logits, None)?;
        partition = partition_groups(&pair_meta, loss_config.grouping, loss_config.min_group_size);
        if loss_config.tau > 0.0 && !partition.groups.is_empty() {
            let mut bonus: Option<NodeId> = None;
            for (_, members) in &partition.groups {
                let group_norm = l21_node(tape, probs, members)?;
                let scaled = tape.scale(group_norm, 1.0 / members.len() as f64);
                bonus = Some(match bonus {
                    Some(b) => tape.add(b, scaled)?,
                    None => scaled,
                });
            }
            let bonus = bonus.expect("at least one group");
            let neg = tape.scale(bonus, -loss_config.tau / partition.groups.len() as f64);
            loss = tape.add(loss, neg)?;
        }
        rel_probs = Some(probs);
    }

    Ok(BatchLoss {
        loss,
        rel_probs,
        rel_targets,
        pair_meta,
        partition,
        scenes,
    batch_nodes,
    })
}

/// Capture the per-layer reweighting matrices of every scene at the current
/// parameters, for finite-difference checks that must hold them fixed.
pub fn capture_reweights(
    items: &[BatchItem<'_>],
    params: &ModelParams,
    config: &MpConfig,
    loss_config: &LossConfig,
) -> Result<Vec<Vec<DenseMatrix>>> {
    let mut tape = Tape::new();
    let leaves = params.register(&mut tape);
    let built = batch_loss(
        &mut tape,
        &leaves,
        items,
        config,
        loss_config,
        &params.bias,
        None,
    )?;
    Ok(built
        .scenes
        .iter()
        .map(|s| s.stack.layers.iter().map(|l| l.reweight.clone()).collect())
        .collect())
}

/// Evaluate the batch loss as a plain number at the given parameters.
pub fn loss_value(
    items: &[BatchItem<'_>],
    params: &ModelParams,
    config: &MpConfig,
    loss_config: &LossConfig,
    frozen_reweights: Option<&[Vec<DenseMatrix>]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves = params.register(&mut tape);
    let built = batch_loss(
        &mut tape,
        &leaves,
        items,
        config,
        loss_config,
        &params.bias,
        frozen_reweights,
    )?;
    Ok(tape.value(built.loss).get(0, 0))
}
