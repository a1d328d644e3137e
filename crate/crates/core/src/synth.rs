//! Synthetic scene-graph benchmark generator.
//!
//! Scenes are built around two planted failure modes:
//!
//! * **Spurious proximity affinities.** Same-category nodes cluster around a
//!   shared spatial anchor, so the proximity channel of the union feature is
//!   an easy, learnable cue for useful message passing. A configurable
//!   fraction of cross-category pairs gets that channel inflated as if the
//!   boxes overlapped, planting exactly the edges a distance-based
//!   reweighting should suppress.
//! * **Long-tailed, partially annotated relations.** Relation classes follow
//!   a Zipf law. Each relatable category pair samples from that law with its
//!   own primary and secondary class boosted (primaries are spread over pairs
//!   by largest-remainder quota), so pairs have learnable preferences while
//!   the realized marginal keeps the strictly decreasing Zipf shape. A seeded
//!   fraction of true relation labels is hidden from the training labels and
//!   kept in `rel_labels_full` for oracle evaluation.
//!
//! Generation is fully determined by the config seed: every scene derives
//! its own stream, and structure, relations, spurious flags and annotation
//! drops use decoupled streams so that, for example, changing the drop rate
//! never perturbs the features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;
const DATASET_KIND: &str = "scene-dataset";

// How strongly a category pair's preferred classes are boosted over the
// global Zipf weights when sampling its relation labels.
const PRIMARY_TILT: f64 = 4.0;
const SECONDARY_TILT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Object categories (no background class at desk scale).
    pub num_object_cats: usize,
    /// Relationship categories; index 0 is "no relationship".
    pub num_rel_cats: usize,
    /// Inclusive range of nodes per scene.
    pub nodes_per_scene: (usize, usize),
    /// Appearance feature dimensionality; raw node features append the
    /// detector-confidence block and a 4-dim box proxy.
    pub feature_dim: usize,
    /// Distance from the origin to each category center.
    pub cluster_separation: f64,
    /// Fraction of cross-category pairs whose proximity channel is inflated.
    pub spurious_pair_rate: f64,
    /// Zipf exponent of the relation-class frequencies.
    pub tail_exponent: f64,
    /// Fraction of true relations hidden from the training labels.
    pub annotation_drop_rate: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Fraction of nodes drawn with the heavy noise level.
    pub degrade_rate: f64,
    /// Appearance noise of degraded / clean nodes.
    pub degrade_sigma: f64,
    pub clean_sigma: f64,
    /// Fraction of ordered category pairs that can hold a relation.
    pub relatable_rate: f64,
    /// Probability that a node pair of a relatable category pair relates.
    pub relation_rate: f64,
    /// Amplitude of the proximity channel in union features.
    pub proximity_gain: f64,
    /// Amplitude of the per-class relation signature in union features.
    pub rel_signal_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_object_cats: 6,
            num_rel_cats: 10,
            nodes_per_scene: (4, 7),
            feature_dim: 12,
            cluster_separation: 6.0,
            spurious_pair_rate: 0.3,
            tail_exponent: 1.5,
            annotation_drop_rate: 0.3,
            seed: 7,
            train_scenes: 64,
            val_scenes: 16,
            test_scenes: 32,
            degrade_rate: 0.35,
            degrade_sigma: 3.0,
            clean_sigma: 0.3,
            relatable_rate: 0.35,
            relation_rate: 0.5,
            proximity_gain: 3.0,
            rel_signal_gain: 1.5,
        }
    }
}

impl SynthConfig {
    /// Raw node-feature width: appearance + confidence block + box proxy.
    pub fn raw_dim(&self) -> usize {
        self.feature_dim + self.num_object_cats + 4
    }

    pub fn validate(&self) -> Result<()> {
        let rate_fields = [
            ("spurious_pair_rate", self.spurious_pair_rate),
            ("annotation_drop_rate", self.annotation_drop_rate),
            ("degrade_rate", self.degrade_rate),
            ("relatable_rate", self.relatable_rate),
            ("relation_rate", self.relation_rate),
        ];
        for (name, v) in rate_fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParam(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.num_object_cats < 2 {
            return Err(Error::InvalidParam("num_object_cats must be at least 2".into()));
        }
        if self.num_rel_cats < 2 {
            return Err(Error::InvalidParam("num_rel_cats must be at least 2".into()));
        }
        if self.nodes_per_scene.0 == 0 || self.nodes_per_scene.0 > self.nodes_per_scene.1 {
            return Err(Error::InvalidParam(format!(
                "nodes_per_scene range ({}, {}) is invalid",
                self.nodes_per_scene.0, self.nodes_per_scene.1
            )));
        }
        if self.feature_dim < self.num_object_cats {
            return Err(Error::InvalidParam(
                "feature_dim must be at least num_object_cats so category centers can be orthogonal"
                    .into(),
            ));
        }
        if !(self.tail_exponent > 0.0) {
            return Err(Error::InvalidParam("tail_exponent must be positive".into()));
        }
        for (name, v) in [
            ("cluster_separation", self.cluster_separation),
            ("degrade_sigma", self.degrade_sigma),
            ("clean_sigma", self.clean_sigma),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One synthetic "image".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphSample {
    pub scene_id: usize,
    /// `n x raw_dim` raw node features.
    pub node_features: DenseMatrix,
    /// `n*n x raw_dim` union features, row `i*n + j` for the ordered pair
    /// `(i, j)`; diagonal rows are zero.
    pub union_features: DenseMatrix,
    pub object_labels: Vec<usize>,
    /// Training relation labels (`n*n`, 0 = none); a seeded subset of the
    /// true relations is hidden here.
    pub rel_labels: Vec<usize>,
    /// Pre-drop ground truth, used only by evaluation.
    pub rel_labels_full: Vec<usize>,
}

impl SceneGraphSample {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn pair_index(&self, subject: usize, object: usize) -> usize {
        subject * self.num_nodes() + object
    }

    /// Ordered node pairs `(i, j)`, `i != j`.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut pairs = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<SceneGraphSample>,
    pub val: Vec<SceneGraphSample>,
    pub test: Vec<SceneGraphSample>,
}

impl Dataset {
    pub fn triplet_counts(&self) -> (usize, usize) {
        let mut full = 0;
        let mut visible = 0;
        for scene in self.train.iter().chain(&self.val).chain(&self.test) {
            full += scene.rel_labels_full.iter().filter(|&&r| r > 0).count();
            visible += scene.rel_labels.iter().filter(|&&r| r > 0).count();
        }
        (full, visible)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ t))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The dataset-wide structures every scene is drawn against. Rebuilding them
/// from the same config is deterministic, so oracle tests can recover the
/// generating distribution.
#[derive(Debug, Clone)]
pub struct GenTables {
    /// Orthonormal category directions scaled by the separation.
    pub centers: Vec<Vec<f64>>,
    /// Unit signature direction per relation class (index 0 zero).
    pub rel_dirs: Vec<Vec<f64>>,
    /// Ordered category pairs that may hold a relation.
    pub relatable: Vec<bool>,
    /// Primary / secondary relation class per ordered category pair.
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
    /// Normalized Zipf weights over classes `1..R`.
    pub class_weights: Vec<f64>,
    /// Per ordered category pair, the cumulative conditional distribution
    /// over classes `1..R` (empty for non-relatable pairs).
    pair_class_cdf: Vec<Vec<f64>>,
}

impl GenTables {
    pub fn build(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let o = config.num_object_cats;
        let r = config.num_rel_cats;
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xA11CE]));

        // Gram-Schmidt over gaussian draws: exactly orthonormal directions.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(o);
        for _ in 0..o {
            loop {
                let mut v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                for prev in &centers {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    let scale = dot / config.cluster_separation.powi(2);
                    for (vc, pc) in v.iter_mut().zip(prev) {
                        *vc -= scale * pc;
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    let k = config.cluster_separation / norm;
                    centers.push(v.into_iter().map(|x| x * k).collect());
                    break;
                }
            }
        }

        let mut rel_dirs = vec![vec![0.0; d]];
        for _ in 1..r {
            let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rel_dirs.push(v.into_iter().map(|x| x / norm).collect());
        }

        let relatable: Vec<bool> = (0..o * o)
            .map(|k| {
                let (a, b) = (k / o, k % o);
                a != b && rng.random::<f64>() < config.relatable_rate
            })
            .collect();

        let mut class_weights: Vec<f64> =
            (1..r).map(|c| (c as f64).powf(-config.tail_exponent)).collect();
        let total: f64 = class_weights.iter().sum();
        for w in &mut class_weights {
            *w /= total;
        }

        // Quota assignment of primary/secondary classes over the relatable
        // pairs keeps the realized class marginal on the Zipf curve instead
        // of the lumpy result of independent draws.
        let relatable_idx: Vec<usize> =
            (0..o * o).filter(|&k| relatable[k]).collect();
        let primary_pool = quota_multiset(&class_weights, relatable_idx.len());
        let secondary_pool = quota_multiset(&class_weights, relatable_idx.len());
        let mut primary = vec![0usize; o * o];
        let mut secondary = vec![0usize; o * o];
        let mut order: Vec<usize> = (0..relatable_idx.len()).collect();
        shuffle(&mut order, &mut rng);
        for (slot, &which) in order.iter().enumerate() {
            primary[relatable_idx[which]] = primary_pool[slot];
        }
        shuffle(&mut order, &mut rng);
        for (slot, &which) in order.iter().enumerate() {
            let mut s = secondary_pool[slot];
            if s == primary[relatable_idx[which]] {
                // nudge to the next class so secondary differs when possible
                s = if s == r - 1 { 1.max(s - 1) } else { s + 1 };
            }
            secondary[relatable_idx[which]] = s;
        }

        let pair_class_cdf: Vec<Vec<f64>> = (0..o * o)
            .map(|k| {
                if !relatable[k] {
                    return Vec::new();
                }
                let mut weights: Vec<f64> = class_weights
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let class = i + 1;
                        let tilt = if class == primary[k] {
                            1.0 + PRIMARY_TILT
                        } else if class == secondary[k] {
                            1.0 + SECONDARY_TILT
                        } else {
                            1.0
                        };
                        w * tilt
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                for w in &mut weights {
                    acc += *w / total;
                    *w = acc;
                }
                weights
            })
            .collect();

        Ok(GenTables {
            centers,
            rel_dirs,
            relatable,
            primary,
            secondary,
            class_weights,
            pair_class_cdf,
        })
    }

    /// Sample a relation class for an ordered category pair.
    fn draw_relation(&self, pair_key: usize, rng: &mut ChaCha8Rng) -> usize {
        let cdf = &self.pair_class_cdf[pair_key];
        let u: f64 = rng.random();
        for (i, &acc) in cdf.iter().enumerate() {
            if u < acc {
                return i + 1;
            }
        }
        cdf.len()
    }
}

/// Class counts proportional to `weights` summing to `slots` (largest
/// remainder), flattened to a multiset of 1-based class labels.
fn quota_multiset(weights: &[f64], slots: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * slots as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w * slots as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..slots - assigned {
        counts[remainders[k % remainders.len()].1] += 1;
    }
    let mut pool = Vec::with_capacity(slots);
    for (i, &c) in counts.iter().enumerate() {
        pool.extend(std::iter::repeat(i + 1).take(c));
    }
    pool
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Generate the train/val/test splits for `config`; fully deterministic.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let tables = GenTables::build(config)?;
    let mut next_id = 0;
    let mut make_split = |tag: u64, count: usize| -> Vec<SceneGraphSample> {
        (0..count)
            .map(|idx| {
                let scene = generate_scene(config, &tables, tag, idx as u64, next_id);
                next_id += 1;
                scene
            })
            .collect()
    };
    let train = make_split(0, config.train_scenes);
    let val = make_split(1, config.val_scenes);
    let test = make_split(2, config.test_scenes);
    Ok(Dataset {
        config: config.clone(),
        train,
        val,
        test,
    })
}

fn generate_scene(
    config: &SynthConfig,
    tables: &GenTables,
    split_tag: u64,
    index: u64,
    scene_id: usize,
) -> SceneGraphSample {
    let o = config.num_object_cats;
    let d = config.feature_dim;
    let raw = config.raw_dim();
    // decoupled streams: structure / relations / spurious flags / drops
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, split_tag, index]));
    let mut rng_rel = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, split_tag, index]));
    let mut rng_spur = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3, split_tag, index]));
    let mut rng_drop = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[4, split_tag, index]));

    let n = rng.random_range(config.nodes_per_scene.0..=config.nodes_per_scene.1);

    // a small per-scene palette so categories repeat within the scene
    let palette_size = 3.min(o);
    let mut cats_all: Vec<usize> = (0..o).collect();
    shuffle(&mut cats_all, &mut rng);
    let palette = &cats_all[..palette_size];
    let anchors: Vec<(f64, f64)> = palette
        .iter()
        .map(|_| (0.15 + 0.7 * rng.random::<f64>(), 0.15 + 0.7 * rng.random::<f64>()))
        .collect();

    let mut object_labels = Vec::with_capacity(n);
    let mut appearance = vec![vec![0.0; d]; n];
    let mut boxes = Vec::with_capacity(n);
    let mut node_features = DenseMatrix::zeros(n, raw);
    for i in 0..n {
        let pick = rng.random_range(0..palette_size);
        let cat = palette[pick];
        object_labels.push(cat);
        let sigma = if rng.random::<f64>() < config.degrade_rate {
            config.degrade_sigma
        } else {
            config.clean_sigma
        };
        for c in 0..d {
            appearance[i][c] = tables.centers[cat][c] + sigma * standard_normal(&mut rng);
            node_features.set(i, c, appearance[i][c]);
        }
        // noisy detector guess feeding the confidence block
        let guess = if rng.random::<f64>() < 0.65 {
            cat
        } else {
            let other = rng.random_range(0..o - 1);
            if other >= cat {
                other + 1
            } else {
                other
            }
        };
        for c in 0..o {
            let v = if c == guess { 0.6 } else { 0.0 };
            node_features.set(i, d + c, v + 0.05 * standard_normal(&mut rng));
        }
        let (ax, ay) = anchors[pick];
        let cx = ax + 0.08 * (rng.random::<f64>() - 0.5);
        let cy = ay + 0.08 * (rng.random::<f64>() - 0.5);
        let w = 0.05 + 0.15 * rng.random::<f64>();
        let h = 0.05 + 0.15 * rng.random::<f64>();
        boxes.push((cx, cy));
        node_features.set(i, d + o, cx);
        node_features.set(i, d + o + 1, cy);
        node_features.set(i, d + o + 2, w);
        node_features.set(i, d + o + 3, h);
    }

    // relation labels over ordered pairs
    let mut rel_full = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let key = object_labels[i] * o + object_labels[j];
            if tables.relatable[key] && rng_rel.random::<f64>() < config.relation_rate {
                rel_full[i * n + j] = tables.draw_relation(key, &mut rng_rel);
            }
        }
    }

    // spurious flags per unordered cross-category pair
    let mut spurious = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if object_labels[i] != object_labels[j]
                && rng_spur.random::<f64>() < config.spurious_pair_rate
            {
                spurious[i * n + j] = true;
                spurious[j * n + i] = true;
            }
        }
    }

    let mut union_features = DenseMatrix::zeros(n * n, raw);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let row = i * n + j;
            let rel = rel_full[row];
            for c in 0..d {
                let mut v = 0.5 * (appearance[i][c] + appearance[j][c])
                    + 0.1 * standard_normal(&mut rng);
                v += config.rel_signal_gain * tables.rel_dirs[rel][c];
                union_features.set(row, c, v);
            }
            for c in 0..o {
                let v = 0.5 * (node_features.get(i, d + c) + node_features.get(j, d + c));
                union_features.set(row, d + c, v);
            }
            let dx = (boxes[i].0 - boxes[j].0).abs();
            let dy = (boxes[i].1 - boxes[j].1).abs();
            let dist = if spurious[row] {
                0.03 * rng.random::<f64>()
            } else {
                (dx * dx + dy * dy).sqrt()
            };
            let prox = config.proximity_gain * (-dist / 0.15).exp();
            union_features.set(row, d + o, prox);
            union_features.set(row, d + o + 1, dist);
            union_features.set(row, d + o + 2, dx);
            union_features.set(row, d + o + 3, dy);
        }
    }

    let rel_labels = rel_full
        .iter()
        .map(|&r| {
            if r > 0 && rng_drop.random::<f64>() < config.annotation_drop_rate {
                0
            } else {
                r
            }
        })
        .collect();

    SceneGraphSample {
        scene_id,
        node_features,
        union_features,
        object_labels,
        rel_labels,
        rel_labels_full: rel_full,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    kind: String,
    config: SynthConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneLine {
    split: String,
    scene: SceneGraphSample,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a dataset as line-delimited JSON: a self-describing header line
/// followed by one scene per line.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: DATASET_KIND.to_string(),
        config: dataset.config.clone(),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(|e| Error::Contract(e.to_string()))?
    )
    .map_err(|e| io_err(path, e))?;
    for (split, scenes) in [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ] {
        for scene in scenes {
            let line = SceneLine {
                split: split.to_string(),
                scene: scene.clone(),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&line).map_err(|e| Error::Contract(e.to_string()))?
            )
            .map_err(|e| io_err(path, e))?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Load a dataset written by [`save`]; malformed lines are reported with
/// their 1-based line number.
pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.kind != DATASET_KIND {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected kind '{}'", header.kind),
        });
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            ),
        });
    }
    let mut dataset = Dataset {
        config: header.config,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match parsed.split.as_str() {
            "train" => dataset.train.push(parsed.scene),
            "val" => dataset.val.push(parsed.scene),
            "test" => dataset.test.push(parsed.scene),
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown split '{other}'"),
                })
            }
        }
    }
    Ok(dataset)
}
