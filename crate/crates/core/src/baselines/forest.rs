//! Random-forest voxel classifier: CART trees with Gini impurity, random
//! feature subsets per split, trained on a balanced voxel sample.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::FeatureStack;
use crate::volgrid::LabelVolume;

/// How many feature channels each split may consider.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturesPerSplit {
    /// √(channel count), rounded, at least 1.
    Sqrt,
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: FeaturesPerSplit,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> ForestConfig {
        ForestConfig {
            n_trees: 50,
            max_depth: 12,
            min_samples_leaf: 5,
            features_per_split: FeaturesPerSplit::Sqrt,
            samples_per_class: 20_000,
            seed: 42,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 {
            return Err(Error::InvalidConfig(
                "forest needs n_trees >= 1 and max_depth >= 1".into(),
            ));
        }
        if self.min_samples_leaf == 0 || self.samples_per_class < self.min_samples_leaf {
            return Err(Error::InvalidConfig(
                "forest needs samples_per_class >= min_samples_leaf >= 1".into(),
            ));
        }
        Ok(())
    }

    fn features_for(&self, n_channels: usize) -> usize {
        match self.features_per_split {
            FeaturesPerSplit::Sqrt => ((n_channels as f64).sqrt().round() as usize).clamp(1, n_channels),
            FeaturesPerSplit::Fixed(k) => k.clamp(1, n_channels),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Split {
        channel: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        p_fiber: f32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, features: &[f32]) -> f32 {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf { p_fiber } => return p_fiber,
                Node::Split {
                    channel,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[channel as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedForest {
    pub trees: Vec<Tree>,
    pub channel_names: Vec<String>,
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

struct TrainData<'a> {
    features: &'a [f32], // row-major: sample × channel
    labels: &'a [u8],
    n_channels: usize,
}

/// Balanced, seeded voxel sampling followed by per-tree bootstrap CART.
pub fn train_forest(
    stack: &FeatureStack,
    labels: &LabelVolume,
    cfg: &ForestConfig,
) -> Result<TrainedForest> {
    cfg.validate()?;
    if stack.dims != labels.dims {
        return Err(Error::DimsMismatch {
            left: stack.dims,
            right: labels.dims,
        });
    }
    let mut class0: Vec<u32> = Vec::new();
    let mut class1: Vec<u32> = Vec::new();
    for (i, &l) in labels.data.iter().enumerate() {
        if l == 1 {
            class1.push(i as u32);
        } else {
            class0.push(i as u32);
        }
    }
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::Degenerate(
            "forest training needs both classes present".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_channels = stack.n_channels();
    let spc = cfg.samples_per_class;
    let mut features = vec![0.0f32; 2 * spc * n_channels];
    let mut sample_labels = vec![0u8; 2 * spc];
    for (k, (class, label)) in [(&class0, 0u8), (&class1, 1u8)].into_iter().enumerate() {
        for s in 0..spc {
            let voxel = class[rng.random_range(0..class.len())] as usize;
            let row = k * spc + s;
            stack.voxel_features(voxel, &mut features[row * n_channels..(row + 1) * n_channels]);
            sample_labels[row] = label;
        }
    }
    let tree_seeds: Vec<u64> = (0..cfg.n_trees).map(|_| rng.random()).collect();

    let data = TrainData {
        features: &features,
        labels: &sample_labels,
        n_channels,
    };
    let k_features = cfg.features_for(n_channels);
    let trees: Vec<Tree> = tree_seeds
        .par_iter()
        .map(|&seed| grow_tree(&data, cfg, k_features, seed))
        .collect();

    Ok(TrainedForest {
        trees,
        channel_names: stack.names.clone(),
        n_trees: cfg.n_trees,
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        features_per_split: k_features,
        samples_per_class: cfg.samples_per_class,
        seed: cfg.seed,
    })
}

fn grow_tree(data: &TrainData<'_>, cfg: &ForestConfig, k_features: usize, seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.labels.len();
    let bootstrap: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
    let mut tree = Tree { nodes: Vec::new() };
    split_node(data, cfg, k_features, &mut rng, &mut tree, bootstrap, 0);
    tree
}

/// Recursively grow one node from its sample rows; returns the node index.
fn split_node(
    data: &TrainData<'_>,
    cfg: &ForestConfig,
    k_features: usize,
    rng: &mut ChaCha8Rng,
    tree: &mut Tree,
    rows: Vec<u32>,
    depth: usize,
) -> u32 {
    let n = rows.len();
    let positives = rows.iter().filter(|&&r| data.labels[r as usize] == 1).count();
    let make_leaf = |tree: &mut Tree| {
        let idx = tree.nodes.len() as u32;
        tree.nodes.push(Node::Leaf {
            p_fiber: positives as f32 / n as f32,
        });
        idx
    };
    if depth >= cfg.max_depth
        || positives == 0
        || positives == n
        || n < 2 * cfg.min_samples_leaf
    {
        return make_leaf(tree);
    }

    // Candidate channels: a partial Fisher-Yates draw without replacement.
    let mut channels: Vec<u16> = (0..data.n_channels as u16).collect();
    for i in 0..k_features {
        let j = rng.random_range(i..channels.len());
        channels.swap(i, j);
    }
    channels.truncate(k_features);

    let parent_gini = gini(positives, n);
    let mut best: Option<(f64, u16, f32)> = None;
    let mut values: Vec<(f32, u8)> = Vec::with_capacity(n);
    for &channel in &channels {
        values.clear();
        values.extend(rows.iter().map(|&r| {
            let r = r as usize;
            (
                data.features[r * data.n_channels + channel as usize],
                data.labels[r],
            )
        }));
        values.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut left_n = 0usize;
        let mut left_pos = 0usize;
        for i in 0..n - 1 {
            left_n += 1;
            left_pos += values[i].1 as usize;
            if values[i].0 == values[i + 1].0 {
                continue;
            }
            if left_n < cfg.min_samples_leaf || n - left_n < cfg.min_samples_leaf {
                continue;
            }
            let right_n = n - left_n;
            let right_pos = positives - left_pos;
            let weighted = (left_n as f64 * gini(left_pos, left_n)
                + right_n as f64 * gini(right_pos, right_n))
                / n as f64;
            let gain = parent_gini - weighted;
            if gain > best.map_or(0.0, |(g, _, _)| g) {
                let a = values[i].0;
                let b = values[i + 1].0;
                let mut mid = a + (b - a) / 2.0;
                if !(mid >= a && mid < b) {
                    mid = a;
                }
                best = Some((gain, channel, mid));
            }
        }
    }

    let Some((_, channel, threshold)) = best else {
        return make_leaf(tree);
    };
    let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| {
        data.features[r as usize * data.n_channels + channel as usize] <= threshold
    });
    let idx = tree.nodes.len() as u32;
    tree.nodes.push(Node::Split {
        channel,
        threshold,
        left: 0,
        right: 0,
    });
    let left = split_node(data, cfg, k_features, rng, tree, left_rows, depth + 1);
    let right = split_node(data, cfg, k_features, rng, tree, right_rows, depth + 1);
    if let Node::Split {
        left: l, right: r, ..
    } = &mut tree.nodes[idx as usize]
    {
        *l = left;
        *r = right;
    }
    idx
}

#[inline]
fn gini(positives: usize, n: usize) -> f64 {
    let p = positives as f64 / n as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Average the per-tree fiber probabilities; a voxel is fiber iff the mean
/// probability exceeds ½ (an exact tie goes to background).
pub fn forest_predict(forest: &TrainedForest, stack: &FeatureStack) -> Result<LabelVolume> {
    if forest.channel_names != stack.names {
        return Err(Error::InvalidConfig(format!(
            "feature stack channels do not match the forest manifest ({} vs {} channels)",
            stack.names.len(),
            forest.channel_names.len()
        )));
    }
    let len = stack.dims.len();
    let n_channels = stack.n_channels();
    let inv = 1.0 / forest.trees.len() as f32;
    let mut labels = vec![0u8; len];
    labels
        .par_chunks_mut(4096)
        .enumerate()
        .for_each(|(chunk, out)| {
            let base = chunk * 4096;
            let mut feats = vec![0.0f32; n_channels];
            for (k, slot) in out.iter_mut().enumerate() {
                stack.voxel_features(base + k, &mut feats);
                let p: f32 = forest.trees.iter().map(|t| t.predict(&feats)).sum::<f32>() * inv;
                *slot = u8::from(p > 0.5);
            }
        });
    LabelVolume::new(stack.dims, 1.0, labels)
}

/// Text persistence: a config header, the channel manifest, then one line
/// per node. Floats print in shortest round-trip form, so reloading is
/// bit-exact.
pub fn save_forest(forest: &TrainedForest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(
            w,
            "FOREST1 n_trees={} max_depth={} min_samples_leaf={} features_per_split={} samples_per_class={} seed={}",
            forest.n_trees,
            forest.max_depth,
            forest.min_samples_leaf,
            forest.features_per_split,
            forest.samples_per_class,
            forest.seed,
        )?;
        writeln!(w, "channels {}", forest.channel_names.join(","))?;
        for (t, tree) in forest.trees.iter().enumerate() {
            for (i, node) in tree.nodes.iter().enumerate() {
                match node {
                    Node::Split {
                        channel,
                        threshold,
                        left,
                        right,
                    } => writeln!(w, "{t},{i},split,{channel},{threshold},{left},{right},0")?,
                    Node::Leaf { p_fiber } => writeln!(w, "{t},{i},leaf,0,0,0,0,{p_fiber}")?,
                }
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_forest(path: &Path) -> Result<TrainedForest> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty forest file"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("FOREST1") {
        return Err(Error::format(path, "missing FOREST1 magic"));
    }
    let mut kv = std::collections::HashMap::new();
    for field in fields {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header field `{field}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| Error::format(path, format!("missing header key {k}")))?
            .parse()
            .map_err(|_| Error::format(path, format!("bad header key {k}")))
    };

    let channels_line = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing channels line"))?;
    let channel_names: Vec<String> = channels_line
        .strip_prefix("channels ")
        .ok_or_else(|| Error::format(path, "bad channels line"))?
        .split(',')
        .map(str::to_string)
        .collect();

    let n_trees = get("n_trees")?;
    let mut trees = vec![Tree { nodes: Vec::new() }; n_trees];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::format(path, format!("bad node line `{line}`")));
        }
        let t: usize = parts[0]
            .parse()
            .map_err(|_| Error::format(path, "bad tree index"))?;
        let i: usize = parts[1]
            .parse()
            .map_err(|_| Error::format(path, "bad node index"))?;
        if t >= n_trees {
            return Err(Error::format(path, format!("tree index {t} out of range")));
        }
        if i != trees[t].nodes.len() {
            return Err(Error::format(path, format!("node {i} of tree {t} out of order")));
        }
        let node = match parts[2] {
            "split" => Node::Split {
                channel: parts[3].parse().map_err(|_| Error::format(path, "bad channel"))?,
                threshold: parts[4].parse().map_err(|_| Error::format(path, "bad threshold"))?,
                left: parts[5].parse().map_err(|_| Error::format(path, "bad left"))?,
                right: parts[6].parse().map_err(|_| Error::format(path, "bad right"))?,
            },
            "leaf" => Node::Leaf {
                p_fiber: parts[7].parse().map_err(|_| Error::format(path, "bad p_fiber"))?,
            },
            other => return Err(Error::format(path, format!("unknown node kind `{other}`"))),
        };
        trees[t].nodes.push(node);
    }
    for (t, tree) in trees.iter().enumerate() {
        if tree.nodes.is_empty() {
            return Err(Error::format(path, format!("tree {t} has no nodes")));
        }
        for node in &tree.nodes {
            if let Node::Split { left, right, .. } = node {
                if *left as usize >= tree.nodes.len() || *right as usize >= tree.nodes.len() {
                    return Err(Error::format(path, format!("tree {t} has a dangling child")));
                }
            }
        }
    }
    Ok(TrainedForest {
        trees,
        channel_names,
        n_trees,
        max_depth: get("max_depth")?,
        min_samples_leaf: get("min_samples_leaf")?,
        features_per_split: get("features_per_split")?,
        samples_per_class: get("samples_per_class")?,
        seed: get("seed")? as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A stack whose channel 2 equals the label (plus a deterministic
    /// sub-threshold wiggle); all other channels are noise.
    fn separable_stack(dims: Dims, seed: u64) -> (FeatureStack, LabelVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = dims.len();
        let labels: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let mut channels = Vec::new();
        for c in 0..4 {
            let data: Vec<f32> = (0..len)
                .map(|i| {
                    if c == 2 {
                        labels[i] as f32 + 0.1 * rng.random::<f32>()
                    } else {
                        rng.random::<f32>()
                    }
                })
                .collect();
            channels.push(data);
        }
        let names = (0..4).map(|c| format!("ch{c}")).collect();
        (
            FeatureStack::from_channels(dims, names, channels).unwrap(),
            LabelVolume::new(dims, 1.0, labels).unwrap(),
        )
    }

    fn small_cfg() -> ForestConfig {
        ForestConfig {
            n_trees: 7,
            max_depth: 6,
            min_samples_leaf: 2,
            features_per_split: FeaturesPerSplit::Fixed(4),
            samples_per_class: 200,
            seed: 3,
        }
    }

    #[test]
    fn single_class_training_is_an_error() {
        let dims = Dims::new(4, 4, 4);
        let (stack, _) = separable_stack(dims, 1);
        let all_zero = LabelVolume::new(dims, 1.0, vec![0; dims.len()]).unwrap();
        assert!(matches!(
            train_forest(&stack, &all_zero, &small_cfg()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn depth_one_stump_picks_the_separating_channel() {
        let dims = Dims::new(8, 8, 8);
        let (stack, labels) = separable_stack(dims, 2);
        let cfg = ForestConfig {
            max_depth: 1,
            ..small_cfg()
        };
        let forest = train_forest(&stack, &labels, &cfg).unwrap();
        for tree in &forest.trees {
            match tree.nodes[0] {
                Node::Split { channel, .. } => assert_eq!(channel, 2),
                Node::Leaf { .. } => panic!("stump should split"),
            }
        }
        // Training accuracy 1.0: the stump separates the classes.
        let pred = forest_predict(&forest, &stack).unwrap();
        assert_eq!(pred.data, labels.data);
    }

    #[test]
    fn deep_forest_reproduces_separable_training_labels() {
        let dims = Dims::new(8, 8, 8);
        let (stack, labels) = separable_stack(dims, 4);
        let forest = train_forest(&stack, &labels, &small_cfg()).unwrap();
        let pred = forest_predict(&forest, &stack).unwrap();
        assert_eq!(pred.data, labels.data);
    }

    #[test]
    fn same_seed_trains_identical_forests() {
        let dims = Dims::new(6, 6, 6);
        let (stack, labels) = separable_stack(dims, 5);
        let a = train_forest(&stack, &labels, &small_cfg()).unwrap();
        let b = train_forest(&stack, &labels, &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_is_invariant_to_tree_order() {
        let dims = Dims::new(6, 6, 6);
        let (stack, labels) = separable_stack(dims, 6);
        let forest = train_forest(&stack, &labels, &small_cfg()).unwrap();
        let mut reversed = forest.clone();
        reversed.trees.reverse();
        assert_eq!(
            forest_predict(&forest, &stack).unwrap().data,
            forest_predict(&reversed, &stack).unwrap().data
        );
    }

    #[test]
    fn forest_of_identical_stumps_equals_single_stump() {
        let dims = Dims::new(4, 4, 4);
        let (stack, _) = separable_stack(dims, 7);
        let stump = Tree {
            nodes: vec![
                Node::Split {
                    channel: 2,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { p_fiber: 0.1 },
                Node::Leaf { p_fiber: 0.9 },
            ],
        };
        let single = TrainedForest {
            trees: vec![stump.clone()],
            channel_names: stack.names.clone(),
            n_trees: 1,
            max_depth: 1,
            min_samples_leaf: 1,
            features_per_split: 4,
            samples_per_class: 1,
            seed: 0,
        };
        let many = TrainedForest {
            trees: vec![stump; 9],
            n_trees: 9,
            ..single.clone()
        };
        assert_eq!(
            forest_predict(&single, &stack).unwrap().data,
            forest_predict(&many, &stack).unwrap().data
        );
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dims = Dims::new(6, 6, 6);
        let (stack, labels) = separable_stack(dims, 8);
        let forest = train_forest(&stack, &labels, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.forest");
        save_forest(&forest, &path).unwrap();
        let back = load_forest(&path).unwrap();
        assert_eq!(back, forest);
    }

    #[test]
    fn channel_manifest_mismatch_rejected() {
        let dims = Dims::new(4, 4, 4);
        let (stack, labels) = separable_stack(dims, 9);
        let forest = train_forest(&stack, &labels, &small_cfg()).unwrap();
        let renamed = FeatureStack::from_channels(
            dims,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            (0..4).map(|_| vec![0.0; dims.len()]).collect(),
        )
        .unwrap();
        assert!(forest_predict(&forest, &renamed).is_err());
    }
}
