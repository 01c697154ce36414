//! Temporal encoding and random-walk skip-gram node embeddings.

use camtraj_nd::{SeededRng, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{NodeId, RoadNetwork};
use crate::synthgen::random_walk;

/// Seconds per time-encoding unit.
pub const TIME_UNIT_S: f64 = 60.0;

/// `cos(t · α^{−(j−1)/β})` for `j = 1..=d`, with `α = β = √d`.
pub fn time_encode(t: f64, d: usize) -> Vec<f32> {
    let alpha = (d as f64).sqrt();
    (0..d)
        .map(|j| (t * alpha.powf(-(j as f64) / alpha)).cos() as f32)
        .collect()
}

/// Time encoding of a timestamp given in seconds relative to the sequence start.
pub fn encode_seconds(t_rel_s: f64, d: usize) -> Vec<f32> {
    time_encode(t_rel_s / TIME_UNIT_S, d)
}

/// Token vocabulary layout: node `n` → `n − 1`, then PAD, BOS, EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_nodes: usize,
}

impl Vocab {
    pub fn new(n_nodes: usize) -> Self {
        Self { n_nodes }
    }

    pub fn size(&self) -> usize {
        self.n_nodes + 3
    }

    pub fn pad(&self) -> usize {
        self.n_nodes
    }

    pub fn bos(&self) -> usize {
        self.n_nodes + 1
    }

    pub fn eos(&self) -> usize {
        self.n_nodes + 2
    }

    pub fn token(&self, n: NodeId) -> Result<usize> {
        if n == 0 || n as usize > self.n_nodes {
            return Err(Error::UnknownNode(n));
        }
        Ok(n as usize - 1)
    }

    /// Output classes are the nodes plus EOS, which sits at class `|V|`.
    pub fn n_classes(&self) -> usize {
        self.n_nodes + 1
    }

    pub fn eos_class(&self) -> usize {
        self.n_nodes
    }

    /// Embedding row backing each output class (tied projection).
    pub fn class_rows(&self) -> Vec<usize> {
        (0..self.n_nodes).chain(std::iter::once(self.eos())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddingTable {
    pub vocab: Vocab,
    pub table: Tensor,
}

impl NodeEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, token: usize) -> &[f32] {
        self.table.row_slice(token)
    }

    /// `x = x_spat + x_temp` for node `n` at relative time `t_rel_s`.
    pub fn token_embed(&self, n: NodeId, t_rel_s: f64) -> Result<Vec<f32>> {
        let tok = self.vocab.token(n)?;
        let te = encode_seconds(t_rel_s, self.dim());
        Ok(self.row(tok).iter().zip(te).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Node2VecConfig {
    pub dim: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f32,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            walks_per_node: 10,
            walk_length: 20,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
        }
    }
}

fn sig(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling over uniform random walks. Special-token
/// rows get small random values and are never trained here.
pub fn pretrain_node2vec(net: &RoadNetwork, cfg: &Node2VecConfig, seed: u64) -> Result<NodeEmbeddingTable> {
    if cfg.dim == 0 || cfg.walk_length < 2 || cfg.window == 0 {
        return Err(Error::Config("node2vec needs dim > 0, walk_length ≥ 2 and window > 0".into()));
    }
    let n = net.node_count();
    let d = cfg.dim;
    let vocab = Vocab::new(n);
    let root = SeededRng::new(seed).split_named("node2vec");
    let mut rng = root.split_named("walks");

    let mut walks = Vec::with_capacity(n * cfg.walks_per_node);
    for _ in 0..cfg.walks_per_node {
        let mut starts: Vec<NodeId> = net.node_ids().collect();
        starts.shuffle(&mut rng);
        for s in starts {
            let w = random_walk(net, s, cfg.walk_length - 1, &mut rng)?;
            walks.push(w.into_iter().map(|v| v as usize - 1).collect::<Vec<usize>>());
        }
    }

    // Unigram^0.75 negative-sampling table.
    let mut freq = vec![0.0f64; n];
    for w in &walks {
        for &v in w {
            freq[v] += 1.0;
        }
    }
    let weights: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let table_size = (n * 100).max(1000);
    let mut neg_table = Vec::with_capacity(table_size);
    let mut acc = 0.0;
    let mut v = 0;
    for i in 0..table_size {
        let target = (i as f64 + 0.5) / table_size as f64 * total;
        while v + 1 < n && acc + weights[v] < target {
            acc += weights[v];
            v += 1;
        }
        neg_table.push(v);
    }

    let mut init = root.split_named("init");
    let mut emb: Vec<f32> = (0..vocab.size() * d)
        .map(|_| (init.uniform_f32() - 0.5) / d as f32)
        .collect();
    let mut ctx = vec![0.0f32; n * d];

    let steps_total = (cfg.epochs * walks.len()).max(1) as f32;
    let mut step = 0usize;
    let mut grad = vec![0.0f32; d];
    let mut train_rng = root.split_named("sgd");
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..walks.len()).collect();
        order.shuffle(&mut train_rng);
        for wi in order {
            let lr = cfg.lr * (1.0 - step as f32 / steps_total).max(1e-4);
            step += 1;
            let walk = &walks[wi];
            for (i, &center) in walk.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(walk.len());
                for (j, &context) in walk.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let e = &emb[center * d..(center + 1) * d];
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = neg_table[train_rng.random_range(0..neg_table.len())];
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let c = &mut ctx[target * d..(target + 1) * d];
                        let dot: f32 = e.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                        let g = (label - sig(dot)) * lr;
                        for ((gr, cv), ev) in grad.iter_mut().zip(c.iter_mut()).zip(e) {
                            *gr += g * *cv;
                            *cv += g * ev;
                        }
                    }
                    for (ev, gr) in emb[center * d..(center + 1) * d].iter_mut().zip(&grad) {
                        *ev += gr;
                    }
                }
            }
        }
    }
    Ok(NodeEmbeddingTable {
        vocab,
        table: Tensor::new(vec![vocab.size(), d], emb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{EdgeEntry, NetworkFile, NodeEntry};

    #[test]
    fn time_encoding_values() {
        assert!(time_encode(0.0, 16).iter().all(|&x| x == 1.0));
        // d = 4: α = β = 2, entry j = 3 is cos(t · 2^{-1}).
        let e = time_encode(4.0, 4);
        assert!((e[2] - 2.0f32.cos()).abs() < 1e-7);
        assert!((e[0] - 4.0f32.cos()).abs() < 1e-7);
        assert!(time_encode(12345.6, 64).iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn time_encoding_distinguishes_integer_seconds() {
        let encs: Vec<Vec<f32>> = (0..3600).map(|s| encode_seconds(s as f64, 16)).collect();
        for w in encs.windows(2) {
            let diff: f32 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-9);
        }
    }

    fn path_graph(n: u32) -> RoadNetwork {
        RoadNetwork::from_file(&NetworkFile {
            nodes: (1..=n)
                .map(|id| NodeEntry {
                    id,
                    lat: 0.0,
                    lon: id as f64 * 0.001,
                })
                .collect(),
            edges: (1..n)
                .map(|u| EdgeEntry {
                    u,
                    v: u + 1,
                    length_m: None,
                })
                .collect(),
        })
        .unwrap()
    }

    #[test]
    fn table_shape_and_determinism() {
        let net = path_graph(10);
        let cfg = Node2VecConfig {
            epochs: 1,
            ..Node2VecConfig::default()
        };
        let a = pretrain_node2vec(&net, &cfg, 3).unwrap();
        assert_eq!(a.table.shape(), &[13, 64]);
        assert!(a.table.is_finite());
        assert_eq!(a, pretrain_node2vec(&net, &cfg, 3).unwrap());
    }

    #[test]
    fn token_embedding_composition() {
        let mut table = NodeEmbeddingTable {
            vocab: Vocab::new(3),
            table: Tensor::zeros(6, 8),
        };
        assert_eq!(table.token_embed(2, 120.0).unwrap(), encode_seconds(120.0, 8));
        table.table.data_mut()[8..16].copy_from_slice(&[1.0; 8]);
        let at0 = table.token_embed(2, 0.0).unwrap();
        assert!(at0.iter().all(|&x| x == 2.0));
        let at_t = table.token_embed(2, 300.0).unwrap();
        let te = encode_seconds(300.0, 8);
        for i in 0..8 {
            assert!(((at_t[i] - at0[i]) - (te[i] - 1.0)).abs() < 1e-6);
        }
        assert!(table.token_embed(9, 0.0).is_err());
    }
}
