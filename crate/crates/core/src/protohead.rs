//! Prototypical head: a small MLP into the metric space, class-mean
//! prototypes, softmax over negative squared distances, and the linear
//! baseline head.

use auscult_tensor::{Axis, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoHeadConfig {
    pub hidden: usize,
    pub metric_dim: usize,
    pub dropout: f64,
}

impl Default for ProtoHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            metric_dim: 32,
            dropout: 0.1,
        }
    }
}

/// affine(D→hidden) → ReLU → dropout → affine(hidden→M).
#[derive(Debug, Clone)]
pub struct ProtoHead {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
    pub metric_dim: usize,
}

impl ProtoHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_in: usize, cfg: &ProtoHeadConfig, seed: u64) -> Result<Self> {
        if cfg.metric_dim < 2 {
            return invalid("proto head", "metric_dim must be at least 2");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            l1: Linear::new(store, "proto.l1", d_in, cfg.hidden, true, &mut rng)?,
            l2: Linear::new(store, "proto.l2", cfg.hidden, cfg.metric_dim, true, &mut rng)?,
            dropout: cfg.dropout,
            metric_dim: cfg.metric_dim,
        })
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, z)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        self.l2.forward(g, store, h)
    }
}

/// Row-averaging matrix `[C × N]` for the distinct labels in ascending order.
pub fn averaging_matrix<T: Scalar>(labels: &[u8]) -> Result<(Vec<u8>, Tensor<T>)> {
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return invalid("compute_prototypes", "empty support set");
    }
    let n = labels.len();
    let mut a = Tensor::zeros(&[classes.len(), n]);
    for (c, &cls) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cls).collect();
        let w = T::lit(1.0 / members.len() as f64);
        for i in members {
            a.data_mut()[c * n + i] = w;
        }
    }
    Ok((classes, a))
}

/// p_c = mean of the support embeddings labelled c, as a graph node `[C × M]`.
pub fn prototypes_graph<T: Scalar>(g: &mut Graph<T>, support: Var, labels: &[u8]) -> Result<(Vec<u8>, Var)> {
    if g.shape(support).first() != Some(&labels.len()) {
        return invalid("compute_prototypes", "support rows and labels differ in length");
    }
    let (classes, a) = averaging_matrix::<T>(labels)?;
    let a = g.constant(a);
    Ok((classes, g.matmul(a, support)?))
}

/// Logits −‖q − p_c‖², `[Q × C]`.
pub fn proto_logits<T: Scalar>(g: &mut Graph<T>, query: Var, protos: Var) -> Result<Var> {
    let d = g.sqdist(query, protos)?;
    Ok(g.scale(d, T::lit(-1.0)))
}

/// Mean negative log-likelihood of integer targets under softmax(logits).
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let lse = g.logsumexp(logits, Axis::Cols)?;
    let pos = g.pick(logits, targets)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean_all(per))
}

/// Episodic loss: prototypes from the support embeddings, cross-entropy of
/// the query embeddings against them. Query classes must appear in support.
pub fn episodic_loss<T: Scalar>(
    g: &mut Graph<T>,
    support: Var,
    support_labels: &[u8],
    query: Var,
    query_labels: &[u8],
) -> Result<Var> {
    let (classes, protos) = prototypes_graph(g, support, support_labels)?;
    let targets = query_labels
        .iter()
        .map(|y| {
            classes.iter().position(|c| c == y).ok_or_else(|| crate::error::Error::Invalid {
                op: "episodic_loss",
                msg: format!("query class {y} missing from support"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = proto_logits(g, query, protos)?;
    cross_entropy(g, logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    Episodic,
    FullTrainCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_ids: Vec<u8>,
    pub centroids: Vec<Vec<f64>>,
    pub source: PrototypeSource,
}

/// Class means of `(vector, label)` pairs, classes in ascending order.
pub fn compute_prototypes(support: &[(Vec<f64>, u8)], source: PrototypeSource) -> Result<PrototypeSet> {
    let labels: Vec<u8> = support.iter().map(|s| s.1).collect();
    let (classes, _) = averaging_matrix::<f64>(&labels)?;
    let dim = support[0].0.len();
    let centroids = classes
        .iter()
        .map(|&c| {
            let members: Vec<&Vec<f64>> = support.iter().filter(|s| s.1 == c).map(|s| &s.0).collect();
            let k = members.len() as f64;
            (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / k).collect()
        })
        .collect();
    Ok(PrototypeSet {
        class_ids: classes,
        centroids,
        source,
    })
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax over −‖q − p_c‖², in prototype order.
pub fn class_probs(query: &[f64], protos: &PrototypeSet) -> Vec<f64> {
    let logits: Vec<f64> = protos.centroids.iter().map(|p| -sq_dist(query, p)).collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Nearest-centroid label; exact ties go to the lower class index.
pub fn nearest_class(query: &[f64], protos: &PrototypeSet) -> u8 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, p) in protos.centroids.iter().enumerate() {
        let d = sq_dist(query, p);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    protos.class_ids[best]
}

/// Probability of class 1 (0 if the set has no class-1 prototype).
pub fn positive_score(query: &[f64], protos: &PrototypeSet) -> f64 {
    let p = class_probs(query, protos);
    protos.class_ids.iter().position(|&c| c == 1).map_or(0.0, |i| p[i])
}

/// Single affine map D → 2 trained with softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub fc: Linear,
}

impl LinearHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_in: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            fc: Linear::new(store, "linear.fc", d_in, 2, true, &mut rng)?,
        })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        self.fc.forward(g, store, z)
    }
}
