//! The trainable model bundle (extractor, fusion, both heads), feature
//! extraction, scoring and checkpoint conversion.

use auscult_tensor::{Checkpoint, Graph, ParamStore, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use crate::encoders::{stack_specs, stack_waves, DualEncoder};
use crate::error::{invalid, Error, Result};
use crate::protohead::{self, LinearHead, PrototypeSet, PrototypeSource, ProtoHead};
use crate::views::logmel;

/// Derives an independent 64-bit seed from a base seed and a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrained,
    Proto,
    Linear,
}

pub const FEATURE_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    /// Resolved configuration (ablation flags already applied).
    pub config: RunConfig,
    pub encoder: DualEncoder,
    pub proto: ProtoHead,
    pub linear: LinearHead,
    pub store: ParamStore<f32>,
    pub prototypes: Option<PrototypeSet>,
    pub threshold: Option<f64>,
    pub stage: Stage,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut store = ParamStore::new();
        let encoder = DualEncoder::new(&mut store, &config.encoder, derive_seed(config.seed, &[1]))?;
        let d = config.encoder.embed_dim;
        let proto = ProtoHead::new(&mut store, d, &config.proto_head, derive_seed(config.seed, &[2]))?;
        let linear = LinearHead::new(&mut store, d, derive_seed(config.seed, &[3]))?;
        Ok(Self {
            config,
            encoder,
            proto,
            linear,
            store,
            prototypes: None,
            threshold: None,
            stage: Stage::Init,
        })
    }

    /// Names of parameters and buffers that belong to the extractor and fusion.
    pub fn is_encoder_name(&self, name: &str) -> bool {
        self.encoder.is_backbone(name) || name.starts_with("fusion.")
    }

    pub fn encoder_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .store
            .params()
            .map(|(_, p)| p.name.clone())
            .chain(self.store.buffers().map(|(n, _)| n.to_string()))
            .filter(|n| self.is_encoder_name(n))
            .collect();
        v.sort();
        v
    }

    /// Sets which parameters receive gradients.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.store.params_mut() {
            p.trainable = pred(&p.name);
        }
    }

    /// Concatenated per-path embeddings (pre-fusion) for un-augmented windows.
    pub fn features(&self, g: &mut Graph<f32>, samples: &[&[f32]]) -> Result<Var> {
        let waves = g.constant(stack_waves(samples));
        let z1 = self.encoder.encode_1d(g, &self.store, waves)?;
        let z2 = if self.config.encoder.dual_path {
            let specs: Vec<_> = samples.iter().map(|s| logmel(s)).collect();
            let refs: Vec<_> = specs.iter().collect();
            let x = g.constant(stack_specs(&refs));
            Some(self.encoder.encode_2d(g, &self.store, x)?)
        } else {
            None
        };
        self.encoder.features(g, z1, z2)
    }

    /// Eval-mode pre-fusion features, in batches.
    pub fn extract_features(&self, samples: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(FEATURE_BATCH) {
            let mut g = Graph::eval();
            let f = self.features(&mut g, chunk)?;
            let t = g.value(f);
            out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    fn head_rows(&self, features: &[Vec<f32>], f: impl Fn(&Self, &mut Graph<f32>, Var) -> Result<Var>) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(FEATURE_BATCH.max(1) * 4) {
            let mut g = Graph::eval();
            let x = g.constant(Tensor::from_rows(chunk)?);
            let y = f(self, &mut g, x)?;
            let t = g.value(y);
            out.extend((0..chunk.len()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    /// Fused embeddings z of cached features.
    pub fn fused(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        self.head_rows(features, |m, g, x| m.encoder.fusion.forward(g, &m.store, x))
    }

    /// Metric-space embeddings f_φ of cached features.
    pub fn metric_embeddings(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        self.head_rows(features, |m, g, x| {
            let z = m.encoder.fusion.forward(g, &m.store, x)?;
            m.proto.embed(g, &m.store, z)
        })
    }

    pub fn linear_logits(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        self.head_rows(features, |m, g, x| {
            let z = m.encoder.fusion.forward(g, &m.store, x)?;
            m.linear.logits(g, &m.store, z)
        })
    }

    /// Full-train prototypes under the current extractor and head.
    pub fn cache_prototypes(&mut self, features: &[Vec<f32>], labels: &[u8]) -> Result<()> {
        let emb = self.metric_embeddings(features)?;
        let support: Vec<(Vec<f64>, u8)> = emb.into_iter().zip(labels.iter().copied()).collect();
        self.prototypes = Some(protohead::compute_prototypes(&support, PrototypeSource::FullTrainCache)?);
        Ok(())
    }

    /// Positive-class probabilities from cached features, using the head of
    /// the current stage.
    pub fn scores_from_features(&self, features: &[Vec<f32>]) -> Result<Vec<f64>> {
        match self.stage {
            Stage::Proto => {
                let protos = self
                    .prototypes
                    .as_ref()
                    .ok_or_else(|| Error::Invalid {
                        op: "predict",
                        msg: "missing prototype cache".into(),
                    })?;
                Ok(self
                    .metric_embeddings(features)?
                    .iter()
                    .map(|e| protohead::positive_score(e, protos))
                    .collect())
            }
            Stage::Linear => Ok(self
                .linear_logits(features)?
                .iter()
                .map(|l| protohead::softmax(l)[1])
                .collect()),
            Stage::Init | Stage::Pretrained => invalid("predict", "model has no trained classification head"),
        }
    }

    pub fn scores(&self, samples: &[&[f32]]) -> Result<Vec<f64>> {
        self.scores_from_features(&self.extract_features(samples)?)
    }

    /// Nearest-prototype labels (prototype stage only).
    pub fn predict_labels(&self, features: &[Vec<f32>]) -> Result<Vec<u8>> {
        let protos = match (&self.prototypes, self.stage) {
            (Some(p), Stage::Proto) => p,
            _ => return invalid("predict", "missing prototype cache"),
        };
        Ok(self
            .metric_embeddings(features)?
            .iter()
            .map(|e| protohead::nearest_class(e, protos))
            .collect())
    }

    /// Final-stage representation used for export: metric embeddings after
    /// prototype training, fused embeddings otherwise.
    pub fn export_rows(&self, samples: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let f = self.extract_features(samples)?;
        match self.stage {
            Stage::Proto => self.metric_embeddings(&f),
            _ => self.fused(&f),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "stage": self.stage,
            "config": self.config,
            "threshold": self.threshold,
        }));
        let keep = |n: &str| self.stage != Stage::Pretrained || self.is_encoder_name(n);
        for (_, p) in self.store.params() {
            if keep(&p.name) {
                ck.insert(&p.name, &p.value);
            }
        }
        for (name, t) in self.store.buffers() {
            if keep(name) {
                ck.insert(name, t);
            }
        }
        if let Some(p) = &self.prototypes {
            let c = Tensor::from_rows(&p.centroids).expect("equal-width centroids");
            ck.insert("proto.centroids", &c);
            let ids: Vec<i64> = p.class_ids.iter().map(|&c| c as i64).collect();
            ck.insert_i64("proto.class_ids", &[ids.len()], &ids);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.hyperparameters;
        let config: RunConfig = serde_json::from_value(h["config"].clone())?;
        let stage: Stage = serde_json::from_value(h["stage"].clone())?;
        let mut m = Self::new(&config)?;
        m.stage = stage;
        m.threshold = h["threshold"].as_f64();
        if stage == Stage::Pretrained {
            m.load_encoder_from(ck)?;
        } else {
            ck.load_into_store(&mut m.store)?;
        }
        if ck.contains("proto.centroids") {
            let c = ck.get::<f64>("proto.centroids")?;
            let (_, ids) = ck.get_i64("proto.class_ids")?;
            let rows = c.shape()[0];
            m.prototypes = Some(PrototypeSet {
                class_ids: ids.iter().map(|&v| v as u8).collect(),
                centroids: (0..rows).map(|i| c.row(i).to_vec()).collect(),
                source: PrototypeSource::FullTrainCache,
            });
        }
        Ok(m)
    }

    /// Copies every extractor and fusion tensor from `ck`; all must exist.
    pub fn load_encoder_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for name in self.encoder_names() {
            let t = ck.get::<f32>(&name)?;
            let slot = if let Some(id) = self.store.id(&name) {
                &mut self.store.param_mut(id).value
            } else {
                let id = self.store.buffer_id(&name).expect("listed buffer");
                self.store.buffer_mut(id)
            };
            if slot.shape() != t.shape() {
                return Err(TensorError::TensorShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                }
                .into());
            }
            *slot = t;
        }
        Ok(())
    }
}
