//! Training stages: contrastive pretraining of the extractor, episodic
//! training of fusion + prototype head, and the linear baseline.

use auscult_tensor::{clip_global_norm, cosine_lr, Adam, AdamConfig, Checkpoint, Graph, Plateau, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LrSchedule, RunConfig};
use super::data::LabeledSplit;
use super::model::{derive_seed, Model, Stage};
use crate::encoders::{stack_specs, stack_waves};
use crate::error::{invalid, Result};
use crate::objectives::{pretrain_objective, LossBreakdown};
use crate::protohead::{cross_entropy, episodic_loss};
use crate::stats::Confusion;
use crate::views::{augment_wave, make_view, sample_recipe, MelSpec};
use crate::windows::{contrastive_batches, make_episode, oversample_minority};

/// Optional progress sink; receives one line per epoch.
pub type Log<'a> = Option<&'a mut dyn FnMut(&str)>;

fn emit(log: &mut Log<'_>, line: String) {
    if let Some(f) = log.as_mut() {
        f(&line);
    }
}

fn item(g: &Graph<f32>, v: auscult_tensor::Var) -> f64 {
    g.value(v).item() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub step_losses: Vec<f64>,
    /// Per-epoch means of every loss component.
    pub epochs: Vec<LossBreakdown<f64>>,
    pub lrs: Vec<f64>,
}

impl PretrainHistory {
    pub fn epoch_totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub adam: Adam<f32>,
    pub history: PretrainHistory,
}

impl PretrainOutcome {
    /// Extractor and fusion tensors, Adam moments, and the loss trajectory.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let mut names: Vec<&str> = self.adam.states().map(|(n, _)| n).collect();
        names.sort_unstable();
        for n in names {
            let st = self.adam.state(n).expect("listed state");
            ck.insert(&format!("adam.m.{n}"), &st.m);
            ck.insert(&format!("adam.v.{n}"), &st.v);
            ck.insert_i64(&format!("adam.step.{n}"), &[1], &[st.step as i64]);
        }
        let h = &self.history;
        ck.insert("history.step_loss", &Tensor::new(&[h.step_losses.len()], h.step_losses.clone()).expect("1-D"));
        let per_epoch: Vec<f64> = h
            .epochs
            .iter()
            .flat_map(|e| [e.total, e.ntxent, e.wasserstein, e.term_1d, e.term_2d, e.term_cross])
            .collect();
        ck.insert("history.epoch_loss", &Tensor::new(&[h.epochs.len(), 6], per_epoch).expect("rows of 6"));
        ck
    }

    pub fn step_losses_from(ck: &Checkpoint) -> Result<Vec<f64>> {
        Ok(ck.get::<f64>("history.step_loss")?.into_data())
    }
}

fn mean_breakdown(v: &[LossBreakdown<f64>]) -> LossBreakdown<f64> {
    let n = v.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown<f64>) -> f64| v.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        total: s(|b| b.total),
        ntxent: s(|b| b.ntxent),
        wasserstein: s(|b| b.wasserstein),
        term_1d: s(|b| b.term_1d),
        term_2d: s(|b| b.term_2d),
        term_cross: s(|b| b.term_cross),
    }
}

/// Two augmented views of every window of a batch: waveforms, and log-mel
/// spectrograms of those waveforms when the spectrogram path is enabled.
fn batch_views(model: &Model, samples: &[&[f32]], rng: &mut ChaCha8Rng) -> Result<[(Vec<Vec<f32>>, Vec<MelSpec>); 2]> {
    let dual = model.config.encoder.dual_path;
    let masks = model.config.data.masks;
    let mut out: [(Vec<Vec<f32>>, Vec<MelSpec>); 2] = Default::default();
    for s in samples {
        for view in out.iter_mut() {
            if dual {
                let v = make_view(s, &masks, rng)?;
                view.0.push(v.wave);
                view.1.push(v.spec);
            } else {
                view.0.push(augment_wave(s, &sample_recipe(rng))?);
            }
        }
    }
    Ok(out)
}

/// Contrastive pretraining of the extractor on unlabeled windows.
pub fn pretrain(config: &RunConfig, samples: &[&[f32]], mut log: Log<'_>) -> Result<PretrainOutcome> {
    if samples.len() < 2 {
        return invalid("pretrain", "empty corpus");
    }
    let mut model = Model::new(config)?;
    let cfg = model.config.clone();
    let pc = &cfg.pretrain;
    let backbone = model.encoder.clone();
    model.set_trainable(|n| backbone.is_backbone(n));
    let mut adam = Adam::new(AdamConfig {
        weight_decay: pc.weight_decay,
        ..AdamConfig::default()
    });
    let n_batches = contrastive_batches(samples.len(), pc.batch, 0).len();
    let total_steps = pc.epochs * n_batches;
    let mut history = PretrainHistory::default();
    for epoch in 0..pc.epochs {
        let batches = contrastive_batches(samples.len(), pc.batch, derive_seed(cfg.seed, &[10, epoch as u64]));
        let mut parts = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            let step = epoch * n_batches + b;
            let lr = match pc.schedule {
                LrSchedule::Cosine => cosine_lr(step, total_steps, pc.lr, pc.lr_min)?,
                _ => pc.lr,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11, epoch as u64, b as u64]));
            let rows: Vec<&[f32]> = batch.iter().map(|&i| samples[i]).collect();
            let [va, vb] = batch_views(&model, &rows, &mut rng)?;
            let mut g = Graph::new(true, derive_seed(cfg.seed, &[12, epoch as u64, b as u64]));
            let enc = &model.encoder;
            let wa = g.constant(stack_waves(&va.0.iter().map(|w| &w[..]).collect::<Vec<_>>()));
            let wb = g.constant(stack_waves(&vb.0.iter().map(|w| &w[..]).collect::<Vec<_>>()));
            let z1a = enc.encode_1d(&mut g, &model.store, wa)?;
            let z1b = enc.encode_1d(&mut g, &model.store, wb)?;
            let z2 = if cfg.encoder.dual_path {
                let sa = g.constant(stack_specs(&va.1.iter().collect::<Vec<_>>()));
                let sb = g.constant(stack_specs(&vb.1.iter().collect::<Vec<_>>()));
                Some((enc.encode_2d(&mut g, &model.store, sa)?, enc.encode_2d(&mut g, &model.store, sb)?))
            } else {
                None
            };
            let loss = pretrain_objective(&mut g, z1a, z1b, z2, &cfg.loss)?;
            let values = loss.values(&g);
            model.store.zero_grad();
            g.backward(loss.total)?.accumulate_into(&mut model.store);
            if adam.step(&mut model.store, |_| lr) {
                g.commit_buffers(&mut model.store);
            }
            history.step_losses.push(values.total);
            history.lrs.push(lr);
            parts.push(values);
        }
        let m = mean_breakdown(&parts);
        emit(&mut log, format!("pretrain epoch {:>3}: loss {:.5} (ntxent {:.5}, w2 {:.5})", epoch + 1, m.total, m.ntxent, m.wasserstein));
        history.epochs.push(m);
    }
    model.stage = Stage::Pretrained;
    model.set_trainable(|_| true);
    Ok(PretrainOutcome { model, adam, history })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtoHistory {
    pub episode_losses: Vec<f64>,
    pub pre_clip_norms: Vec<f64>,
    pub post_clip_norms: Vec<f64>,
    /// Validation F1 of nearest-prototype labels after each epoch.
    pub val_f1: Vec<f64>,
}

/// `per_class` indices of each class: without replacement when enough
/// members exist, otherwise with replacement.
fn balanced_batch(labels: &[u8], per_class: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, u8)> {
    let mut batch = Vec::with_capacity(2 * per_class);
    for c in [0u8, 1] {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() >= per_class {
            batch.extend(members.choose_multiple(rng, per_class).map(|&i| (i, c)));
        } else {
            batch.extend((0..per_class).map(|_| (members[rng.random_range(0..members.len())], c)));
        }
    }
    batch
}

fn rows_tensor(features: &[Vec<f32>], idx: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
    let rows: Vec<Vec<f32>> = idx.map(|i| features[i].clone()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Trains fusion + prototype head on class-balanced episodes over frozen
/// extractor features, then caches full-train prototypes.
pub fn train_proto(mut model: Model, train: &LabeledSplit, val: &LabeledSplit, mut log: Log<'_>) -> Result<(Model, ProtoHistory)> {
    train.require_both_classes("train_proto")?;
    let cfg = model.config.clone();
    let pc = &cfg.proto;
    let train_f = model.extract_features(&train.samples())?;
    let val_f = model.extract_features(&val.samples())?;
    let (train_y, val_y) = (train.labels(), val.labels());
    model.set_trainable(|n| n.starts_with("fusion.") || n.starts_with("proto."));
    let mut adam = Adam::new(AdamConfig {
        weight_decay: pc.weight_decay,
        ..AdamConfig::default()
    });
    let mut hist = ProtoHistory::default();
    for epoch in 0..pc.epochs {
        let mut epoch_loss = 0.0;
        for k in 0..pc.episodes_per_epoch {
            let tag = [20, epoch as u64, k as u64];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &tag));
            let batch = balanced_batch(&train_y, pc.per_class, &mut rng);
            let ep = make_episode(&batch, pc.k_shot, rng.random())?;
            let mut g = Graph::new(true, derive_seed(cfg.seed, &[21, epoch as u64, k as u64]));
            let xs = g.constant(rows_tensor(&train_f, ep.support.iter().map(|s| s.0))?);
            let xq = g.constant(rows_tensor(&train_f, ep.query.iter().map(|s| s.0))?);
            let zs = model.encoder.fusion.forward(&mut g, &model.store, xs)?;
            let zs = model.proto.embed(&mut g, &model.store, zs)?;
            let zq = model.encoder.fusion.forward(&mut g, &model.store, xq)?;
            let zq = model.proto.embed(&mut g, &model.store, zq)?;
            let ys: Vec<u8> = ep.support.iter().map(|s| s.1).collect();
            let yq: Vec<u8> = ep.query.iter().map(|s| s.1).collect();
            let loss = episodic_loss(&mut g, zs, &ys, zq, &yq)?;
            model.store.zero_grad();
            g.backward(loss)?.accumulate_into(&mut model.store);
            let pre = clip_global_norm(&mut model.store, pc.clip);
            hist.pre_clip_norms.push(pre);
            hist.post_clip_norms.push(model.store.grad_norm() as f64);
            adam.step(&mut model.store, |_| pc.lr);
            let l = item(&g, loss);
            hist.episode_losses.push(l);
            epoch_loss += l;
        }
        model.stage = Stage::Proto;
        model.cache_prototypes(&train_f, &train_y)?;
        let f1 = if val.is_empty() {
            0.0
        } else {
            Confusion::from_predictions(&model.predict_labels(&val_f)?, &val_y).f1()
        };
        hist.val_f1.push(f1);
        emit(
            &mut log,
            format!("proto epoch {:>3}: episode loss {:.5}, val F1 {:.4}", epoch + 1, epoch_loss / pc.episodes_per_epoch as f64, f1),
        );
    }
    model.set_trainable(|_| true);
    Ok((model, hist))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr_multiplier: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearInit {
    /// Start from a pretrained extractor: frozen warm-up, then differential rates.
    Pretrained,
    /// Random init, every parameter trained from the first epoch.
    Scratch,
}

fn mean_ce(model: &Model, features: &[Vec<f32>], labels: &[u8]) -> Result<f64> {
    let logits = model.linear_logits(features)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            lse - l[y as usize]
        })
        .sum::<f64>()
        / labels.len().max(1) as f64)
}

/// Linear baseline: fusion + affine head with cross-entropy on an
/// oversampled training set. From a pretrained extractor the backbone stays
/// frozen for `freeze_epochs`, then trains at `backbone_lr`; the learning
/// rate follows the plateau schedule on validation loss.
pub fn train_linear(
    mut model: Model,
    train: &LabeledSplit,
    val: &LabeledSplit,
    init: LinearInit,
    mut log: Log<'_>,
) -> Result<(Model, LinearHistory)> {
    train.require_both_classes("train_linear")?;
    let cfg = model.config.clone();
    let bc = &cfg.baseline;
    let plan = oversample_minority(&train.windows, derive_seed(cfg.seed, &[30]))?;
    let mut samples: Vec<Vec<f32>> = train.windows.iter().map(|w| w.samples.clone()).collect();
    let mut labels = train.labels();
    for e in &plan {
        samples.push(augment_wave(&train.windows[e.window].samples, &e.recipe)?);
        labels.push(train.windows[e.window].label);
    }
    let refs: Vec<&[f32]> = samples.iter().map(|s| &s[..]).collect();
    let val_refs = val.samples();
    let val_y = val.labels();
    let freeze = match init {
        LinearInit::Pretrained => bc.freeze_epochs.min(bc.epochs),
        LinearInit::Scratch => 0,
    };
    let backbone = model.encoder.clone();
    let mut adam = Adam::new(AdamConfig {
        weight_decay: bc.weight_decay,
        ..AdamConfig::default()
    });
    let mut plateau = Plateau::new(bc.plateau_patience, bc.plateau_factor)?;
    let mut mult = 1.0;
    let mut cached: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)> = None;
    let mut hist = LinearHistory::default();
    model.stage = Stage::Linear;
    for epoch in 0..bc.epochs {
        let frozen = epoch < freeze;
        if frozen {
            model.set_trainable(|n| !backbone.is_backbone(n));
            if cached.is_none() {
                cached = Some((model.extract_features(&refs)?, model.extract_features(&val_refs)?));
            }
        } else {
            model.set_trainable(|_| true);
            cached = None;
        }
        let lr_for = |n: &str| -> f64 {
            mult * match init {
                LinearInit::Scratch => bc.scratch_lr,
                LinearInit::Pretrained if backbone.is_backbone(n) => bc.backbone_lr,
                LinearInit::Pretrained => bc.head_lr,
            }
        };
        let batches = contrastive_batches(refs.len(), bc.batch, derive_seed(cfg.seed, &[31, epoch as u64]));
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut g = Graph::new(true, derive_seed(cfg.seed, &[32, epoch as u64, b as u64]));
            let f = match &cached {
                Some((tf, _)) => g.constant(rows_tensor(tf, batch.iter().copied())?),
                None => {
                    let rows: Vec<&[f32]> = batch.iter().map(|&i| refs[i]).collect();
                    model.features(&mut g, &rows)?
                }
            };
            let z = model.encoder.fusion.forward(&mut g, &model.store, f)?;
            let logits = model.linear.logits(&mut g, &model.store, z)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i] as usize).collect();
            let loss = cross_entropy(&mut g, logits, &targets)?;
            model.store.zero_grad();
            g.backward(loss)?.accumulate_into(&mut model.store);
            if adam.step(&mut model.store, lr_for) && !frozen {
                g.commit_buffers(&mut model.store);
            }
            total += item(&g, loss);
        }
        let val_f = match &cached {
            Some((_, vf)) => vf.clone(),
            None => model.extract_features(&val_refs)?,
        };
        let vl = if val_y.is_empty() { 0.0 } else { mean_ce(&model, &val_f, &val_y)? };
        hist.train_loss.push(total / batches.len().max(1) as f64);
        hist.val_loss.push(vl);
        hist.lr_multiplier.push(mult);
        if bc.schedule == LrSchedule::Plateau {
            mult = plateau.observe(vl);
        }
        emit(
            &mut log,
            format!("linear epoch {:>3}: train loss {:.5}, val loss {:.5}, lr x{mult}", epoch + 1, total / batches.len().max(1) as f64, vl),
        );
    }
    model.set_trainable(|_| true);
    Ok((model, hist))
}
