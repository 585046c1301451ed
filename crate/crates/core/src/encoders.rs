//! Dual-path feature extractor: a dilated TCN over waveforms, a residual 2D
//! network with projection head over log-mel spectrograms, and the fusion
//! MLP. Shallow single-stage variants stand in when enhanced encoders are
//! switched off.

use auscult_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, Conv1d, Conv2d, LayerNorm, Linear};
use crate::views::{MEL_FRAMES, N_MELS};
use crate::windows::WINDOW_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub init_kernel: usize,
    pub init_stride: usize,
    pub init_pool: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            init_kernel: 16,
            init_stride: 4,
            init_pool: 2,
            blocks: 8,
            kernel: 3,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Enc2dConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub dropout: f64,
}

impl Default for Enc2dConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub tcn: TcnConfig,
    pub enc2d: Enc2dConfig,
    pub fusion_dropout: f64,
    /// Both waveform and spectrogram paths; otherwise waveform only.
    pub dual_path: bool,
    /// Dilated TCN and residual 2D network; otherwise shallow CNNs.
    pub enhanced: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            tcn: TcnConfig::default(),
            enc2d: Enc2dConfig::default(),
            fusion_dropout: 0.1,
            dual_path: true,
            enhanced: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tcn;
        if self.embed_dim == 0 || t.blocks == 0 || t.kernel % 2 == 0 || t.init_stride == 0 || t.init_pool == 0 {
            return invalid("encoder config", "embed_dim, blocks, strides must be positive and kernel odd");
        }
        if t.init_kernel < t.init_stride || (t.init_kernel - t.init_stride) % 2 != 0 {
            return invalid("encoder config", "init_kernel - init_stride must be even and non-negative");
        }
        if self.enc2d.widths.is_empty() || self.enc2d.blocks_per_stage == 0 {
            return invalid("encoder config", "enc2d needs at least one stage and block");
        }
        for p in [t.dropout, self.enc2d.dropout, self.fusion_dropout] {
            if !(0.0..1.0).contains(&p) {
                return invalid("encoder config", format!("dropout {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn n_paths(&self) -> usize {
        if self.dual_path {
            2
        } else {
            1
        }
    }

    /// Width of the concatenated per-path features fed to fusion.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim * self.n_paths()
    }
}

/// Receptive field, in post-downsampling samples, of a stack of stride-1
/// convolutions with kernel `k` and dilations 2^0 .. 2^(blocks-1).
pub fn dilated_receptive_field(kernel: usize, blocks: usize) -> usize {
    1 + (0..blocks).map(|l| (kernel - 1) << l).sum::<usize>()
}

#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub bn: BatchNorm,
    pub conv: Conv1d,
}

/// h0 = pool(ReLU(LN(conv(x)))); h_{l+1} = h_l + dropout(conv_{d=2^l}(ReLU(BN(h_l)))); z = GAP(h_L).
#[derive(Debug, Clone)]
pub struct Tcn {
    pub stem: Conv1d,
    pub ln: LayerNorm,
    pub blocks: Vec<TcnBlock>,
    pub pool: usize,
    pub dropout: f64,
}

impl Tcn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TcnConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pad = (cfg.init_kernel - cfg.init_stride) / 2;
        let stem = Conv1d::new(store, "tcn.stem", 1, d, cfg.init_kernel, (cfg.init_stride, 1, pad), true, rng)?;
        let ln = LayerNorm::new(store, "tcn.ln", d)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let dil = 1 << l;
            blocks.push(TcnBlock {
                bn: BatchNorm::new(store, &format!("tcn.block{l}.bn"), d)?,
                conv: Conv1d::new(
                    store,
                    &format!("tcn.block{l}.conv"),
                    d,
                    d,
                    cfg.kernel,
                    (1, dil, dil * (cfg.kernel - 1) / 2),
                    true,
                    rng,
                )?,
            });
        }
        Ok(Self {
            stem,
            ln,
            blocks,
            pool: cfg.init_pool,
            dropout: cfg.dropout,
        })
    }

    pub fn receptive_field(&self, kernel: usize) -> usize {
        dilated_receptive_field(kernel, self.blocks.len())
    }

    /// `x`: `[N, 1, L]` → `[N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, x)?;
        let h = self.ln.forward(g, store, h)?;
        let h = g.relu(h);
        let mut h = g.avg_pool1d(h, self.pool)?;
        for b in &self.blocks {
            let u = b.bn.forward(g, store, h)?;
            let u = g.relu(u);
            let u = b.conv.forward(g, store, u)?;
            let u = g.dropout(u, self.dropout)?;
            h = g.add(h, u)?;
        }
        Ok(g.global_avg_pool(h)?)
    }
}

/// conv → BN → ReLU → pool → conv → BN → ReLU → GAP.
#[derive(Debug, Clone)]
pub struct Shallow1d {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub pool: usize,
}

impl Shallow1d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TcnConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pad = (cfg.init_kernel - cfg.init_stride) / 2;
        Ok(Self {
            conv1: Conv1d::new(store, "cnn1d.conv1", 1, d, cfg.init_kernel, (cfg.init_stride, 1, pad), false, rng)?,
            bn1: BatchNorm::new(store, "cnn1d.bn1", d)?,
            conv2: Conv1d::new(store, "cnn1d.conv2", d, d, 3, (1, 1, 1), false, rng)?,
            bn2: BatchNorm::new(store, "cnn1d.bn2", d)?,
            pool: cfg.init_pool,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.avg_pool1d(h, self.pool)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        let h = g.relu(h);
        Ok(g.global_avg_pool(h)?)
    }
}

/// X_{l+1} = ReLU(G(X_l) + S(X_l)), G = conv-BN-ReLU-conv-BN and S the
/// identity or, when shape changes, a strided 1x1 projection with BN.
#[derive(Debug, Clone)]
pub struct ResBlock2d {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResBlock2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, &format!("{name}.short.conv"), c_in, c_out, 1, stride, 0, false, rng)?,
                BatchNorm::new(store, &format!("{name}.short.bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out)?,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s)?
            }
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

/// P(h) = W_p · dropout(ReLU(BN(W_e h))).
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub expand: Linear,
    pub bn: BatchNorm,
    pub project: Linear,
    pub dropout: f64,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            expand: Linear::new(store, &format!("{name}.expand"), d_in, 2 * d, true, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), 2 * d)?,
            project: Linear::new(store, &format!("{name}.project"), 2 * d, d, true, rng)?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let u = self.expand.forward(g, store, h)?;
        let u = self.bn.forward(g, store, u)?;
        let u = g.relu(u);
        let u = g.dropout(u, self.dropout)?;
        self.project.forward(g, store, u)
    }
}

/// Stem conv → residual stages (stride 2 at each stage entry) → GAP → projection head.
#[derive(Debug, Clone)]
pub struct ResNet2d {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Vec<ResBlock2d>>,
    pub head: ProjectionHead,
}

impl ResNet2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &Enc2dConfig, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w0 = cfg.widths[0];
        let stem = Conv2d::new(store, "enc2d.stem", 1, w0, 3, 1, 1, false, rng)?;
        let stem_bn = BatchNorm::new(store, "enc2d.stem_bn", w0)?;
        let mut stages = Vec::new();
        let mut c_in = w0;
        for (s, &w) in cfg.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResBlock2d::new(store, &format!("enc2d.stage{s}.block{b}"), c_in, w, stride, rng)?);
                c_in = w;
            }
            stages.push(blocks);
        }
        let head = ProjectionHead::new(store, "enc2d.head", c_in, d, cfg.dropout, rng)?;
        Ok(Self {
            stem,
            stem_bn,
            stages,
            head,
        })
    }

    /// `x`: `[N, 1, H, W]` → `[N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, x)?;
        let h = self.stem_bn.forward(g, store, h)?;
        let mut h = g.relu(h);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, store, h)?;
            }
        }
        let h = g.global_avg_pool(h)?;
        self.head.forward(g, store, h)
    }
}

/// conv → BN → ReLU → strided conv → BN → ReLU → GAP → linear.
#[derive(Debug, Clone)]
pub struct Shallow2d {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub proj: Linear,
}

impl Shallow2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, "cnn2d.conv1", 1, 16, 3, 1, 1, false, rng)?,
            bn1: BatchNorm::new(store, "cnn2d.bn1", 16)?,
            conv2: Conv2d::new(store, "cnn2d.conv2", 16, 32, 3, 2, 1, false, rng)?,
            bn2: BatchNorm::new(store, "cnn2d.bn2", 32)?,
            proj: Linear::new(store, "cnn2d.proj", 32, d, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        self.proj.forward(g, store, h)
    }
}

/// MLP over concatenated path embeddings: affine(in→2D) → LN → ReLU → dropout → affine(2D→D).
#[derive(Debug, Clone)]
pub struct Fusion {
    pub l1: Linear,
    pub ln: LayerNorm,
    pub l2: Linear,
    pub dropout: f64,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_in: usize, d: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, "fusion.l1", d_in, 2 * d, true, rng)?,
            ln: LayerNorm::new(store, "fusion.ln", 2 * d)?,
            l2: Linear::new(store, "fusion.l2", 2 * d, d, true, rng)?,
            dropout,
        })
    }

    /// `features`: `[N, d_in]`, already concatenated.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, features)?;
        let h = self.ln.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        self.l2.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub enum Path1d {
    Tcn(Tcn),
    Shallow(Shallow1d),
}

#[derive(Debug, Clone)]
pub enum Path2d {
    ResNet(ResNet2d),
    Shallow(Shallow2d),
}

/// Layer layout of the whole extractor. Parameters live in the store passed
/// to [`DualEncoder::new`].
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub path1d: Path1d,
    pub path2d: Option<Path2d>,
    pub fusion: Fusion,
}

impl DualEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path1d = if cfg.enhanced {
            Path1d::Tcn(Tcn::new(store, &cfg.tcn, d, &mut rng)?)
        } else {
            Path1d::Shallow(Shallow1d::new(store, &cfg.tcn, d, &mut rng)?)
        };
        let path2d = match (cfg.dual_path, cfg.enhanced) {
            (false, _) => None,
            (true, true) => Some(Path2d::ResNet(ResNet2d::new(store, &cfg.enc2d, d, &mut rng)?)),
            (true, false) => Some(Path2d::Shallow(Shallow2d::new(store, d, &mut rng)?)),
        };
        let fusion = Fusion::new(store, cfg.feature_dim(), d, cfg.fusion_dropout, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            path1d,
            path2d,
            fusion,
        })
    }

    /// Name prefixes of the pretrained extractor (everything except fusion).
    pub fn backbone_prefixes(&self) -> Vec<&'static str> {
        let mut v = vec![match self.path1d {
            Path1d::Tcn(_) => "tcn.",
            Path1d::Shallow(_) => "cnn1d.",
        }];
        match self.path2d {
            Some(Path2d::ResNet(_)) => v.push("enc2d."),
            Some(Path2d::Shallow(_)) => v.push("cnn2d."),
            None => {}
        }
        v
    }

    pub fn is_backbone(&self, name: &str) -> bool {
        self.backbone_prefixes().iter().any(|p| name.starts_with(p))
    }

    /// `waves`: `[N, L]` with L = 4000 in the pipeline.
    pub fn encode_1d<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, waves: Var) -> Result<Var> {
        let s = g.shape(waves).to_vec();
        let [n, l] = s[..] else {
            return invalid("encode_1d", format!("expected [N, L], got {s:?}"));
        };
        let min_len = self.cfg.tcn.init_kernel * self.cfg.tcn.init_pool;
        if l < min_len {
            return invalid("encode_1d", format!("input length {l} shorter than {min_len}"));
        }
        let x = g.reshape(waves, &[n, 1, l])?;
        match &self.path1d {
            Path1d::Tcn(t) => t.forward(g, store, x),
            Path1d::Shallow(s) => s.forward(g, store, x),
        }
    }

    /// `specs`: `[N, n_mels, n_frames]`.
    pub fn encode_2d<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, specs: Var) -> Result<Var> {
        let s = g.shape(specs).to_vec();
        let [n, h, w] = s[..] else {
            return invalid("encode_2d", format!("expected [N, mels, frames], got {s:?}"));
        };
        let x = g.reshape(specs, &[n, 1, h, w])?;
        match &self.path2d {
            Some(Path2d::ResNet(r)) => r.forward(g, store, x),
            Some(Path2d::Shallow(r)) => r.forward(g, store, x),
            None => invalid("encode_2d", "model has no spectrogram path"),
        }
    }

    /// Concatenates the available path embeddings along features.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, z1: Var, z2: Option<Var>) -> Result<Var> {
        match (z2, self.cfg.dual_path) {
            (Some(z2), true) => {
                if g.shape(z1) != g.shape(z2) {
                    return invalid("fuse", format!("path shapes differ: {:?} vs {:?}", g.shape(z1), g.shape(z2)));
                }
                Ok(g.concat(&[z1, z2], 1)?)
            }
            (None, false) => Ok(z1),
            _ => invalid("fuse", "path count does not match the configuration"),
        }
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z1: Var, z2: Option<Var>) -> Result<Var> {
        let f = self.features(g, z1, z2)?;
        self.fusion.forward(g, store, f)
    }
}

/// Row-major stacking helpers for building batch tensors.
pub fn stack_waves<T: Scalar>(rows: &[&[f32]]) -> Tensor<T> {
    let l = rows.first().map_or(WINDOW_LEN, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * l);
    for r in rows {
        data.extend(r.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(&[rows.len(), l], data).expect("rows share one length")
}

pub fn stack_specs<T: Scalar>(specs: &[&crate::views::MelSpec]) -> Tensor<T> {
    let (h, w) = specs.first().map_or((N_MELS, MEL_FRAMES), |s| (s.n_mels, s.n_frames));
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for s in specs {
        data.extend(s.bins.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(&[specs.len(), h, w], data).expect("specs share one shape")
}
