//! SA-UNet: a U-shaped encoder/decoder for vessel segmentation.
//!
//! Every convolution block runs 3×3 convolution → DropBlock → batch
//! normalization → ReLU. Encoder stages are separated by 2×2 max pooling, a
//! spatial attention gate sits after the deepest stage, and the decoder
//! mirrors the encoder with stride-2 transposed convolutions and skip
//! concatenation. The final 1×1 convolution plus sigmoid yields per-pixel
//! vessel probabilities.
//!
//! The forward pass is pure: training-mode batch-norm statistics come back
//! as [`BnUpdate`] values that the caller commits explicitly, so a forward
//! never mutates the network. All arithmetic is f64 and deterministic.

mod attention;
mod dropblock;
mod layers;
mod param;

pub use attention::spatial_attention;
pub use dropblock::{dropblock, DropBlockState};
pub use layers::BnUpdate;
pub use param::{Grads, ParamEntry, ParamId, ParamStore};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Predictor, PredictorError};
use crate::seed::{derive_seed, stream_rng};
use attention::{AttnCache, AttnGate};
use dropblock::dropblock_multiplier;
use layers::{
    maxpool2_backward, maxpool2_forward, relu, relu_backward, sigmoid, sigmoid_backward,
    BatchNorm, BnCache, Conv2d, ConvTranspose2,
};

/// Errors from model construction, execution, and checkpointing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {message}")]
    Config { message: String },
    #[error("shape error: {message}")]
    Shape { message: String },
    #[error("checkpoint i/o failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {detail}")]
    CheckpointFormat { path: PathBuf, detail: String },
    #[error("checkpoint does not match this model: {detail}")]
    CheckpointMismatch { detail: String },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SAUNetConfig {
    /// Input channels (3 for RGB fundus images).
    pub in_channels: usize,
    /// Channels at the first encoder stage; doubled at each downsampling.
    pub base_width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// Side length of DropBlock's square drop regions.
    pub dropblock_size: usize,
    /// DropBlock keep probability in (0, 1]; 1 disables dropping.
    pub dropblock_keep_prob: f64,
    /// Kernel size of the spatial attention gate convolution (odd).
    pub attention_kernel: usize,
}

impl Default for SAUNetConfig {
    fn default() -> Self {
        SAUNetConfig {
            in_channels: 3,
            base_width: 16,
            depth: 3,
            dropblock_size: 7,
            dropblock_keep_prob: 0.9,
            attention_kernel: 7,
        }
    }
}

impl SAUNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |message: String| Err(ModelError::Config { message });
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.base_width < 1 {
            return bad("base_width must be at least 1".into());
        }
        if self.dropblock_size == 0 || self.dropblock_size % 2 == 0 {
            return bad(format!(
                "dropblock_size must be odd and at least 1, got {}",
                self.dropblock_size
            ));
        }
        if !(self.dropblock_keep_prob > 0.0 && self.dropblock_keep_prob <= 1.0) {
            return bad(format!(
                "dropblock_keep_prob must lie in (0, 1], got {}",
                self.dropblock_keep_prob
            ));
        }
        if self.attention_kernel == 0 || self.attention_kernel % 2 == 0 {
            return bad(format!(
                "attention_kernel must be odd, got {}",
                self.attention_kernel
            ));
        }
        Ok(())
    }

    /// Channel width at pyramid level `l` (level 0 = full resolution).
    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Execution mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// DropBlock active (seeded), batch-norm uses batch statistics.
    Train { dropblock_seed: u64 },
    /// Deterministic: DropBlock off, batch-norm uses running statistics.
    Eval,
}

impl Mode {
    fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// One "conv block": 3×3 convolution → DropBlock → batch norm → ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    /// Stable index for deriving per-block DropBlock seeds.
    layer_index: u64,
}

struct BlockCache {
    /// DropBlock multiplier (None when DropBlock was inactive).
    mult: Option<Array4<f64>>,
    bn: BnCache,
    /// Block output, cached for the ReLU backward.
    y: Array4<f64>,
}

impl ConvBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        layer_index: u64,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, c_out, 3, rng),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out),
            layer_index,
        }
    }

    fn drop_multiplier(
        &self,
        z: &Array4<f64>,
        cfg: &SAUNetConfig,
        seed: u64,
    ) -> Result<Array4<f64>, ModelError> {
        let (n, c, h, w) = z.dim();
        let mut mult = Array4::zeros((n, c, h, w));
        for nn in 0..n {
            let state = DropBlockState {
                keep_prob: cfg.dropblock_keep_prob,
                block_size: cfg.dropblock_size,
                rng_seed: derive_seed(seed, "dropblock", &[self.layer_index, nn as u64]),
            };
            let m = dropblock_multiplier(c, h, w, &state)?;
            mult.slice_mut(s![nn, .., .., ..]).assign(&m);
        }
        Ok(mult)
    }

    /// Output-only forward (no caches kept; running stats untouched).
    fn forward_light(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        mode: Mode,
        cfg: &SAUNetConfig,
    ) -> Result<Array4<f64>, ModelError> {
        let mut z = self.conv.forward(ps, x);
        if let Mode::Train { dropblock_seed } = mode {
            if cfg.dropblock_keep_prob < 1.0 {
                let mult = self.drop_multiplier(&z, cfg, dropblock_seed)?;
                z = &z * &mult;
            }
        }
        let (z, _, _) = self.bn.forward(ps, &z, mode.is_train());
        Ok(relu(&z))
    }

    /// Forward keeping everything the backward pass needs.
    fn forward_cached(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        mode: Mode,
        cfg: &SAUNetConfig,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array4<f64>, BlockCache), ModelError> {
        let mut z = self.conv.forward(ps, x);
        let mut mult = None;
        if let Mode::Train { dropblock_seed } = mode {
            if cfg.dropblock_keep_prob < 1.0 {
                let m = self.drop_multiplier(&z, cfg, dropblock_seed)?;
                z = &z * &m;
                mult = Some(m);
            }
        }
        let (z, bn_cache, update) = self.bn.forward(ps, &z, mode.is_train());
        if let Some(u) = update {
            updates.push(u);
        }
        let y = relu(&z);
        Ok((
            y.clone(),
            BlockCache {
                mult,
                bn: bn_cache,
                y,
            },
        ))
    }

    /// `x` is the block's forward input (held by the caller, not the cache).
    fn backward(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        cache: &BlockCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let dz = relu_backward(dy, &cache.y);
        let mut dz = self.bn.backward(ps, &cache.bn, &dz, grads);
        if let Some(m) = &cache.mult {
            dz = &dz * m;
        }
        self.conv.backward(ps, x, &dz, grads)
    }
}

/// Two conv blocks in sequence (one U-Net stage).
#[derive(Debug, Clone)]
struct Stage {
    b0: ConvBlock,
    b1: ConvBlock,
}

struct StageCache {
    /// Stage input (the first block's input).
    input: Array4<f64>,
    b0: BlockCache,
    b1: BlockCache,
}

impl Stage {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        next_index: &mut u64,
    ) -> Self {
        let mut take = || {
            let i = *next_index;
            *next_index += 1;
            i
        };
        let i0 = take();
        let i1 = take();
        Stage {
            b0: ConvBlock::new(ps, &format!("{name}.block0"), c_in, c_out, rng, i0),
            b1: ConvBlock::new(ps, &format!("{name}.block1"), c_out, c_out, rng, i1),
        }
    }

    fn forward_light(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        mode: Mode,
        cfg: &SAUNetConfig,
    ) -> Result<Array4<f64>, ModelError> {
        let h = self.b0.forward_light(ps, x, mode, cfg)?;
        self.b1.forward_light(ps, &h, mode, cfg)
    }

    fn forward_cached(
        &self,
        ps: &ParamStore,
        x: &Array4<f64>,
        mode: Mode,
        cfg: &SAUNetConfig,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array4<f64>, StageCache), ModelError> {
        let (h, c0) = self.b0.forward_cached(ps, x, mode, cfg, updates)?;
        let (y, c1) = self.b1.forward_cached(ps, &h, mode, cfg, updates)?;
        Ok((
            y,
            StageCache {
                input: x.clone(),
                b0: c0,
                b1: c1,
            },
        ))
    }

    fn backward(
        &self,
        ps: &ParamStore,
        cache: &StageCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let d1 = self.b1.backward(ps, &cache.b0.y, &cache.b1, dy, grads);
        self.b0.backward(ps, &cache.input, &cache.b0, &d1, grads)
    }
}

/// Concatenate along the channel axis into a standard-layout array (the
/// convolution kernels require contiguous row-major input).
fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., 0..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Everything a backward pass needs from one cached forward.
pub struct NetCache {
    enc: Vec<StageCache>,
    pool_args: Vec<Array4<u8>>,
    bottleneck: StageCache,
    attn: AttnCache,
    attn_out: Array4<f64>,
    /// Decoder stage caches indexed by pyramid level (0 = full resolution).
    dec: Vec<StageCache>,
    prob: Array4<f64>,
}

/// The SA-UNet network: configuration, parameters, and layer wiring.
pub struct SAUNet {
    config: SAUNetConfig,
    params: ParamStore,
    enc: Vec<Stage>,
    bottleneck: Stage,
    attn: AttnGate,
    ups: Vec<ConvTranspose2>,
    dec: Vec<Stage>,
    final_conv: Conv2d,
}

/// Build an SA-UNet with a fixed default initialization seed.
pub fn build_saunet(config: &SAUNetConfig) -> Result<SAUNet, ModelError> {
    SAUNet::new(config.clone(), 0)
}

impl SAUNet {
    /// Build the network with He-normal initial weights drawn from
    /// `init_seed`. Identical config and seed give identical parameters.
    pub fn new(config: SAUNetConfig, init_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(init_seed, "init", &[]);
        let mut block_index = 0u64;
        let mut enc = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let c_in = if l == 0 {
                config.in_channels
            } else {
                config.width(l - 1)
            };
            enc.push(Stage::new(
                &mut ps,
                &format!("enc{l}"),
                c_in,
                config.width(l),
                &mut rng,
                &mut block_index,
            ));
        }
        let bottleneck = Stage::new(
            &mut ps,
            "bottleneck",
            config.width(config.depth - 1),
            config.width(config.depth),
            &mut rng,
            &mut block_index,
        );
        let attn = AttnGate::new(&mut ps, "attn", config.attention_kernel, &mut rng);
        let mut ups = Vec::with_capacity(config.depth);
        let mut dec = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            ups.push(ConvTranspose2::new(
                &mut ps,
                &format!("up{l}"),
                config.width(l + 1),
                config.width(l),
                &mut rng,
            ));
            dec.push(Stage::new(
                &mut ps,
                &format!("dec{l}"),
                2 * config.width(l),
                config.width(l),
                &mut rng,
                &mut block_index,
            ));
        }
        let final_conv = Conv2d::new(&mut ps, "final", config.width(0), 1, 1, &mut rng);
        Ok(SAUNet {
            config,
            params: ps,
            enc,
            bottleneck,
            attn,
            ups,
            dec,
            final_conv,
        })
    }

    pub fn config(&self) -> &SAUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, batch: &Array4<f64>, mode: Mode) -> Result<(), ModelError> {
        let (n, c, h, w) = batch.dim();
        if n == 0 {
            return Err(ModelError::Shape {
                message: "batch must contain at least one sample".into(),
            });
        }
        if c != self.config.in_channels {
            return Err(ModelError::Shape {
                message: format!(
                    "batch has {c} channels but the model expects {}",
                    self.config.in_channels
                ),
            });
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(ModelError::Shape {
                message: format!(
                    "spatial size {h}×{w} must be divisible by 2^depth = {div}"
                ),
            });
        }
        if mode.is_train() && self.config.dropblock_keep_prob < 1.0 {
            let deep_side = h.min(w) >> self.config.depth;
            if self.config.dropblock_size > deep_side {
                return Err(ModelError::Config {
                    message: format!(
                        "dropblock_size {} exceeds the deepest feature side {deep_side} \
                         for input {h}×{w} at depth {}",
                        self.config.dropblock_size, self.config.depth
                    ),
                });
            }
        }
        Ok(())
    }

    /// Forward pass returning only the probability map (N, 1, H, W). No
    /// intermediate state is retained, so this is the cheap path for
    /// prediction; it never mutates the network.
    pub fn forward(&self, batch: &Array4<f64>, mode: Mode) -> Result<Array4<f64>, ModelError> {
        self.check_input(batch, mode)?;
        let ps = &self.params;
        let cfg = &self.config;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut cur = batch.clone();
        for stage in &self.enc {
            let y = stage.forward_light(ps, &cur, mode, cfg)?;
            let (pooled, _) = maxpool2_forward(&y);
            skips.push(y);
            cur = pooled;
        }
        cur = self.bottleneck.forward_light(ps, &cur, mode, cfg)?;
        cur = self.attn.forward(ps, &cur).0;
        for l in (0..cfg.depth).rev() {
            let up = self.ups[l].forward(ps, &cur);
            let cat = concat_channels(&skips[l], &up);
            cur = self.dec[l].forward_light(ps, &cat, mode, cfg)?;
        }
        let logits = self.final_conv.forward(ps, &cur);
        Ok(sigmoid(&logits))
    }

    /// Forward pass that retains every intermediate needed by [`Self::backward`]
    /// and returns the deferred batch-norm updates (empty in eval mode).
    pub fn forward_full(
        &self,
        batch: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, NetCache, Vec<BnUpdate>), ModelError> {
        self.check_input(batch, mode)?;
        let ps = &self.params;
        let cfg = &self.config;
        let mut updates = Vec::new();
        let mut enc_caches = Vec::with_capacity(cfg.depth);
        let mut pool_args = Vec::with_capacity(cfg.depth);
        let mut cur = batch.clone();
        for stage in &self.enc {
            let (y, cache) = stage.forward_cached(ps, &cur, mode, cfg, &mut updates)?;
            let (pooled, args) = maxpool2_forward(&y);
            enc_caches.push(cache);
            pool_args.push(args);
            cur = pooled;
        }
        let (bl_out, bl_cache) = self
            .bottleneck
            .forward_cached(ps, &cur, mode, cfg, &mut updates)?;
        let (attn_out, attn_cache) = self.attn.forward(ps, &bl_out);
        let mut dec_caches: Vec<Option<StageCache>> = (0..cfg.depth).map(|_| None).collect();
        let mut cur = attn_out.clone();
        for l in (0..cfg.depth).rev() {
            let up = self.ups[l].forward(ps, &cur);
            let cat = concat_channels(&enc_caches[l].b1.y, &up);
            let (y, cache) = self.dec[l].forward_cached(ps, &cat, mode, cfg, &mut updates)?;
            dec_caches[l] = Some(cache);
            cur = y;
        }
        let logits = self.final_conv.forward(ps, &cur);
        let prob = sigmoid(&logits);
        let cache = NetCache {
            enc: enc_caches,
            pool_args,
            bottleneck: bl_cache,
            attn: attn_cache,
            attn_out,
            dec: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
            prob: prob.clone(),
        };
        Ok((prob, cache, updates))
    }

    /// Backpropagate `d_prob` (gradient of the loss w.r.t. the probability
    /// map) through the cached forward, returning parameter gradients.
    pub fn backward(&self, cache: &NetCache, d_prob: &Array4<f64>) -> Grads {
        let ps = &self.params;
        let cfg = &self.config;
        let mut grads = Grads::zeros_like(ps);
        let dz = sigmoid_backward(d_prob, &cache.prob);
        let mut d = self
            .final_conv
            .backward(ps, &cache.dec[0].b1.y, &dz, &mut grads);
        let mut d_skips: Vec<Option<Array4<f64>>> = (0..cfg.depth).map(|_| None).collect();
        for l in 0..cfg.depth {
            let d_cat = self.dec[l].backward(ps, &cache.dec[l], &d, &mut grads);
            let w_l = cfg.width(l);
            let d_skip = d_cat.slice(s![.., 0..w_l, .., ..]).to_owned();
            let d_up = d_cat.slice(s![.., w_l.., .., ..]).to_owned();
            d_skips[l] = Some(d_skip);
            let up_input = if l + 1 == cfg.depth {
                &cache.attn_out
            } else {
                &cache.dec[l + 1].b1.y
            };
            d = self.ups[l].backward(ps, up_input, &d_up, &mut grads);
        }
        d = self
            .attn
            .backward(ps, &cache.bottleneck.b1.y, &cache.attn, &d, &mut grads);
        d = self.bottleneck.backward(ps, &cache.bottleneck, &d, &mut grads);
        for l in (0..cfg.depth).rev() {
            let enc_out_dim = cache.enc[l].b1.y.dim();
            let mut d_enc = maxpool2_backward(&d, &cache.pool_args[l], enc_out_dim);
            d_enc += d_skips[l].as_ref().expect("filled in decoder loop");
            d = self.enc[l].backward(ps, &cache.enc[l], &d_enc, &mut grads);
        }
        grads
    }

    /// Fold deferred batch-norm statistics into the running estimates.
    pub fn commit_bn(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            BatchNorm::commit(&mut self.params, u, BatchNorm::MOMENTUM);
        }
    }

    /// Convert an (H, W, C) image to the (1, C, H, W) batch layout.
    pub fn batch_from_image(&self, image: &Array3<f64>) -> Result<Array4<f64>, ModelError> {
        let (h, w, c) = image.dim();
        if c != self.config.in_channels {
            return Err(ModelError::Shape {
                message: format!(
                    "image has {c} channels but the model expects {}",
                    self.config.in_channels
                ),
            });
        }
        let mut batch = Array4::zeros((1, c, h, w));
        for y in 0..h {
            for x in 0..w {
                for cc in 0..c {
                    batch[[0, cc, y, x]] = image[[y, x, cc]];
                }
            }
        }
        Ok(batch)
    }
}

impl Predictor for SAUNet {
    fn predict(&self, image: &Array3<f64>) -> Result<Array2<f64>, PredictorError> {
        let batch = self.batch_from_image(image)?;
        let prob = self.forward(&batch, Mode::Eval)?;
        Ok(prob.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }
}

/// JSON sidecar stored next to each parameter checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: SAUNetConfig,
    pub epoch: usize,
    pub rng_seed: u64,
    /// Snapshot of whichever metrics justified saving this checkpoint.
    pub metrics: BTreeMap<String, f64>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Path of the JSON sidecar accompanying a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

impl SAUNet {
    /// Write parameters (binary) plus a JSON sidecar describing them. The
    /// sidecar's config is always taken from the network itself.
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for entry in self.params.entries() {
            buf.extend_from_slice(&(entry.name.len() as u64).to_le_bytes());
            buf.extend_from_slice(entry.name.as_bytes());
            buf.push(entry.trainable as u8);
            buf.extend_from_slice(&(entry.value.ndim() as u64).to_le_bytes());
            for d in entry.value.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in entry.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(io_err)?;
        let sidecar = CheckpointMeta {
            config: self.config.clone(),
            ..meta.clone()
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
        std::fs::write(sidecar_path(path), json).map_err(|source| ModelError::Io {
            path: sidecar_path(path),
            source,
        })
    }

    /// Rebuild a network from a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<(SAUNet, CheckpointMeta), ModelError> {
        let side = sidecar_path(path);
        let side_bytes = std::fs::read(&side).map_err(|source| ModelError::Io {
            path: side.clone(),
            source,
        })?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&side_bytes).map_err(|e| ModelError::CheckpointFormat {
                path: side.clone(),
                detail: format!("sidecar is not valid checkpoint metadata: {e}"),
            })?;
        let mut net = SAUNet::new(meta.config.clone(), 0)?;

        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let format_err = |detail: String| ModelError::CheckpointFormat {
            path: path.to_path_buf(),
            detail,
        };
        fn take<'a>(
            bytes: &'a [u8],
            pos: &mut usize,
            n: usize,
            path: &Path,
        ) -> Result<&'a [u8], ModelError> {
            if *pos + n > bytes.len() {
                return Err(ModelError::CheckpointFormat {
                    path: path.to_path_buf(),
                    detail: format!("unexpected end of file at byte {}", *pos),
                });
            }
            let out = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(out)
        }
        fn take_u64(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<u64, ModelError> {
            Ok(u64::from_le_bytes(
                take(bytes, pos, 8, path)?.try_into().expect("8 bytes"),
            ))
        }
        let mut pos = 0usize;
        if take(&bytes, &mut pos, 8, path)? != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic header".into()));
        }
        let version = u32::from_le_bytes(
            take(&bytes, &mut pos, 4, path)?
                .try_into()
                .expect("4 bytes"),
        );
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = take_u64(&bytes, &mut pos, path)? as usize;
        if count != net.params.len() {
            return Err(ModelError::CheckpointMismatch {
                detail: format!(
                    "checkpoint holds {count} tensors but the config implies {}",
                    net.params.len()
                ),
            });
        }
        for i in 0..count {
            let name_len = take_u64(&bytes, &mut pos, path)? as usize;
            let name = String::from_utf8(take(&bytes, &mut pos, name_len, path)?.to_vec())
                .map_err(|_| format_err(format!("tensor {i} has a non-UTF-8 name")))?;
            let trainable = take(&bytes, &mut pos, 1, path)?[0] != 0;
            let ndim = take_u64(&bytes, &mut pos, path)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(take_u64(&bytes, &mut pos, path)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(
                    take(&bytes, &mut pos, 8, path)?.try_into().expect("8 bytes"),
                ));
            }
            let expect = &net.params.entries()[i];
            if expect.name != name
                || expect.trainable != trainable
                || expect.value.shape() != shape.as_slice()
            {
                return Err(ModelError::CheckpointMismatch {
                    detail: format!(
                        "tensor {i}: checkpoint has {name} {shape:?} (trainable={trainable}), \
                         model expects {} {:?} (trainable={})",
                        expect.name,
                        expect.value.shape(),
                        expect.trainable
                    ),
                });
            }
            let arr = ndarray::ArrayD::from_shape_vec(shape, data).expect("sizes agree");
            *net.params.get_mut(i) = arr;
        }
        if pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - pos
            )));
        }
        Ok((net, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> SAUNetConfig {
        SAUNetConfig {
            in_channels: 3,
            base_width: 1,
            depth: 1,
            dropblock_size: 3,
            dropblock_keep_prob: 0.9,
            attention_kernel: 3,
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SAUNetConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            SAUNetConfig { depth: 0, ..base.clone() },
            SAUNetConfig { base_width: 0, ..base.clone() },
            SAUNetConfig { in_channels: 0, ..base.clone() },
            SAUNetConfig { dropblock_size: 4, ..base.clone() },
            SAUNetConfig { dropblock_size: 0, ..base.clone() },
            SAUNetConfig { dropblock_keep_prob: 0.0, ..base.clone() },
            SAUNetConfig { dropblock_keep_prob: 1.5, ..base.clone() },
            SAUNetConfig { attention_kernel: 4, ..base.clone() },
        ] {
            assert!(
                matches!(build_saunet(&bad), Err(ModelError::Config { .. })),
                "config {bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn hand_enumerated_parameter_count_for_minimal_net() {
        // depth=1, base_width=1, in=3, attention kernel 3.
        //  enc0.block0: conv 3→1 (27 w + 1 b) + bn (2)          = 30
        //  enc0.block1: conv 1→1 (9 + 1) + bn (2)               = 12
        //  bottleneck.block0: conv 1→2 (18 + 2) + bn (4)        = 24
        //  bottleneck.block1: conv 2→2 (36 + 2) + bn (4)        = 42
        //  attn: conv 2→1 3×3 (18 + 1)                          = 19
        //  up0: convT 2→1 2×2 (8 + 1)                           = 9
        //  dec0.block0: conv 2→1 (18 + 1) + bn (2)              = 21
        //  dec0.block1: conv 1→1 (9 + 1) + bn (2)               = 12
        //  final: conv 1→1 1×1 (1 + 1)                          = 2
        let net = build_saunet(&tiny_config()).expect("valid config");
        assert_eq!(net.trainable_parameter_count(), 171);
    }

    /// Classic U-Net trainable weights (two plain 3×3 convs per stage, no
    /// batch norm, transposed-conv upsampling, 1×1 head), for comparison.
    fn classic_unet_count(in_channels: usize, base: usize, depth: usize) -> usize {
        let w = |l: usize| base << l;
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let mut total = 0;
        for l in 0..depth {
            let ci = if l == 0 { in_channels } else { w(l - 1) };
            total += conv(ci, w(l), 3) + conv(w(l), w(l), 3);
        }
        total += conv(w(depth - 1), w(depth), 3) + conv(w(depth), w(depth), 3);
        for l in 0..depth {
            total += w(l + 1) * w(l) * 4 + w(l); // 2×2 transposed conv
            total += conv(2 * w(l), w(l), 3) + conv(w(l), w(l), 3);
        }
        total + conv(base, 1, 1)
    }

    #[test]
    fn fewer_parameters_than_classic_unet() {
        let cfg = SAUNetConfig {
            base_width: 16,
            depth: 3,
            ..SAUNetConfig::default()
        };
        let net = build_saunet(&cfg).expect("valid config");
        let classic = classic_unet_count(3, 64, 3);
        assert!(
            net.trainable_parameter_count() < classic,
            "SA-UNet ({}) should be smaller than classic U-Net ({classic})",
            net.trainable_parameter_count()
        );
    }

    #[test]
    fn forward_shapes_and_sigmoid_range() {
        let cfg = SAUNetConfig {
            base_width: 2,
            depth: 2,
            dropblock_size: 1,
            attention_kernel: 3,
            ..SAUNetConfig::default()
        };
        let net = build_saunet(&cfg).expect("valid config");
        let x = Array4::zeros((2, 3, 8, 8));
        let y = net.forward(&x, Mode::Eval).expect("clean forward");
        assert_eq!(y.dim(), (2, 1, 8, 8), "one channel, spatial size kept");
        assert!(
            y.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0),
            "outputs must stay inside the open sigmoid range"
        );
    }

    #[test]
    fn indivisible_input_fails_fast() {
        let net = build_saunet(&SAUNetConfig {
            depth: 2,
            base_width: 1,
            attention_kernel: 3,
            ..SAUNetConfig::default()
        })
        .unwrap();
        let x = Array4::zeros((1, 3, 10, 8));
        match net.forward(&x, Mode::Eval) {
            Err(ModelError::Shape { message }) => {
                assert!(message.contains("divisible"), "got: {message}")
            }
            other => panic!("expected shape error, got {other:?}", other = other.map(|_| ())),
        }
        let wrong_channels = Array4::zeros((1, 2, 8, 8));
        assert!(net.forward(&wrong_channels, Mode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_seeds_differ() {
        let cfg = SAUNetConfig {
            base_width: 2,
            depth: 1,
            dropblock_size: 3,
            dropblock_keep_prob: 0.5,
            attention_kernel: 3,
            ..SAUNetConfig::default()
        };
        let net = build_saunet(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((1, 3, 12, 12), |_| rng.random_range(0.0..1.0));
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b, "eval forward must be a pure function of inputs");
        let t1 = net
            .forward(&x, Mode::Train { dropblock_seed: 1 })
            .unwrap();
        let t2 = net
            .forward(&x, Mode::Train { dropblock_seed: 2 })
            .unwrap();
        assert_ne!(t1, t2, "different DropBlock seeds should change outputs");
        let t1b = net
            .forward(&x, Mode::Train { dropblock_seed: 1 })
            .unwrap();
        assert_eq!(t1, t1b, "train forward is deterministic given its seed");
    }

    #[test]
    fn identical_build_seeds_give_identical_parameters() {
        let cfg = tiny_config();
        let a = SAUNet::new(cfg.clone(), 7).unwrap();
        let b = SAUNet::new(cfg.clone(), 7).unwrap();
        assert_eq!(a.params().state_hash(), b.params().state_hash());
        let c = SAUNet::new(cfg, 8).unwrap();
        assert_ne!(a.params().state_hash(), c.params().state_hash());
    }

    #[test]
    fn commit_bn_moves_running_statistics() {
        let cfg = tiny_config();
        let mut net = SAUNet::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0..1.0));
        let before = net.forward(&x, Mode::Eval).unwrap();
        let (_, _, updates) = net
            .forward_full(&x, Mode::Train { dropblock_seed: 0 })
            .unwrap();
        assert!(!updates.is_empty(), "train forward must emit BN updates");
        let hash_before = net.params().state_hash();
        net.commit_bn(&updates);
        assert_ne!(
            hash_before,
            net.params().state_hash(),
            "committing BN updates must change running statistics"
        );
        let after = net.forward(&x, Mode::Eval).unwrap();
        assert_ne!(before, after, "eval outputs should move with the stats");
    }

    #[test]
    fn whole_net_backward_matches_finite_differences() {
        // Surrogate loss L = Σ prob ⊙ R exercises the full backward chain.
        let cfg = SAUNetConfig {
            in_channels: 2,
            base_width: 2,
            depth: 1,
            dropblock_size: 1,
            dropblock_keep_prob: 1.0,
            attention_kernel: 3,
        };
        let net = SAUNet::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((1, 2, 6, 6), |_| rng.random_range(-0.5..0.5));
        let r = Array4::from_shape_fn((1, 1, 6, 6), |_| rng.random_range(-1.0..1.0));
        let (_, cache, _) = net.forward_full(&x, Mode::Eval).unwrap();
        let grads = net.backward(&cache, &r);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in 0..net.params().len() {
            if !net.params().entries()[id].trainable {
                continue;
            }
            let len = net.params().get(id).len();
            // Probe a few entries of each tensor.
            for flat in [0, len / 2, len - 1] {
                let analytic = grads.get(id).as_slice().unwrap()[flat];
                let mut net_m = SAUNet::new(net.config().clone(), 5).unwrap();
                // Copy current params, perturb one entry.
                for pid in 0..net.params().len() {
                    *net_m.params_mut().get_mut(pid) = net.params().get(pid).clone();
                }
                let orig = net_m.params().get(id).as_slice().unwrap()[flat];
                net_m.params_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
                let up = (&net_m.forward(&x, Mode::Eval).unwrap() * &r).sum();
                net_m.params_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
                let down = (&net_m.forward(&x, Mode::Eval).unwrap() * &r).sum();
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-3,
                    "param {} entry {flat}: analytic {analytic} vs numeric {numeric} (rel {rel})",
                    net.params().entries()[id].name
                );
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().expect("temp dir");
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let mut net = SAUNet::new(cfg, 11).unwrap();
        // Move BN stats so non-trainable state is exercised too.
        let x = Array4::from_elem((1, 3, 8, 8), 0.3);
        let (_, _, updates) = net
            .forward_full(&x, Mode::Train { dropblock_seed: 0 })
            .unwrap();
        net.commit_bn(&updates);
        let meta = CheckpointMeta {
            config: net.config().clone(),
            epoch: 17,
            rng_seed: 99,
            metrics: [("f1".to_string(), 0.5)].into_iter().collect(),
        };
        net.save_checkpoint(&path, &meta).expect("save succeeds");
        let (loaded, meta2) = SAUNet::load_checkpoint(&path).expect("load succeeds");
        assert_eq!(meta2.epoch, 17);
        assert_eq!(meta2.rng_seed, 99);
        assert_eq!(meta2.metrics["f1"], 0.5);
        assert_eq!(
            net.params().state_hash(),
            loaded.params().state_hash(),
            "round-trip must preserve every tensor bit"
        );
        let y1 = net.forward(&x, Mode::Eval).unwrap();
        let y2 = loaded.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn corrupt_checkpoints_are_reported() {
        let dir = tempfile::tempdir().expect("temp dir");
        let path = dir.path().join("model.ckpt");
        let net = SAUNet::new(tiny_config(), 0).unwrap();
        let meta = CheckpointMeta {
            config: net.config().clone(),
            epoch: 0,
            rng_seed: 0,
            metrics: BTreeMap::new(),
        };
        net.save_checkpoint(&path, &meta).unwrap();
        // Truncate the binary.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match SAUNet::load_checkpoint(&path) {
            Err(ModelError::CheckpointFormat { detail, .. }) => {
                assert!(detail.contains("end of file"), "got: {detail}")
            }
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
        // Missing sidecar.
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(
            SAUNet::load_checkpoint(&path),
            Err(ModelError::Io { .. })
        ));
    }

    #[test]
    fn predictor_trait_produces_probability_maps() {
        let net = build_saunet(&tiny_config()).unwrap();
        let img = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            0.1 + 0.05 * (y + x) as f64 + 0.01 * c as f64
        });
        let prob = net.predict(&img).expect("prediction succeeds");
        assert_eq!(prob.dim(), (8, 8));
        assert!(prob.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
