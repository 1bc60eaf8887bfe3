//! Configurable encoder-decoder segmentation model with skip connections
//! and an optional residual self-attention bottleneck, plus loss, gradients,
//! the Adam optimizer, and checkpoint serialization.
//!
//! All math is f64 and single-threaded per model instance, so forward and
//! backward results are bit-reproducible for a fixed seed.

mod adam;
mod checkpoint;
mod layers;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{ParamMut, ParamRef};

use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::data::NUM_CLASSES;
use crate::error::{CoreError, Result};
use layers::{concat_channels, split_channels, upsample2, upsample2_backward, Conv2d, MaxPool2, SelfAttention};

use rand::SeedableRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub attention_bottleneck: bool,
    pub attention_heads: usize,
    pub input_size: (usize, usize),
}

impl ModelConfig {
    pub fn from_section(s: &ModelSection) -> Self {
        ModelConfig {
            depth: s.depth,
            base_channels: s.base_channels,
            num_classes: NUM_CLASSES,
            attention_bottleneck: s.attention,
            attention_heads: s.attention_heads,
            input_size: (s.input[0], s.input[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(CoreError::Config("model depth must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(CoreError::Config("base_channels must be >= 1".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(CoreError::Config(format!(
                "num_classes must be {NUM_CLASSES}"
            )));
        }
        let div = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::Config(format!(
                "input size ({h}, {w}) must be divisible by 2^depth = {div}"
            )));
        }
        if self.attention_bottleneck {
            let cb = self.base_channels << self.depth;
            if self.attention_heads == 0 || cb % self.attention_heads != 0 {
                return Err(CoreError::Config(format!(
                    "bottleneck channels {cb} not divisible by {} attention heads",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

struct EncLevel {
    conv1: Conv2d,
    conv2: Conv2d,
    pool: MaxPool2,
}

struct DecLevel {
    conv1: Conv2d,
    conv2: Conv2d,
    skip_channels: usize,
}

/// Per-pixel class probabilities, shaped (batch, H, W, num_classes).
#[derive(Debug, Clone)]
pub struct PredictionMap {
    pub probs: Array4<f64>,
}

impl PredictionMap {
    pub fn argmax_labels(&self) -> Array3<u8> {
        let (bsz, h, w, k) = self.probs.dim();
        Array3::from_shape_fn((bsz, h, w), |(b, u, v)| {
            let mut best = 0usize;
            let mut best_p = self.probs[[b, u, v, 0]];
            for c in 1..k {
                let p = self.probs[[b, u, v, c]];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            best as u8
        })
    }
}

pub struct SegNet {
    config: ModelConfig,
    enc: Vec<EncLevel>,
    bott1: Conv2d,
    bott2: Conv2d,
    attn: Option<SelfAttention>,
    dec: Vec<DecLevel>,
    head: Conv2d,
    /// Skip activations cached by the last forward, consumed by backward.
    skips: Vec<Array4<f64>>,
}

impl SegNet {
    /// Builds a model with fan-in-scaled uniform weights and zero biases,
    /// deterministically from the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<SegNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = config.base_channels;
        let mut enc = Vec::with_capacity(config.depth);
        let mut cin = 1usize;
        for level in 0..config.depth {
            let c = base << level;
            enc.push(EncLevel {
                conv1: Conv2d::new(&format!("enc{level}.conv1"), cin, c, 3, true, &mut rng),
                conv2: Conv2d::new(&format!("enc{level}.conv2"), c, c, 3, true, &mut rng),
                pool: MaxPool2::new(),
            });
            cin = c;
        }
        let cb = base << config.depth;
        let bott1 = Conv2d::new("bottleneck.conv1", cin, cb, 3, true, &mut rng);
        let bott2 = Conv2d::new("bottleneck.conv2", cb, cb, 3, true, &mut rng);
        let attn = if config.attention_bottleneck {
            Some(SelfAttention::new(
                "bottleneck.attention",
                cb,
                config.attention_heads,
                &mut rng,
            ))
        } else {
            None
        };
        let mut dec = Vec::with_capacity(config.depth);
        let mut prev = cb;
        for level in (0..config.depth).rev() {
            let c = base << level;
            dec.push(DecLevel {
                conv1: Conv2d::new(&format!("dec{level}.conv1"), prev + c, c, 3, true, &mut rng),
                conv2: Conv2d::new(&format!("dec{level}.conv2"), c, c, 3, true, &mut rng),
                skip_channels: c,
            });
            prev = c;
        }
        let head = Conv2d::with_init_scale("head", base, config.num_classes, 1, false, 0.1, &mut rng);
        Ok(SegNet {
            config: config.clone(),
            enc,
            bott1,
            bott2,
            attn,
            dec,
            head,
            skips: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Runs the network on a batch of single-channel images (B, H, W) and
    /// returns per-pixel class probabilities. Activations are cached for a
    /// following `backward`.
    pub fn forward(&mut self, images: &Array4<f64>) -> Result<PredictionMap> {
        let (bsz, cin, h, w) = images.dim();
        if cin != 1 || (h, w) != self.config.input_size {
            return Err(CoreError::ShapeMismatch(format!(
                "expected (B, 1, {}, {}), got {:?}",
                self.config.input_size.0,
                self.config.input_size.1,
                images.dim()
            )));
        }
        let mut x = images.clone();
        self.skips.clear();
        for level in self.enc.iter_mut() {
            let a = level.conv1.forward(&x);
            let a = level.conv2.forward(&a);
            self.skips.push(a.clone());
            x = level.pool.forward(&a);
        }
        x = self.bott1.forward(&x);
        x = self.bott2.forward(&x);
        if let Some(attn) = self.attn.as_mut() {
            x = attn.forward(&x);
        }
        for (i, level) in self.dec.iter_mut().enumerate() {
            let up = upsample2(&x);
            let skip = &self.skips[self.enc.len() - 1 - i];
            let cat = concat_channels(&up, skip);
            let a = level.conv1.forward(&cat);
            x = level.conv2.forward(&a);
        }
        let logits = self.head.forward(&x);
        // Per-pixel softmax, numerically stabilized.
        let k = self.config.num_classes;
        let mut probs = Array4::<f64>::zeros((bsz, h, w, k));
        for b in 0..bsz {
            for u in 0..h {
                for v in 0..w {
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..k {
                        max = max.max(logits[[b, c, u, v]]);
                    }
                    let mut sum = 0.0;
                    for c in 0..k {
                        let e = (logits[[b, c, u, v]] - max).exp();
                        probs[[b, u, v, c]] = e;
                        sum += e;
                    }
                    for c in 0..k {
                        probs[[b, u, v, c]] /= sum;
                    }
                }
            }
        }
        Ok(PredictionMap { probs })
    }

    /// Backpropagates a gradient w.r.t. the logits (B, K, H, W), accumulating
    /// parameter gradients. Must follow the matching `forward`.
    pub fn backward(&mut self, dlogits: &Array4<f64>) {
        let mut g = self.head.backward(dlogits);
        let n_enc = self.enc.len();
        for (i, level) in self.dec.iter_mut().enumerate().rev() {
            let g1 = level.conv2.backward(&g);
            let gcat = level.conv1.backward(&g1);
            let (_, c, _, _) = gcat.dim();
            let (gup, gskip) = split_channels(&gcat, c - level.skip_channels);
            // Skip gradient joins the encoder path at the matching level.
            self.skips[n_enc - 1 - i] = gskip;
            g = upsample2_backward(&gup);
        }
        if let Some(attn) = self.attn.as_mut() {
            g = attn.backward(&g);
        }
        g = self.bott2.backward(&g);
        g = self.bott1.backward(&g);
        for (i, level) in self.enc.iter_mut().enumerate().rev() {
            let mut ga = level.pool.backward(&g);
            ga += &self.skips[i];
            let g1 = level.conv2.backward(&ga);
            g = level.conv1.backward(&g1);
        }
        self.skips.clear();
    }

    pub fn zero_grad(&mut self) {
        for level in self.enc.iter_mut() {
            level.conv1.zero_grad();
            level.conv2.zero_grad();
        }
        self.bott1.zero_grad();
        self.bott2.zero_grad();
        if let Some(attn) = self.attn.as_mut() {
            attn.zero_grad();
        }
        for level in self.dec.iter_mut() {
            level.conv1.zero_grad();
            level.conv2.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for level in &self.enc {
            out.extend(level.conv1.params());
            out.extend(level.conv2.params());
        }
        out.extend(self.bott1.params());
        out.extend(self.bott2.params());
        if let Some(attn) = &self.attn {
            out.extend(attn.params());
        }
        for level in &self.dec {
            out.extend(level.conv1.params());
            out.extend(level.conv2.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for level in self.enc.iter_mut() {
            out.extend(level.conv1.params_mut());
            out.extend(level.conv2.params_mut());
        }
        out.extend(self.bott1.params_mut());
        out.extend(self.bott2.params_mut());
        if let Some(attn) = self.attn.as_mut() {
            out.extend(attn.params_mut());
        }
        for level in self.dec.iter_mut() {
            out.extend(level.conv1.params_mut());
            out.extend(level.conv2.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Sum of absolute values over all parameters.
    pub fn l1_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.value.iter().map(|x| x.abs()).sum::<f64>())
            .sum()
    }
}

/// Mean over batch and pixels of `-log p(true class)`, with a 1e-12
/// probability floor before the log.
pub fn cross_entropy_loss(pred: &PredictionMap, labels: &Array3<u8>) -> Result<f64> {
    let (bsz, h, w, k) = pred.probs.dim();
    if labels.dim() != (bsz, h, w) {
        return Err(CoreError::ShapeMismatch(format!(
            "probs {:?} vs labels {:?}",
            pred.probs.dim(),
            labels.dim()
        )));
    }
    let mut total = 0.0;
    for b in 0..bsz {
        for u in 0..h {
            for v in 0..w {
                let y = labels[[b, u, v]] as usize;
                if y >= k {
                    return Err(CoreError::LabelOutOfRange {
                        label: labels[[b, u, v]],
                        num_classes: k,
                    });
                }
                let p = pred.probs[[b, u, v, y]].max(1e-12);
                total -= p.ln();
            }
        }
    }
    Ok(total / (bsz * h * w) as f64)
}

/// Gradient of the mean cross-entropy w.r.t. the logits: (p - onehot) / N,
/// shaped (B, K, H, W) for `SegNet::backward`.
pub fn cross_entropy_grad(pred: &PredictionMap, labels: &Array3<u8>) -> Result<Array4<f64>> {
    let (bsz, h, w, k) = pred.probs.dim();
    if labels.dim() != (bsz, h, w) {
        return Err(CoreError::ShapeMismatch(format!(
            "probs {:?} vs labels {:?}",
            pred.probs.dim(),
            labels.dim()
        )));
    }
    let n = (bsz * h * w) as f64;
    let mut g = Array4::<f64>::zeros((bsz, k, h, w));
    for b in 0..bsz {
        for u in 0..h {
            for v in 0..w {
                let y = labels[[b, u, v]] as usize;
                if y >= k {
                    return Err(CoreError::LabelOutOfRange {
                        label: labels[[b, u, v]],
                        num_classes: k,
                    });
                }
                for c in 0..k {
                    let p = pred.probs[[b, u, v, c]];
                    g[[b, c, u, v]] = (p - if c == y { 1.0 } else { 0.0 }) / n;
                }
            }
        }
    }
    Ok(g)
}
