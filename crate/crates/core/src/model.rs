//! Causal decoder-only sequence model over trajectory tokens: parameter
//! blocks, deterministic initialization, and block-wise traversal used by
//! the optimizer and the finite-difference checks.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output vocabulary size (bins per scalar field).
    pub vocab: usize,
    /// Maximum sequence length in tokens.
    pub context: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: minutes-scale training while exercising every mechanism.
    pub fn small(vocab: usize, context: usize, seed: u64) -> Self {
        Self {
            vocab,
            context,
            width: 96,
            layers: 3,
            heads: 4,
            ff_width: 384,
            dropout: 0.1,
            init_scale: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.context == 0 {
            return Err(Error::Config("context must be positive".into()));
        }
        if self.layers == 0 || self.ff_width == 0 {
            return Err(Error::Config("layers and ff_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Internal id of the sequence-start token fed at position 0.
    pub fn start_token(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// [width, ff_width]
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// [ff_width, width]
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All learned weights. Also reused as the container for gradients and
/// Adam moments, which mirror parameter shapes exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// [vocab + 1, width]; the extra row embeds the sequence-start token.
    pub tok_emb: Array2<f64>,
    /// [context, width], learned.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// [width, vocab]
    pub head: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; u1 in (0, 1] to avoid ln(0)
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gaussian(rng, std))
}

impl ModelParams {
    /// Weights from a zero-mean Gaussian at the configured scale, biases zero,
    /// layer-norm gains one. Deterministic in the config seed.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::substream(cfg.seed, "init");
        let w = cfg.width;
        let s = cfg.init_scale;
        let tok_emb = gaussian_matrix(&mut rng, cfg.vocab + 1, w, s);
        let pos_emb = gaussian_matrix(&mut rng, cfg.context, w, s);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                ln1_g: Array1::ones(w),
                ln1_b: Array1::zeros(w),
                wq: gaussian_matrix(&mut rng, w, w, s),
                bq: Array1::zeros(w),
                wk: gaussian_matrix(&mut rng, w, w, s),
                bk: Array1::zeros(w),
                wv: gaussian_matrix(&mut rng, w, w, s),
                bv: Array1::zeros(w),
                wo: gaussian_matrix(&mut rng, w, w, s),
                bo: Array1::zeros(w),
                ln2_g: Array1::ones(w),
                ln2_b: Array1::zeros(w),
                w1: gaussian_matrix(&mut rng, w, cfg.ff_width, s),
                b1: Array1::zeros(cfg.ff_width),
                w2: gaussian_matrix(&mut rng, cfg.ff_width, w, s),
                b2: Array1::zeros(w),
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(w),
            lnf_b: Array1::zeros(w),
            head: gaussian_matrix(&mut rng, w, cfg.vocab, s),
        })
    }

    /// Same shapes, all zero. Gradient and moment containers start here.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut b) in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Named views over every parameter block, in a fixed traversal order.
    pub fn blocks(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("tok_emb".into(), self.tok_emb.view().into_dyn()),
            ("pos_emb".into(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), l.ln1_g.view().into_dyn()));
            out.push((format!("layer{i}.ln1_b"), l.ln1_b.view().into_dyn()));
            out.push((format!("layer{i}.wq"), l.wq.view().into_dyn()));
            out.push((format!("layer{i}.bq"), l.bq.view().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view().into_dyn()));
            out.push((format!("layer{i}.bk"), l.bk.view().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view().into_dyn()));
            out.push((format!("layer{i}.bv"), l.bv.view().into_dyn()));
            out.push((format!("layer{i}.wo"), l.wo.view().into_dyn()));
            out.push((format!("layer{i}.bo"), l.bo.view().into_dyn()));
            out.push((format!("layer{i}.ln2_g"), l.ln2_g.view().into_dyn()));
            out.push((format!("layer{i}.ln2_b"), l.ln2_b.view().into_dyn()));
            out.push((format!("layer{i}.w1"), l.w1.view().into_dyn()));
            out.push((format!("layer{i}.b1"), l.b1.view().into_dyn()));
            out.push((format!("layer{i}.w2"), l.w2.view().into_dyn()));
            out.push((format!("layer{i}.b2"), l.b2.view().into_dyn()));
        }
        out.push(("lnf_g".into(), self.lnf_g.view().into_dyn()));
        out.push(("lnf_b".into(), self.lnf_b.view().into_dyn()));
        out.push(("head".into(), self.head.view().into_dyn()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            ("tok_emb".into(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".into(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_g"), l.ln1_g.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln1_b"), l.ln1_b.view_mut().into_dyn()));
            out.push((format!("layer{i}.wq"), l.wq.view_mut().into_dyn()));
            out.push((format!("layer{i}.bq"), l.bq.view_mut().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view_mut().into_dyn()));
            out.push((format!("layer{i}.bk"), l.bk.view_mut().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view_mut().into_dyn()));
            out.push((format!("layer{i}.bv"), l.bv.view_mut().into_dyn()));
            out.push((format!("layer{i}.wo"), l.wo.view_mut().into_dyn()));
            out.push((format!("layer{i}.bo"), l.bo.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln2_g"), l.ln2_g.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln2_b"), l.ln2_b.view_mut().into_dyn()));
            out.push((format!("layer{i}.w1"), l.w1.view_mut().into_dyn()));
            out.push((format!("layer{i}.b1"), l.b1.view_mut().into_dyn()));
            out.push((format!("layer{i}.w2"), l.w2.view_mut().into_dyn()));
            out.push((format!("layer{i}.b2"), l.b2.view_mut().into_dyn()));
        }
        out.push(("lnf_g".into(), self.lnf_g.view_mut().into_dyn()));
        out.push(("lnf_b".into(), self.lnf_b.view_mut().into_dyn()));
        out.push(("head".into(), self.head.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Euclidean norm over all blocks.
    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// First non-finite block name, if any.
    pub fn find_non_finite(&self) -> Option<String> {
        self.blocks()
            .iter()
            .find(|(_, b)| b.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name.clone())
    }
}

/// A config plus its parameters, with forward-pass instrumentation.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    /// Full-sequence forward passes executed (training or teacher-forcing).
    pub full_forwards: std::sync::atomic::AtomicU64,
    /// Single-position incremental decode steps executed.
    pub decode_steps: std::sync::atomic::AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_parts(self.cfg.clone(), self.params.clone())
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg)?;
        Ok(Self::from_parts(cfg, params))
    }

    pub fn from_parts(cfg: ModelConfig, params: ModelParams) -> Self {
        Self {
            cfg,
            params,
            full_forwards: std::sync::atomic::AtomicU64::new(0),
            decode_steps: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn count_full_forwards(&self) -> u64 {
        self.full_forwards.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn count_decode_steps(&self) -> u64 {
        self.decode_steps.load(std::sync::atomic::Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64, scale: f64) -> ModelConfig {
        ModelConfig {
            vocab: 7,
            context: 12,
            width: 4,
            layers: 1,
            heads: 2,
            ff_width: 8,
            dropout: 0.0,
            init_scale: scale,
            seed,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = ModelParams::init(&tiny_cfg(5, 0.02)).unwrap();
        let b = ModelParams::init(&tiny_cfg(5, 0.02)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = ModelParams::init(&tiny_cfg(5, 0.02)).unwrap();
        let b = ModelParams::init(&tiny_cfg(6, 0.02)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_scale_zeroes_weights() {
        let p = ModelParams::init(&tiny_cfg(5, 0.0)).unwrap();
        assert!(p.tok_emb.iter().all(|&v| v == 0.0));
        assert!(p.head.iter().all(|&v| v == 0.0));
        assert!(p.layers[0].wq.iter().all(|&v| v == 0.0));
        // layer-norm gains stay at one by construction
        assert!(p.layers[0].ln1_g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_cfg(1, 0.02);
        c.width = 5; // not divisible by heads=2
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(1, 0.02);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(1, 0.02);
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn block_traversal_covers_everything() {
        let p = ModelParams::init(&tiny_cfg(3, 0.02)).unwrap();
        let n: usize = p.blocks().iter().map(|(_, b)| b.len()).sum();
        // tok (8*4) + pos (12*4) + layer (2*4 + 4*(16+4) + 2*4 + 32+8 + 32+4) + lnf (8) + head (28)
        let expect = 8 * 4 + 12 * 4 + (8 + 4 * 20 + 8 + 40 + 36) + 8 + 4 * 7;
        assert_eq!(n, expect);
        assert_eq!(p.param_count(), expect);
    }
}
