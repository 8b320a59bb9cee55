//! Texture-aware embedding network.
//!
//! ```text
//! image 3×S×S
//!   └─ backbone: [conv3×3 → group norm → ReLU] × depth      features D×H'×W'
//!        ├─ encoding: residuals to K_c codewords, soft-assigned,
//!        │   aggregated, flattened, ℓ2-normalised, projected  x_t (n_t)
//!        └─ global average pooling                          x_g (D)
//!   bilinear: signed sqrt of x_t·x_gᵀ, ℓ2-normalised         x_b (n_t·D)
//!   embedding: fully connected, no activation                 x_emb (n_emb)
//! ```
//!
//! There is no classification head; `x_emb` is the model output.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autograd::{soft_assign, AutogradError, Graph, Var};
use crate::config::{ConfigError, KeyValues};
use crate::store::{self, ByteReader, StoreError};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input shape {actual:?}, expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint parameter {name}: {reason}")]
    Checkpoint { name: String, reason: String },
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side S.
    pub input_size: usize,
    /// Output channels of each backbone block; the last one is D.
    pub channels: Vec<usize>,
    /// Stride of each backbone block.
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Groups for the per-block group norm; 0 disables normalisation.
    pub norm_groups: usize,
    /// Number of codewords K_c.
    pub codewords: usize,
    /// Texture projection width n_t.
    pub texture_dim: usize,
    /// Embedding width n_emb.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
            norm_groups: 4,
            codewords: 8,
            texture_dim: 32,
            embed_dim: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 3×16×16 input, D=8, K_c=4, n_emb=16; sized for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            channels: vec![4, 8],
            strides: vec![2, 2],
            kernel: 3,
            norm_groups: 2,
            codewords: 4,
            texture_dim: 4,
            embed_dim: 16,
            seed: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    /// Spatial side H' = W' of the backbone output.
    pub fn feature_side(&self) -> usize {
        let pad = self.kernel / 2;
        self.strides
            .iter()
            .fold(self.input_size, |s, &st| (s + 2 * pad - self.kernel) / st + 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides must be non-empty and of equal length");
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("channels and strides must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.norm_groups > 0 && self.channels.iter().any(|c| c % self.norm_groups != 0) {
            return bad("norm_groups must divide every channel count");
        }
        if self.codewords == 0 || self.texture_dim == 0 || self.embed_dim == 0 {
            return bad("codewords, texture_dim and embed_dim must be positive");
        }
        let mut side = self.input_size;
        let pad = self.kernel / 2;
        for &st in &self.strides {
            if side + 2 * pad < self.kernel {
                return bad("input too small for backbone depth");
            }
            side = (side + 2 * pad - self.kernel) / st + 1;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        kv.take("input_size", &mut c.input_size)?;
        kv.take_list("channels", &mut c.channels)?;
        kv.take_list("strides", &mut c.strides)?;
        kv.take("kernel", &mut c.kernel)?;
        kv.take("norm_groups", &mut c.norm_groups)?;
        kv.take("codewords", &mut c.codewords)?;
        kv.take("texture_dim", &mut c.texture_dim)?;
        kv.take("embed_dim", &mut c.embed_dim)?;
        kv.take("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_size={}\nchannels={}\nstrides={}\nkernel={}\nnorm_groups={}\ncodewords={}\ntexture_dim={}\nembed_dim={}\nseed={}\n",
            self.input_size,
            list(&self.channels),
            list(&self.strides),
            self.kernel,
            self.norm_groups,
            self.codewords,
            self.texture_dim,
            self.embed_dim,
            self.seed
        )
    }
}

/// Variables of one forward pass, per stage.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub features: Var,
    pub texture: Var,
    pub pooled: Var,
    pub bilinear: Var,
    pub embedding: Var,
}

/// The embedding network with its parameters.
#[derive(Clone, Debug)]
pub struct DepModel<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

struct Layout {
    blocks: Vec<BlockIdx>,
    codewords: usize,
    log_smoothing: usize,
    texture_w: usize,
    texture_b: usize,
    embed_w: usize,
    embed_b: usize,
}

struct BlockIdx {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

fn layout(c: &ModelConfig) -> Layout {
    let mut i = 0;
    let mut next = || {
        i += 1;
        i - 1
    };
    let blocks = c
        .channels
        .iter()
        .map(|_| BlockIdx {
            weight: next(),
            bias: next(),
            norm: (c.norm_groups > 0).then(|| (next(), next())),
        })
        .collect();
    Layout {
        blocks,
        codewords: next(),
        log_smoothing: next(),
        texture_w: next(),
        texture_b: next(),
        embed_w: next(),
        embed_b: next(),
    }
}

impl<T: Real> DepModel<T> {
    /// Freshly initialised model, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor<T>| {
            names.push(name);
            params.push(t);
        };
        let k = config.kernel;
        let mut in_ch = 3;
        for (b, &out_ch) in config.channels.iter().enumerate() {
            let std = (2.0 / (in_ch * k * k) as f64).sqrt();
            add(format!("backbone.{b}.conv.weight"), normal(&[out_ch, in_ch, k, k], std));
            add(format!("backbone.{b}.conv.bias"), Tensor::zeros(&[out_ch]));
            if config.norm_groups > 0 {
                add(format!("backbone.{b}.norm.gamma"), Tensor::full(&[out_ch], T::one()));
                add(format!("backbone.{b}.norm.beta"), Tensor::zeros(&[out_ch]));
            }
            in_ch = out_ch;
        }
        let d = config.feature_dim();
        let kc = config.codewords;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
        let cw = (0..kc * d).map(|_| T::of(rng.random_range(0.0..1.0))).collect();
        add("encoding.codewords".into(), Tensor::from_vec(&[kc, d], cw).unwrap());
        let base = -(d as f64).ln();
        let ls = (0..kc)
            .map(|_| T::of(base + rng.random_range(-0.5..0.5)))
            .collect();
        add("encoding.log_smoothing".into(), Tensor::from_vec(&[kc], ls).unwrap());
        let nt = config.texture_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xfc_0007);
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        add("texture.weight".into(), normal(&[nt, kc * d], (1.0 / (kc * d) as f64).sqrt()));
        add("texture.bias".into(), Tensor::zeros(&[nt]));
        let ne = config.embed_dim;
        add("embed.weight".into(), normal(&[ne, nt * d], (2.0 / (nt * d) as f64).sqrt()));
        add("embed.bias".into(), Tensor::zeros(&[ne]));
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> DepModel<U> {
        DepModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Smoothing factors `exp(log_smoothing)`, always positive.
    pub fn smoothing(&self) -> Vec<T> {
        let l = layout(&self.config);
        self.params[l.log_smoothing].data().iter().map(|v| v.exp()).collect()
    }

    /// Registers every parameter as a trainable leaf, in `params()` order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<(), ModelError> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(ModelError::InputShape {
                expected: vec![3, s, s],
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn backbone_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        image: Var,
    ) -> Result<Var, ModelError> {
        let l = layout(&self.config);
        let pad = self.config.kernel / 2;
        let mut x = image;
        for (b, idx) in l.blocks.iter().enumerate() {
            x = g.conv2d(x, vars[idx.weight], vars[idx.bias], self.config.strides[b], pad)?;
            if let Some((gamma, beta)) = idx.norm {
                x = g.group_norm(x, vars[gamma], vars[beta], self.config.norm_groups)?;
            }
            x = g.relu(x)?;
        }
        Ok(x)
    }

    pub fn encoding_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        features: Var,
    ) -> Result<Var, ModelError> {
        let l = layout(&self.config);
        let e = g.encode(features, vars[l.codewords], vars[l.log_smoothing])?;
        let n = g.l2_normalize(e)?;
        Ok(g.linear(n, vars[l.texture_w], vars[l.texture_b])?)
    }

    /// Full forward pass of one `3×S×S` image.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        image: Tensor<T>,
    ) -> Result<Branches, ModelError> {
        self.check_input(&image)?;
        let l = layout(&self.config);
        let input = g.constant(image);
        let features = self.backbone_graph(g, vars, input)?;
        let texture = self.encoding_graph(g, vars, features)?;
        let pooled = g.global_avg_pool(features)?;
        let outer = g.bilinear_ssqrt(texture, pooled)?;
        let bilinear = g.l2_normalize(outer)?;
        let embedding = g.linear(bilinear, vars[l.embed_w], vars[l.embed_b])?;
        Ok(Branches {
            features,
            texture,
            pooled,
            bilinear,
            embedding,
        })
    }

    /// Backbone features `D×H'×W'` of one image.
    pub fn forward_backbone(&self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(image.clone());
        let f = self.backbone_graph(&mut g, &vars, x)?;
        Ok(g.value(f)?.clone())
    }

    /// Texture branch output `x_t` for a `D×H'×W'` feature map.
    pub fn texture_encode(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let f = g.constant(features.clone());
        let t = self.encoding_graph(&mut g, &vars, f)?;
        Ok(g.value(t)?.clone())
    }

    /// Soft-assignment weights `N×K_c` of the encoding layer for a feature map.
    pub fn assignment_weights(&self, features: &Tensor<T>) -> Result<Vec<T>, ModelError> {
        let &[d, h, w] = features.shape() else {
            return Err(ModelError::InputShape {
                expected: vec![self.config.feature_dim(), 0, 0],
                actual: features.shape().to_vec(),
            });
        };
        let l = layout(&self.config);
        let cw = &self.params[l.codewords];
        if cw.shape()[1] != d {
            return Err(ModelError::InputShape {
                expected: vec![cw.shape()[1], h, w],
                actual: features.shape().to_vec(),
            });
        }
        Ok(soft_assign(
            features.data(),
            cw.data(),
            &self.smoothing(),
            d,
            h * w,
            self.config.codewords,
        ))
    }

    /// Embedding `x_emb` of one image.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let b = self.forward(&mut g, &vars, image.clone())?;
        Ok(g.value(b.embedding)?.clone())
    }

    /// Embeds every image; rows come back in input order.
    pub fn embed_batch(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<f32>>, ModelError> {
        images
            .par_iter()
            .map(|img| {
                let e = self.embed(img)?;
                Ok(e.data().iter().map(|v| v.as_f64() as f32).collect())
            })
            .collect()
    }

    /// Writes the parameters: magic `DEPC`, `u32` version, `u32` length and
    /// UTF-8 text of the model config, `u32` block count, then per block
    /// `u32` name length, name, `u32` rank, `u32` dims, `f32` payload.
    /// All integers and floats little-endian.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        let u32le = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        u32le(&mut buf, CHECKPOINT_VERSION as usize);
        let cfg = self.config.to_text();
        u32le(&mut buf, cfg.len());
        buf.extend_from_slice(cfg.as_bytes());
        u32le(&mut buf, self.params.len());
        for (name, t) in self.names.iter().zip(&self.params) {
            u32le(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            u32le(&mut buf, t.shape().len());
            for &d in t.shape() {
                u32le(&mut buf, d);
            }
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(store::write_file(path, &buf)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(store::io_at(path))?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(StoreError::Version {
                path: path.to_path_buf(),
                version,
            }
            .into());
        }
        let cfg_len = r.u32()? as usize;
        let config = ModelConfig::parse(&r.string(cfg_len)?)?;
        let mut model = Self::new(config)?;
        let blocks = r.u32()? as usize;
        if blocks != model.params.len() {
            return Err(ModelError::Checkpoint {
                name: "*".into(),
                reason: format!("{blocks} blocks, model has {}", model.params.len()),
            });
        }
        for i in 0..blocks {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let fail = |reason: String| ModelError::Checkpoint {
                name: name.clone(),
                reason,
            };
            if name != model.names[i] {
                return Err(fail(format!("expected {}", model.names[i])));
            }
            if shape != model.params[i].shape() {
                return Err(fail(format!(
                    "shape {shape:?}, expected {:?}",
                    model.params[i].shape()
                )));
            }
            let values = r.f32s(shape.iter().product())?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite value".into()));
            }
            model.params[i] = Tensor::from_vec(&shape, values.into_iter().map(|v| T::of(v as f64)).collect())
                .expect("checked shape");
        }
        r.end()?;
        Ok(model)
    }
}

/// Per-channel mean of a `D×H×W` map (`x_g`).
pub fn global_pool<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let p = g.global_avg_pool(f)?;
    Ok(g.value(p)?.clone())
}

/// ℓ2-normalised signed square root of `x_t·x_gᵀ`, flattened row-major (`x_b`).
pub fn bilinear_pool<T: Real>(texture: &Tensor<T>, pooled: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let t = g.constant(texture.clone());
    let p = g.constant(pooled.clone());
    let o = g.bilinear_ssqrt(t, p)?;
    let n = g.l2_normalize(o)?;
    Ok(g.value(n)?.clone())
}
