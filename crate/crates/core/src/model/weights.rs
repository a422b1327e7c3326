use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PositionalScheme};
use crate::error::Result;
use crate::substrate::{ParamId, ParamStore, Scalar, Tensor};

/// Parameter ids of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub embed: ParamId,
    pub pos: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub embed: ParamId,
    pub pos: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub ln_f_gain: ParamId,
    pub ln_f_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// One affine projection per injection slot: `(weight, bias)`.
    pub proj: Vec<(ParamId, ParamId)>,
}

/// Encoder-decoder weights plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct RccModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
}

/// Prefix shared by every encoder parameter name.
pub const ENCODER_PREFIX: &str = "encoder.";

const INIT_STD: f64 = 0.02;

struct Init<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut R>,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match self.rng.as_deref_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
            None => vec![T::zero(); n],
        };
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    fn constant(&mut self, name: &str, len: usize, value: f64) -> Result<ParamId> {
        self.store
            .insert(name, Tensor::new(vec![len], vec![T::from_f64_lossy(value); len])?)
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, n_layers: usize) -> Result<BlockIds> {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let out_std = INIT_STD / libm_sqrt(2.0 * n_layers.max(1) as f64);
        Ok(BlockIds {
            ln1_gain: self.constant(&format!("{prefix}.ln1.gain"), d, 1.0)?,
            ln1_bias: self.constant(&format!("{prefix}.ln1.bias"), d, 0.0)?,
            wq: self.normal(&format!("{prefix}.attn.wq"), vec![d, d], INIT_STD)?,
            bq: self.constant(&format!("{prefix}.attn.bq"), d, 0.0)?,
            wk: self.normal(&format!("{prefix}.attn.wk"), vec![d, d], INIT_STD)?,
            bk: self.constant(&format!("{prefix}.attn.bk"), d, 0.0)?,
            wv: self.normal(&format!("{prefix}.attn.wv"), vec![d, d], INIT_STD)?,
            bv: self.constant(&format!("{prefix}.attn.bv"), d, 0.0)?,
            wo: self.normal(&format!("{prefix}.attn.wo"), vec![d, d], out_std)?,
            bo: self.constant(&format!("{prefix}.attn.bo"), d, 0.0)?,
            ln2_gain: self.constant(&format!("{prefix}.ln2.gain"), d, 1.0)?,
            ln2_bias: self.constant(&format!("{prefix}.ln2.bias"), d, 0.0)?,
            w1: self.normal(&format!("{prefix}.mlp.w1"), vec![d, hidden], INIT_STD)?,
            b1: self.constant(&format!("{prefix}.mlp.b1"), hidden, 0.0)?,
            w2: self.normal(&format!("{prefix}.mlp.w2"), vec![hidden, d], out_std)?,
            b2: self.constant(&format!("{prefix}.mlp.b2"), d, 0.0)?,
        })
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

impl<T: Scalar> RccModel<T> {
    /// Randomly initialized model: normal(0, 0.02) matrices, residual output
    /// projections scaled by `1/sqrt(2 * layers)`, zero biases, unit gains.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Model with every weight set to zero and every gain set to one; used to
    /// allocate the parameter layout before loading values.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng>(config: ModelConfig, rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let d = config.d_model;
        let learned = config.positional == PositionalScheme::Learned;

        let enc_embed = init.normal("encoder.embed", vec![config.vocab_size, d], INIT_STD)?;
        let enc_pos = if learned {
            Some(init.normal("encoder.pos", vec![config.encoder_window, d], INIT_STD)?)
        } else {
            None
        };
        let enc_blocks = (0..config.n_enc_layers)
            .map(|i| init.block(&format!("encoder.block.{i}"), &config, config.n_enc_layers))
            .collect::<Result<Vec<_>>>()?;

        let dec_embed = init.normal("decoder.embed", vec![config.vocab_size, d], INIT_STD)?;
        let dec_pos = if learned {
            Some(init.normal("decoder.pos", vec![config.decoder_capacity(), d], INIT_STD)?)
        } else {
            None
        };
        let dec_blocks = (0..config.n_dec_layers)
            .map(|i| init.block(&format!("decoder.block.{i}"), &config, config.n_dec_layers))
            .collect::<Result<Vec<_>>>()?;
        let ln_f_gain = init.constant("decoder.ln_f.gain", d, 1.0)?;
        let ln_f_bias = init.constant("decoder.ln_f.bias", d, 0.0)?;
        let head_w = init.normal("decoder.head.w", vec![d, config.vocab_size], INIT_STD)?;
        let head_b = init.constant("decoder.head.b", config.vocab_size, 0.0)?;
        let proj = (0..config.n_slots())
            .map(|j| {
                Ok((
                    init.normal(&format!("bridge.proj.{j}.w"), vec![d, d], INIT_STD)?,
                    init.constant(&format!("bridge.proj.{j}.b"), d, 0.0)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            params: store,
            encoder: EncoderIds {
                embed: enc_embed,
                pos: enc_pos,
                blocks: enc_blocks,
            },
            decoder: DecoderIds {
                embed: dec_embed,
                pos: dec_pos,
                blocks: dec_blocks,
                ln_f_gain,
                ln_f_bias,
                head_w,
                head_b,
                proj,
            },
        })
    }

    /// Marks every encoder parameter trainable or frozen.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix(ENCODER_PREFIX, trainable);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .all(|(_, p)| !p.trainable)
    }

    /// Parameter ids belonging to the encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    /// Converts every weight to another precision.
    pub fn cast<U: Scalar>(&self) -> RccModel<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            let data = p.tensor.data().iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
            let id = params
                .insert(&p.name, Tensor::new(p.tensor.shape().to_vec(), data).expect("same shape"))
                .expect("unique names");
            params.get_mut(id).trainable = p.trainable;
        }
        RccModel {
            config: self.config.clone(),
            params,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}
