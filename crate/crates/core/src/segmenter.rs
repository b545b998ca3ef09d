//! Supervised reference segmenter used to score the masks of generated
//! images: a plain U-Net trained with cross-entropy on ground-truth labels.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{softmax, ParamStore, Scope};
use crate::sampler::SegmentationResult;
use crate::trainer::{adam_update, batch_indices, TrainConfig};
use crate::unet::{ArchSpec, Decoder, Encoder, MaskStack, MidBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            stage_multipliers: vec![1, 2, 2],
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug)]
pub struct ReferenceSegmenter {
    classes: usize,
    store: ParamStore,
    encoder: Encoder,
    mid: MidBlock,
    decoder: Decoder,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl ReferenceSegmenter {
    pub fn new(resolution: usize, classes: usize, cfg: &ReferenceConfig, seed: u64) -> Result<Self> {
        if classes == 0 || classes > u8::MAX as usize {
            return Err(Error::config("eval.reference.classes", "must lie in [1, 255]"));
        }
        let arch = ArchSpec {
            base_channels: cfg.base_channels,
            stage_multipliers: cfg.stage_multipliers.clone(),
            res_blocks_per_stage: 1,
            num_regions: 1,
            img_channels: 3,
            resolution,
            time_embed_dim: 4 * cfg.base_channels,
            attention_at_lowest: false,
        };
        arch.validate()?;
        let mut store = ParamStore::new(DType::F32, seed ^ 0x5e6);
        let mut root = Scope::root(&mut store, false);
        let encoder = Encoder::new(&mut root.sub("enc"), &arch)?;
        let mid = MidBlock::new(&mut root.sub("mid"), &arch)?;
        let decoder = Decoder::new(&mut root.sub("dec"), &arch, classes, 0)?;
        store.freeze();
        let zeros = store
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            store,
            encoder,
            mid,
            decoder,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class logits `(batch, classes, H, W)`. There is no diffusion; the
    /// blocks see a constant zero time embedding input.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dims()[0];
        let temb = self.encoder.embed_time(&vec![0; b], DType::F32)?;
        let skips = self.encoder.forward(&x.to_dtype(DType::F32)?, &temb)?;
        let h = self.mid.forward(skips.last().expect("stages"), &temb)?;
        self.decoder.forward(&h, &skips, &temb)
    }

    /// Mean pixelwise cross-entropy against `labels` (row-major per image).
    pub fn loss(&self, x: &Tensor, labels: &[u8]) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let (b, k, h, w) = logits.dims4()?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::Shape {
                what: "segmenter labels".into(),
                expected: vec![b, h, w],
                got: vec![labels.len()],
            });
        }
        let mut onehot = vec![0f32; b * k * plane];
        for (i, &l) in labels.iter().enumerate() {
            let (bi, p) = (i / plane, i % plane);
            onehot[(bi * k + l as usize) * plane + p] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (b, k, h, w), &Device::Cpu)?;
        let max = logits.max_keepdim(1)?.detach();
        let shifted = logits.broadcast_sub(&max)?;
        let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
        let log_p = shifted.broadcast_sub(&lse)?;
        Ok((log_p * onehot)?.sum_all()?.affine(-1.0 / (b * plane) as f64, 0.0)?)
    }

    /// Train on the labelled images of `data`; returns per-step losses.
    pub fn fit(&mut self, data: &Dataset, cfg: &ReferenceConfig, seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() || !data.has_labels() {
            return Err(Error::config("eval.reference", "needs a non-empty labelled dataset"));
        }
        let classes = data.num_classes().unwrap_or(0);
        if classes > self.classes {
            return Err(Error::config(
                "eval.reference",
                format!("dataset has {classes} classes, segmenter {}", self.classes),
            ));
        }
        let opt = TrainConfig {
            lr: cfg.lr,
            ..TrainConfig::default()
        };
        let mut losses = Vec::with_capacity(cfg.steps as usize);
        for s in 0..cfg.steps {
            let idx = batch_indices(seed ^ 0x5e6, s, cfg.batch_size, data.len());
            let x = data.batch(&idx, None, DType::F32)?;
            let labels = data.label_batch(&idx).expect("labels checked above");
            let loss = self.loss(&x, &labels)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("reference segmenter step {}", s + 1),
                });
            }
            let grads = loss.backward()?;
            let grads = self
                .store
                .iter()
                .map(|(_, v)| match grads.get(v.as_tensor()) {
                    Some(g) => Ok(g.clone()),
                    None => Ok(v.as_tensor().zeros_like()?),
                })
                .collect::<Result<Vec<_>>>()?;
            self.step += 1;
            adam_update(&self.store, &mut self.first, &mut self.second, &grads, self.step, &opt)?;
            losses.push(value);
        }
        Ok(losses)
    }

    /// Softmax class maps and argmax labels, in chunks of `chunk` images.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<SegmentationResult> {
        let n = x.dims()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let l = self.logits(&x.narrow(0, start, len)?)?.detach();
            parts.push(softmax(&l, 1)?);
            start += len;
        }
        let (_, _, h, w) = x.dims4()?;
        let soft = if parts.is_empty() {
            Tensor::zeros((0, self.classes, h, w), DType::F32, &Device::Cpu)?
        } else {
            Tensor::cat(&parts, 0)?
        };
        SegmentationResult::from_soft(MaskStack::new(soft)?, 0)
    }
}
