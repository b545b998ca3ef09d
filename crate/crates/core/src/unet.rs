//! The factorized denoising U-Net.
//!
//! One encoder and mid block feed two kinds of decoder-shaped heads: a mask
//! generator ending in a K-way softmax, and a noise decoder that is run once
//! per region on skip features gated by that region's mask. The per-region
//! predictions are blended by the same masks.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::Timesteps;
use crate::error::{Error, Result};
use crate::nn::{
    softmax, Attention, Conv2d, Downsample, OutputHead, ParamStore, ResBlock, Scope,
    TimeEmbedding, Upsample,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub num_regions: usize,
    pub img_channels: usize,
    pub resolution: usize,
    pub time_embed_dim: usize,
    pub attention_at_lowest: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchSpec {
    /// 32x32 RGB, C = 32, four stages, two residual blocks each, K = 3.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            stage_multipliers: vec![1, 2, 3, 4],
            res_blocks_per_stage: 2,
            num_regions: 3,
            img_channels: 3,
            resolution: 32,
            time_embed_dim: 128,
            attention_at_lowest: false,
        }
    }

    /// Tiny network for gradient checks: C = 4, 8x8, two stages, K = 2.
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            stage_multipliers: vec![1, 2],
            res_blocks_per_stage: 1,
            num_regions: 2,
            img_channels: 3,
            resolution: 8,
            time_embed_dim: 16,
            attention_at_lowest: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.{f}");
        if self.base_channels == 0 {
            return Err(Error::config(field("base_channels"), "must be >= 1"));
        }
        if self.stage_multipliers.is_empty() || self.stage_multipliers.contains(&0) {
            return Err(Error::config(
                field("stage_multipliers"),
                "must be a non-empty list of positive integers",
            ));
        }
        if self.res_blocks_per_stage == 0 {
            return Err(Error::config(field("res_blocks_per_stage"), "must be >= 1"));
        }
        if self.num_regions == 0 {
            return Err(Error::config(field("num_regions"), "must be >= 1"));
        }
        if self.img_channels == 0 {
            return Err(Error::config(field("img_channels"), "must be >= 1"));
        }
        if self.time_embed_dim < 2 {
            return Err(Error::config(field("time_embed_dim"), "must be >= 2"));
        }
        let factor = 1usize << (self.stage_multipliers.len() - 1);
        if self.resolution == 0 || !self.resolution.is_multiple_of(factor) {
            return Err(Error::config(
                field("resolution"),
                format!(
                    "{} is not divisible by 2^{} (one halving per extra stage)",
                    self.resolution,
                    self.stage_multipliers.len() - 1
                ),
            ));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_multipliers.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stage_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn stage_resolutions(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.resolution >> s).collect()
    }

    pub fn mid_channels(&self) -> usize {
        *self.stage_channels().last().expect("validated")
    }
}

/// Decoding scheme. `Shared` is the primary model; the others are the
/// ablations, plus `Plain`, an ordinary unfactorized DDPM U-Net used as a
/// reference build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Shared,
    Concat,
    MaskMid,
    Unshared,
    Plain,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Shared,
        Variant::Concat,
        Variant::MaskMid,
        Variant::Unshared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Shared => "shared",
            Variant::Concat => "concat",
            Variant::MaskMid => "mask_mid",
            Variant::Unshared => "unshared",
            Variant::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Variant::Shared),
            "concat" => Ok(Variant::Concat),
            "mask_mid" => Ok(Variant::MaskMid),
            "unshared" => Ok(Variant::Unshared),
            "plain" => Ok(Variant::Plain),
            other => Err(Error::config("model.variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// K soft region masks, shape `(batch, K, H, W)`, summing to one per pixel.
#[derive(Debug, Clone)]
pub struct MaskStack(Tensor);

impl MaskStack {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::Shape {
                what: "mask stack".into(),
                expected: vec![0, 0, 0, 0],
                got: t.dims().to_vec(),
            });
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_regions(&self) -> usize {
        self.0.dims()[1]
    }

    /// Largest `|sum_k m_k - 1|` over all pixels.
    pub fn max_simplex_error(&self) -> Result<f64> {
        let sums = self.0.to_dtype(DType::F64)?.sum_keepdim(1)?;
        let err = (sums - 1.0)?.abs()?.flatten_all()?.max(0)?;
        Ok(err.to_scalar::<f64>()?)
    }

    /// `(min, max)` over all entries.
    pub fn value_range(&self) -> Result<(f64, f64)> {
        let flat = self.0.to_dtype(DType::F64)?.flatten_all()?;
        Ok((flat.min(0)?.to_scalar()?, flat.max(0)?.to_scalar()?))
    }

    /// Argmax over regions with ties going to the lowest index. Shape
    /// `(batch, H, W)`, row-major.
    pub fn hard_labels(&self) -> Result<Vec<u8>> {
        let (b, k, h, w) = self.0.dims4()?;
        let v = self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let plane = h * w;
        let mut out = vec![0u8; b * plane];
        for bi in 0..b {
            for p in 0..plane {
                let mut best = 0;
                let mut best_v = v[bi * k * plane + p];
                for ki in 1..k {
                    let x = v[(bi * k + ki) * plane + p];
                    if x > best_v {
                        best = ki;
                        best_v = x;
                    }
                }
                out[bi * plane + p] = best as u8;
            }
        }
        Ok(out)
    }
}

/// Area-average pooling of masks by a power-of-two `factor`.
pub fn downsample_mask(m: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = m.dims4()?;
    if factor == 0 || !factor.is_power_of_two() || h % factor != 0 || w % factor != 0 {
        return Err(Error::Range {
            what: "downsample factor",
            value: factor as i64,
            range: format!("powers of two dividing {h}x{w}"),
        });
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    Ok(m.avg_pool2d(factor)?)
}

/// Intermediate encoder and mid-block features.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// One skip feature per stage, highest resolution first.
    pub h_enc: Vec<Tensor>,
    pub h_mid: Tensor,
}

/// Sub-network forward-pass counters.
#[derive(Debug, Default)]
pub struct PassCounts {
    encoder: AtomicUsize,
    mid: AtomicUsize,
    mask: AtomicUsize,
    decoder: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassSnapshot {
    pub encoder: usize,
    pub mid: usize,
    pub mask: usize,
    /// Decoder branch evaluations (a batched K-branch pass counts K).
    pub decoder: usize,
}

impl PassCounts {
    pub fn snapshot(&self) -> PassSnapshot {
        PassSnapshot {
            encoder: self.encoder.load(Ordering::Relaxed),
            mid: self.mid.load(Ordering::Relaxed),
            mask: self.mask.load(Ordering::Relaxed),
            decoder: self.decoder.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.encoder, &self.mid, &self.mask, &self.decoder] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: Option<Downsample>,
}

/// Input convolution, timestep embedding and the downsampling stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    time: TimeEmbedding,
    conv_in: Conv2d,
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(s: &mut Scope, arch: &ArchSpec) -> Result<Self> {
        let ch = arch.stage_channels();
        let temb = arch.time_embed_dim;
        let time = TimeEmbedding::new(&mut s.sub("time"), arch.base_channels.max(2), temb)?;
        let conv_in = Conv2d::new(&mut s.sub("conv_in"), arch.img_channels, ch[0], 3, 1)?;
        let mut stages = Vec::with_capacity(ch.len());
        let mut cur = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut st = s.sub(format!("s{i}"));
            let mut blocks = Vec::new();
            for j in 0..arch.res_blocks_per_stage {
                blocks.push(ResBlock::new(&mut st.sub(format!("b{j}")), cur, c, temb)?);
                cur = c;
            }
            let down = if i + 1 < ch.len() {
                Some(Downsample::new(&mut st.sub("down"), c)?)
            } else {
                None
            };
            stages.push(EncoderStage { blocks, down });
        }
        Ok(Self {
            time,
            conv_in,
            stages,
        })
    }

    pub fn embed_time(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        self.time.forward(t, dtype)
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            for b in &st.blocks {
                h = b.forward(&h, temb)?;
            }
            skips.push(h.clone());
            if let Some(d) = &st.down {
                h = d.forward(&h)?;
            }
        }
        Ok(skips)
    }
}

/// Residual / optional attention / residual at the lowest resolution.
#[derive(Debug, Clone)]
pub struct MidBlock {
    first: ResBlock,
    attn: Option<Attention>,
    second: ResBlock,
}

impl MidBlock {
    pub fn new(s: &mut Scope, arch: &ArchSpec) -> Result<Self> {
        let c = arch.mid_channels();
        let temb = arch.time_embed_dim;
        Ok(Self {
            first: ResBlock::new(&mut s.sub("b0"), c, c, temb)?,
            attn: if arch.attention_at_lowest {
                Some(Attention::new(&mut s.sub("attn"), c)?)
            } else {
                None
            },
            second: ResBlock::new(&mut s.sub("b1"), c, c, temb)?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.first.forward(x, temb)?;
        if let Some(a) = &self.attn {
            h = a.forward(&h)?;
        }
        self.second.forward(&h, temb)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    blocks: Vec<ResBlock>,
    up: Option<Upsample>,
}

/// Upsampling stack mirroring the encoder, consuming one skip per stage.
///
/// `extra` input channels are reserved on the mid input and on every skip
/// (used by the concatenation ablation).
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Indexed by encoder stage; evaluated from the lowest resolution up.
    stages: Vec<DecoderStage>,
    head: OutputHead,
}

impl Decoder {
    pub fn new(s: &mut Scope, arch: &ArchSpec, outputs: usize, extra: usize) -> Result<Self> {
        let ch = arch.stage_channels();
        let temb = arch.time_embed_dim;
        let n = ch.len();
        let mut stages: Vec<Option<DecoderStage>> = vec![None; n];
        let mut cur = arch.mid_channels() + extra;
        for i in (0..n).rev() {
            let mut st = s.sub(format!("s{i}"));
            let mut blocks = Vec::new();
            for j in 0..arch.res_blocks_per_stage {
                let inputs = if j == 0 { cur + ch[i] + extra } else { ch[i] };
                blocks.push(ResBlock::new(&mut st.sub(format!("b{j}")), inputs, ch[i], temb)?);
            }
            cur = ch[i];
            let up = if i > 0 {
                Some(Upsample::new(&mut st.sub("up"), ch[i])?)
            } else {
                None
            };
            stages[i] = Some(DecoderStage { blocks, up });
        }
        Ok(Self {
            stages: stages.into_iter().map(|s| s.expect("every stage built")).collect(),
            head: OutputHead::new(&mut s.sub("head"), ch[0], outputs)?,
        })
    }

    pub fn forward(&self, h_mid: &Tensor, skips: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        let mut h = h_mid.clone();
        for (i, st) in self.stages.iter().enumerate().rev() {
            h = Tensor::cat(&[&h, &skips[i]], 1)?;
            for b in &st.blocks {
                h = b.forward(&h, temb)?;
            }
            if let Some(up) = &st.up {
                h = up.forward(&h)?;
            }
        }
        self.head.forward(&h)
    }
}

/// Noise prediction together with the masks that blended it.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Tensor,
    pub masks: MaskStack,
}

/// The complete network over a parameter store.
#[derive(Debug)]
pub struct FactorizedUnet {
    arch: ArchSpec,
    variant: Variant,
    dtype: DType,
    encoder: Encoder,
    mid: MidBlock,
    mask: Option<Decoder>,
    decoders: Vec<Decoder>,
    counts: PassCounts,
}

impl FactorizedUnet {
    /// Build the network, creating any parameter missing from `store`.
    ///
    /// With `trainable = false` the layers hold gradient-free views that
    /// still track in-place updates of the store.
    pub fn build(
        arch: &ArchSpec,
        variant: Variant,
        store: &mut ParamStore,
        trainable: bool,
    ) -> Result<Self> {
        arch.validate()?;
        let k = arch.num_regions;
        let mut root = Scope::root(store, !trainable);
        let encoder = Encoder::new(&mut root.sub("enc"), arch)?;
        let mid = MidBlock::new(&mut root.sub("mid"), arch)?;
        let mask = match variant {
            Variant::Plain => None,
            _ => Some(Decoder::new(&mut root.sub("mask"), arch, k, 0)?),
        };
        let decoders = match variant {
            Variant::Unshared => (0..k)
                .map(|i| Decoder::new(&mut root.sub(format!("dec.k{i}")), arch, arch.img_channels, 0))
                .collect::<Result<Vec<_>>>()?,
            Variant::Concat => vec![Decoder::new(&mut root.sub("dec"), arch, arch.img_channels, k)?],
            _ => vec![Decoder::new(&mut root.sub("dec"), arch, arch.img_channels, 0)?],
        };
        Ok(Self {
            arch: arch.clone(),
            variant,
            dtype: store.dtype(),
            encoder,
            mid,
            mask,
            decoders,
            counts: PassCounts::default(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn pass_counts(&self) -> &PassCounts {
        &self.counts
    }

    fn check_input(&self, x: &Tensor, t: &Timesteps) -> Result<Tensor> {
        let a = &self.arch;
        let b = x.dims().first().copied().unwrap_or(0);
        let expected = vec![b, a.img_channels, a.resolution, a.resolution];
        if x.dims() != expected.as_slice() {
            return Err(Error::Shape {
                what: "noisy image batch".into(),
                expected,
                got: x.dims().to_vec(),
            });
        }
        if t.len() != b {
            return Err(Error::Shape {
                what: "timesteps".into(),
                expected: vec![b],
                got: vec![t.len()],
            });
        }
        Ok(x.to_dtype(self.dtype)?)
    }

    fn check_features(&self, h_enc: &[Tensor]) -> Result<()> {
        let ch = self.arch.stage_channels();
        let res = self.arch.stage_resolutions();
        if h_enc.len() != ch.len() {
            return Err(Error::Shape {
                what: "encoder feature list".into(),
                expected: vec![ch.len()],
                got: vec![h_enc.len()],
            });
        }
        for (s, f) in h_enc.iter().enumerate() {
            let b = f.dims().first().copied().unwrap_or(0);
            let expected = vec![b, ch[s], res[s], res[s]];
            if f.dims() != expected.as_slice() {
                return Err(Error::Shape {
                    what: format!("encoder feature at stage {s}"),
                    expected,
                    got: f.dims().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn embed_time(&self, t: &[usize]) -> Result<Tensor> {
        self.encoder.embed_time(t, self.dtype)
    }

    /// Skip features of every encoder stage, highest resolution first.
    pub fn encode(&self, x_t: &Tensor, t: &Timesteps) -> Result<Vec<Tensor>> {
        let x = self.check_input(x_t, t)?;
        let temb = self.embed_time(t.as_slice())?;
        self.encode_with(&x, &temb)
    }

    fn encode_with(&self, x: &Tensor, temb: &Tensor) -> Result<Vec<Tensor>> {
        self.counts.encoder.fetch_add(1, Ordering::Relaxed);
        self.encoder.forward(x, temb)
    }

    pub fn mid(&self, h_enc: &[Tensor], t: &Timesteps) -> Result<Tensor> {
        self.check_features(h_enc)?;
        let temb = self.embed_time(t.as_slice())?;
        self.mid_with(h_enc, &temb)
    }

    fn mid_with(&self, h_enc: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        self.counts.mid.fetch_add(1, Ordering::Relaxed);
        self.mid.forward(h_enc.last().expect("at least one stage"), temb)
    }

    fn mask_head(&self) -> Result<&Decoder> {
        self.mask.as_ref().ok_or_else(|| {
            Error::config("model.variant", "the plain variant has no mask generator")
        })
    }

    /// Pre-softmax mask logits, `(batch, K, H, W)`.
    pub fn mask_logits(&self, h_mid: &Tensor, h_enc: &[Tensor], t: &Timesteps) -> Result<Tensor> {
        self.check_features(h_enc)?;
        let temb = self.embed_time(t.as_slice())?;
        self.mask_logits_with(h_mid, h_enc, &temb)
    }

    fn mask_logits_with(&self, h_mid: &Tensor, h_enc: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        let head = self.mask_head()?;
        self.counts.mask.fetch_add(1, Ordering::Relaxed);
        head.forward(h_mid, h_enc, temb)
    }

    pub fn generate_masks(
        &self,
        h_mid: &Tensor,
        h_enc: &[Tensor],
        t: &Timesteps,
    ) -> Result<MaskStack> {
        MaskStack::new(softmax(&self.mask_logits(h_mid, h_enc, t)?, 1)?)
    }

    /// Run only the stages needed for segmentation: encoder, mid, mask head.
    pub fn masks_only(&self, x_t: &Tensor, t: &Timesteps) -> Result<MaskStack> {
        let x = self.check_input(x_t, t)?;
        let temb = self.embed_time(t.as_slice())?;
        let h_enc = self.encode_with(&x, &temb)?;
        let h_mid = self.mid_with(&h_enc, &temb)?;
        MaskStack::new(softmax(&self.mask_logits_with(&h_mid, &h_enc, &temb)?, 1)?)
    }

    fn mask_pyramid(&self, m: &Tensor) -> Result<Vec<Tensor>> {
        (0..self.arch.num_stages())
            .map(|s| downsample_mask(m, 1 << s))
            .collect()
    }

    /// One decoder branch on skip features gated by a single-channel mask
    /// `(batch, 1, H, W)`. The mid feature is passed through unmasked.
    ///
    /// `branch` selects the decoder of the unshared variant; the shared model
    /// has a single decoder and ignores it.
    pub fn decode_branch(
        &self,
        branch: usize,
        h_mid: &Tensor,
        h_enc: &[Tensor],
        m_k: &Tensor,
        t: &Timesteps,
    ) -> Result<Tensor> {
        self.check_features(h_enc)?;
        let temb = self.embed_time(t.as_slice())?;
        let pyramid = self.mask_pyramid(m_k)?;
        let skips = h_enc
            .iter()
            .zip(&pyramid)
            .map(|(f, m)| Ok(f.broadcast_mul(m)?))
            .collect::<Result<Vec<_>>>()?;
        let dec = self.decoder(branch)?;
        self.counts.decoder.fetch_add(1, Ordering::Relaxed);
        dec.forward(h_mid, &skips, &temb)
    }

    /// Ungated decoder pass: an ordinary U-Net decoder.
    pub fn decode_plain(&self, h_mid: &Tensor, h_enc: &[Tensor], t: &Timesteps) -> Result<Tensor> {
        self.check_features(h_enc)?;
        let temb = self.embed_time(t.as_slice())?;
        self.counts.decoder.fetch_add(1, Ordering::Relaxed);
        self.decoder(0)?.forward(h_mid, h_enc, &temb)
    }

    fn decoder(&self, branch: usize) -> Result<&Decoder> {
        let idx = if self.variant == Variant::Unshared { branch } else { 0 };
        self.decoders.get(idx).ok_or(Error::Range {
            what: "decoder branch",
            value: branch as i64,
            range: format!("[0, {})", self.decoders.len()),
        })
    }

    /// Full forward pass for this model's variant.
    pub fn predict_noise(&self, x_t: &Tensor, t: &Timesteps) -> Result<Prediction> {
        let x = self.check_input(x_t, t)?;
        let temb = self.embed_time(t.as_slice())?;
        let h_enc = self.encode_with(&x, &temb)?;
        let h_mid = self.mid_with(&h_enc, &temb)?;
        if self.variant == Variant::Plain {
            self.counts.decoder.fetch_add(1, Ordering::Relaxed);
            let eps = self.decoders[0].forward(&h_mid, &h_enc, &temb)?;
            let (b, _, h, w) = eps.dims4()?;
            let masks = MaskStack::new(Tensor::ones((b, 1, h, w), self.dtype, x.device())?)?;
            return Ok(Prediction { eps, masks });
        }
        let logits = self.mask_logits_with(&h_mid, &h_enc, &temb)?;
        let m = softmax(&logits, 1)?;
        let eps = self.blend(&m, &h_mid, &h_enc, &temb)?;
        Ok(Prediction {
            eps,
            masks: MaskStack::new(m)?,
        })
    }

    /// Predict noise with externally supplied masks instead of the mask
    /// generator's output.
    pub fn predict_noise_with_masks(
        &self,
        x_t: &Tensor,
        t: &Timesteps,
        masks: &Tensor,
    ) -> Result<Tensor> {
        let x = self.check_input(x_t, t)?;
        let temb = self.embed_time(t.as_slice())?;
        let h_enc = self.encode_with(&x, &temb)?;
        let h_mid = self.mid_with(&h_enc, &temb)?;
        self.blend(&masks.to_dtype(self.dtype)?, &h_mid, &h_enc, &temb)
    }

    /// Run the variant's decoding scheme under masks `m` `(batch, K, H, W)`.
    fn blend(&self, m: &Tensor, h_mid: &Tensor, h_enc: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        let k = self.arch.num_regions;
        let (b, mk, _, _) = m.dims4()?;
        if mk != k {
            return Err(Error::Shape {
                what: "mask stack".into(),
                expected: vec![b, k],
                got: m.dims()[..2].to_vec(),
            });
        }
        let pyramid = self.mask_pyramid(m)?;
        match self.variant {
            Variant::Plain => unreachable!("plain variant does not blend"),
            Variant::Concat => {
                let low = pyramid.last().expect("at least one stage");
                let mid_in = Tensor::cat(&[h_mid, low], 1)?;
                let skips = h_enc
                    .iter()
                    .zip(&pyramid)
                    .map(|(f, p)| Ok(Tensor::cat(&[f, p], 1)?))
                    .collect::<Result<Vec<_>>>()?;
                self.counts.decoder.fetch_add(1, Ordering::Relaxed);
                self.decoders[0].forward(&mid_in, &skips, temb)
            }
            Variant::Unshared => {
                let mut acc: Option<Tensor> = None;
                for (i, dec) in self.decoders.iter().enumerate() {
                    let skips = h_enc
                        .iter()
                        .zip(&pyramid)
                        .map(|(f, p)| Ok(f.broadcast_mul(&p.narrow(1, i, 1)?)?))
                        .collect::<Result<Vec<_>>>()?;
                    self.counts.decoder.fetch_add(1, Ordering::Relaxed);
                    let e = dec.forward(h_mid, &skips, temb)?;
                    let term = e.broadcast_mul(&m.narrow(1, i, 1)?)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => (a + term)?,
                    });
                }
                Ok(acc.expect("K >= 1"))
            }
            Variant::Shared | Variant::MaskMid => {
                // All K branches share weights, so they run as one pass over a
                // K*batch stack ordered branch-major.
                let gate = |p: &Tensor, i: usize| p.narrow(1, i, 1);
                let skips = if self.variant == Variant::Shared {
                    h_enc
                        .iter()
                        .zip(&pyramid)
                        .map(|(f, p)| {
                            let parts = (0..k)
                                .map(|i| Ok(f.broadcast_mul(&gate(p, i)?)?))
                                .collect::<Result<Vec<_>>>()?;
                            Ok(Tensor::cat(&parts, 0)?)
                        })
                        .collect::<Result<Vec<_>>>()?
                } else {
                    h_enc
                        .iter()
                        .map(|f| Ok(Tensor::cat(&vec![f; k], 0)?))
                        .collect::<Result<Vec<_>>>()?
                };
                let mid_in = if self.variant == Variant::Shared {
                    Tensor::cat(&vec![h_mid; k], 0)?
                } else {
                    let low = pyramid.last().expect("at least one stage");
                    let parts = (0..k)
                        .map(|i| Ok(h_mid.broadcast_mul(&gate(low, i)?)?))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::cat(&parts, 0)?
                };
                let temb_all = Tensor::cat(&vec![temb; k], 0)?;
                self.counts.decoder.fetch_add(k, Ordering::Relaxed);
                let out = self.decoders[0].forward(&mid_in, &skips, &temb_all)?;
                let (_, c, h, w) = out.dims4()?;
                let out = out.reshape((k, b, c, h, w))?;
                let weights = m.transpose(0, 1)?.unsqueeze(2)?;
                Ok(out.broadcast_mul(&weights)?.sum(0)?)
            }
        }
    }
}
