//! The conditional noise predictor (a small U-Net with timestep embedding and
//! bottleneck cross-attention), the optional convolutional autoencoder, and
//! [`ModelBundle`], which ties them to a vocabulary and noise schedule.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{noise_loss, LossDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{erase_background, Mask, Raster, CHANNELS};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder, ParamStore, Trainable};
use crate::tensor::{Real, Tensor};
use crate::textcond::{Prompt, TextEncoder, Vocab, DEFAULT_PROMPT_LEN, DEFAULT_TEXT_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderKind {
    /// Latent equals pixels.
    Identity,
    /// Learned 2x-downsampling encoder and mirror decoder.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub autoencoder: AutoencoderKind,
    pub latent_channels: usize,
    pub base_width: usize,
    pub n_down: usize,
    pub attn_dim: usize,
    pub image_size: usize,
    pub text_dim: usize,
    pub prompt_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderKind::Identity,
            latent_channels: 3,
            base_width: 32,
            n_down: 2,
            attn_dim: 64,
            image_size: 32,
            text_dim: DEFAULT_TEXT_DIM,
            prompt_len: DEFAULT_PROMPT_LEN,
        }
    }
}

impl DenoiserConfig {
    /// Conv-autoencoder variant with a 4-channel latent.
    pub fn conv() -> Self {
        Self {
            autoencoder: AutoencoderKind::Conv,
            latent_channels: 4,
            ..Self::default()
        }
    }

    /// `[z_t, M, b]` concatenated on channels.
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn latent_size(&self) -> usize {
        match self.autoencoder {
            AutoencoderKind::Identity => self.image_size,
            AutoencoderKind::Conv => self.image_size / 2,
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.latent_channels, s, s]
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.n_down).map(|i| self.base_width << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.autoencoder == AutoencoderKind::Identity && self.latent_channels != CHANNELS {
            return bad(format!(
                "identity autoencoder needs latent_channels = 3, got {}",
                self.latent_channels
            ));
        }
        if self.autoencoder == AutoencoderKind::Conv && self.image_size % 2 != 0 {
            return bad(format!("conv autoencoder needs an even image size, got {}", self.image_size));
        }
        if self.latent_channels == 0 || self.base_width < 2 || self.base_width % 2 != 0 {
            return bad("latent_channels must be >= 1 and base_width even and >= 2".into());
        }
        let ls = self.latent_size();
        if ls == 0 || ls % (1 << self.n_down) != 0 {
            return bad(format!(
                "latent size {ls} is not divisible by 2^{} (n_down)",
                self.n_down
            ));
        }
        if self.attn_dim == 0 || self.text_dim == 0 || self.prompt_len < 2 {
            return bad("attn_dim, text_dim must be positive and prompt_len >= 2".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![T::zero(); dim];
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = T::of((t as f64 * f).sin());
            row[half + i] = T::of((t as f64 * f).cos());
        }
        data.extend(row);
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, temb_dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                norm1: GroupNorm::new(pb, "norm1", cin)?,
                conv1: Conv2d::new(pb, "conv1", cin, cout, 3, 1, 1.0)?,
                temb: Linear::new(pb, "temb", temb_dim, cout, true)?,
                norm2: GroupNorm::new(pb, "norm2", cout)?,
                conv2: Conv2d::new(pb, "conv2", cout, cout, 3, 1, 1.0)?,
                skip: if cin != cout {
                    Some(Conv2d::new(pb, "skip", cin, cout, 1, 1, 1.0)?)
                } else {
                    None
                },
            })
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, s, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, s, h)?;
        let t = self.temb.forward(g, s, temb)?;
        let h = g.add_channel(h, t)?;
        let h = self.norm2.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Single-head attention from spatial queries to text keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    dim: usize,
}

impl CrossAttention {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, ch: usize, text_dim: usize, dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                norm: GroupNorm::new(pb, "norm", ch)?,
                q: Linear::new(pb, "q", ch, dim, false)?,
                k: Linear::new(pb, "k", text_dim, dim, false)?,
                v: Linear::new(pb, "v", text_dim, dim, false)?,
                o: Linear::new(pb, "o", dim, ch, true)?,
                dim,
            })
        })
    }

    /// `x: [N,C,H,W]`, `text: [N,L,D]`.
    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, text: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let ts = g.shape(text).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (l, d) = (ts[1], ts[2]);
        let hn = self.norm.forward(g, s, x)?;
        let tok = g.to_tokens(hn)?;
        let tok = g.reshape(tok, &[n * h * w, c])?;
        let q = self.q.forward(g, s, tok)?;
        let q = g.reshape(q, &[n, h * w, self.dim])?;
        let txt = g.reshape(text, &[n * l, d])?;
        let k = self.k.forward(g, s, txt)?;
        let k = g.reshape(k, &[n, l, self.dim])?;
        let v = self.v.forward(g, s, txt)?;
        let v = g.reshape(v, &[n, l, self.dim])?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, T::of(1.0 / (self.dim as f64).sqrt()));
        let attn = g.softmax(scores);
        let mixed = g.bmm(attn, v)?;
        let mixed = g.reshape(mixed, &[n * h * w, self.dim])?;
        let out = self.o.forward(g, s, mixed)?;
        let out = g.reshape(out, &[n, h * w, c])?;
        let out = g.from_tokens(out, h, w)?;
        g.add(x, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    attn: CrossAttention,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    base: usize,
}

impl UNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &DenoiserConfig) -> Result<Self> {
        let w = cfg.widths();
        let temb = 4 * cfg.base_width;
        pb.scoped("unet", |pb| {
            let conv_in = Conv2d::new(pb, "conv_in", cfg.input_channels(), w[0], 3, 1, 1.0)?;
            let time1 = Linear::new(pb, "time1", cfg.base_width, temb, true)?;
            let time2 = Linear::new(pb, "time2", temb, temb, true)?;
            let mut down = vec![ResBlock::new(pb, "down0", w[0], w[0], temb)?];
            let mut downsample = Vec::new();
            for i in 1..=cfg.n_down {
                downsample.push(Conv2d::new(pb, &format!("downsample{i}"), w[i - 1], w[i - 1], 3, 2, 1.0)?);
                down.push(ResBlock::new(pb, &format!("down{i}"), w[i - 1], w[i], temb)?);
            }
            let wn = w[cfg.n_down];
            let attn = CrossAttention::new(pb, "attn", wn, cfg.text_dim, cfg.attn_dim)?;
            let mid = ResBlock::new(pb, "mid", wn, wn, temb)?;
            let mut up = Vec::new();
            for i in (1..=cfg.n_down).rev() {
                up.push(ResBlock::new(pb, &format!("up{i}"), w[i] + w[i - 1], w[i - 1], temb)?);
            }
            let out_norm = GroupNorm::new(pb, "out_norm", w[0])?;
            // Small but nonzero so every parameter sees gradient from the start.
            let out_conv = Conv2d::new(pb, "out_conv", w[0], cfg.latent_channels, 3, 1, 0.1)?;
            Ok(Self {
                conv_in,
                time1,
                time2,
                down,
                downsample,
                attn,
                mid,
                up,
                out_norm,
                out_conv,
                base: cfg.base_width,
            })
        })
    }

    /// `x: [N, 2c+1, H, W]`, one timestep per item, `text: [N, L, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        ts: &[usize],
        text: Var,
    ) -> Result<Var> {
        let emb = g.input(timestep_embedding(ts, self.base));
        let temb = self.time1.forward(g, s, emb)?;
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, s, temb)?;
        let temb = g.silu(temb);

        let mut h = self.conv_in.forward(g, s, x)?;
        h = self.down[0].forward(g, s, h, temb)?;
        let mut skips = vec![h];
        for (i, ds) in self.downsample.iter().enumerate() {
            h = ds.forward(g, s, h)?;
            h = self.down[i + 1].forward(g, s, h, temb)?;
            skips.push(h);
        }
        skips.pop();
        h = self.attn.forward(g, s, h, text)?;
        h = self.mid.forward(g, s, h, temb)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.upsample2x(h)?;
            h = g.concat_channels(h, skip)?;
            h = block.forward(g, s, h, temb)?;
        }
        let h = self.out_norm.forward(g, s, h)?;
        let h = g.silu(h);
        self.out_conv.forward(g, s, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvAutoencoder {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
}

const AE_HIDDEN: usize = 16;

impl ConvAutoencoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, latent_channels: usize) -> Result<Self> {
        pb.scoped("ae", |pb| {
            Ok(Self {
                enc1: Conv2d::new(pb, "enc1", CHANNELS, AE_HIDDEN, 3, 1, 1.0)?,
                enc2: Conv2d::new(pb, "enc2", AE_HIDDEN, AE_HIDDEN, 3, 2, 1.0)?,
                enc3: Conv2d::new(pb, "enc3", AE_HIDDEN, latent_channels, 1, 1, 1.0)?,
                dec1: Conv2d::new(pb, "dec1", latent_channels, AE_HIDDEN, 3, 1, 1.0)?,
                dec2: Conv2d::new(pb, "dec2", AE_HIDDEN, AE_HIDDEN, 3, 1, 1.0)?,
                dec3: Conv2d::new(pb, "dec3", AE_HIDDEN, CHANNELS, 3, 1, 1.0)?,
            })
        })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.enc1.forward(g, s, x)?;
        let h = g.silu(h);
        let h = self.enc2.forward(g, s, h)?;
        let h = g.silu(h);
        self.enc3.forward(g, s, h)
    }

    /// Unclamped reconstruction; [`ModelBundle::decode_latent`] clamps.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        let h = g.upsample2x(z)?;
        let h = self.dec1.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.dec2.forward(g, s, h)?;
        let h = g.silu(h);
        self.dec3.forward(g, s, h)
    }
}

/// Where a bundle came from. The first entry is always the base model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare_token: Option<String>,
    /// Bundle of the previous review round, kept as provenance only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_round_hash: Option<String>,
}

impl LineageEntry {
    pub fn base() -> Self {
        Self {
            kind: "base".into(),
            ..Self::default()
        }
    }
}

/// Autoencoder, denoiser and text encoder parameters with their configs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real = f32> {
    pub config: DenoiserConfig,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<T>,
    pub lineage: Vec<LineageEntry>,
    unet: UNet,
    text: TextEncoder,
    ae: Option<ConvAutoencoder>,
}

struct Modules(UNet, TextEncoder, Option<ConvAutoencoder>);

fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &DenoiserConfig, vocab: &Vocab) -> Result<Modules> {
    let ae = match cfg.autoencoder {
        AutoencoderKind::Identity => None,
        AutoencoderKind::Conv => Some(ConvAutoencoder::new(pb, cfg.latent_channels)?),
    };
    let unet = UNet::new(pb, cfg)?;
    let text = TextEncoder::new(pb, vocab.len(), cfg.text_dim)?;
    Ok(Modules(unet, text, ae))
}

pub fn init_bundle(
    cfg: &DenoiserConfig,
    vocab: &Vocab,
    schedule: &NoiseSchedule,
    rng: &mut dyn RngCore,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let Modules(unet, text, ae) = build(&mut ParamBuilder::fresh(&mut params, rng), cfg, vocab)?;
    Ok(ModelBundle {
        config: cfg.clone(),
        vocab: vocab.clone(),
        schedule: schedule.clone(),
        params,
        lineage: vec![LineageEntry::base()],
        unet,
        text,
        ae,
    })
}

/// Area-average a pixel mask to latent resolution, re-binarized at 0.5,
/// as a `[1, h, w]` tensor.
pub fn mask_to_latent<T: Real>(m: &Mask, cfg: &DenoiserConfig) -> Result<Tensor<T>> {
    let s = cfg.latent_size();
    Ok(m.downsample(s, s)?.to_tensor())
}

/// Encoded training example: clean latent, latent mask, masked-background
/// latent, and prompt ids.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T: Real = f32> {
    pub z0: Tensor<T>,
    pub mask: Tensor<T>,
    pub background: Tensor<T>,
    pub prompts: Vec<Vec<usize>>,
}

impl<T: Real> PreparedBatch<T> {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn cast<U: Real>(&self) -> PreparedBatch<U> {
        PreparedBatch {
            z0: self.z0.cast(),
            mask: self.mask.cast(),
            background: self.background.cast(),
            prompts: self.prompts.clone(),
        }
    }
}

/// One training item before encoding.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Raster,
    pub mask: Mask,
    pub prompt: Prompt,
}

impl<T: Real> ModelBundle<T> {
    /// Rebuilds the architecture over loaded parameters, checking every shape.
    pub fn from_parts(
        config: DenoiserConfig,
        vocab: Vocab,
        schedule: NoiseSchedule,
        mut params: ParamStore<T>,
        lineage: Vec<LineageEntry>,
    ) -> Result<Self> {
        config.validate()?;
        let Modules(unet, text, ae) = build(&mut ParamBuilder::existing(&mut params), &config, &vocab)?;
        if lineage.is_empty() {
            return Err(Error::Checkpoint("empty lineage".into()));
        }
        Ok(Self {
            config,
            vocab,
            schedule,
            params,
            lineage,
            unet,
            text,
            ae,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schedule: self.schedule.clone(),
            params: self.params.cast(),
            lineage: self.lineage.clone(),
            unet: self.unet.clone(),
            text: self.text.clone(),
            ae: self.ae.clone(),
        }
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn autoencoder(&self) -> Option<&ConvAutoencoder> {
        self.ae.as_ref()
    }

    /// Rare tokens bound anywhere in this bundle's lineage.
    pub fn bound_tokens(&self) -> Vec<&str> {
        self.lineage
            .iter()
            .filter_map(|e| e.rare_token.as_deref())
            .collect()
    }

    /// The most recent subject binding, if any.
    pub fn binding(&self) -> Option<&LineageEntry> {
        self.lineage.iter().rev().find(|e| e.rare_token.is_some())
    }

    pub fn input_check(&self, image: &Raster) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::ShapeMismatch(format!(
                "model expects {s}x{s} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Image to `[c, h, w]` latent.
    pub fn encode_image(&self, image: &Raster) -> Result<Tensor<T>> {
        self.encode_images(std::slice::from_ref(image))
            .and_then(|t| t.reshape(&self.config.latent_shape()))
    }

    /// Images to a `[N, c, h, w]` latent batch.
    pub fn encode_images(&self, images: &[Raster]) -> Result<Tensor<T>> {
        for im in images {
            self.input_check(im)?;
        }
        let x = Tensor::stack(&images.iter().map(|r| r.to_tensor()).collect::<Vec<_>>())?;
        match &self.ae {
            None => Ok(x),
            Some(ae) => {
                let mut g = Graph::inference();
                let xv = g.input(x);
                let z = ae.encode(&mut g, &self.params, xv)?;
                Ok(g.value(z).clone())
            }
        }
    }

    /// `[c, h, w]` latent to a clamped image.
    pub fn decode_latent(&self, z: &Tensor<T>) -> Result<Raster> {
        z.expect_shape(&self.config.latent_shape())?;
        match &self.ae {
            None => Raster::from_tensor(z),
            Some(ae) => {
                let mut g = Graph::inference();
                let mut shape = vec![1];
                shape.extend_from_slice(z.shape());
                let zv = g.input(z.clone().reshape(&shape)?);
                let x = ae.decode(&mut g, &self.params, zv)?;
                let x = g.value(x).clone();
                let s = self.config.image_size;
                Raster::from_tensor(&x.reshape(&[CHANNELS, s, s])?)
            }
        }
    }

    pub fn encode_prompts_graph(&self, g: &mut Graph<T>, prompts: &[Vec<usize>]) -> Result<Var> {
        let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
        self.text.forward(g, &self.params, &refs)
    }

    /// Text embeddings `[N, L, D]` without gradient tracking.
    pub fn encode_prompts(&self, prompts: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = self.encode_prompts_graph(&mut g, prompts)?;
        Ok(g.value(v).clone())
    }

    /// Noise prediction on the graph from `[z_t, M, b]` and text embeddings.
    pub fn predict_noise_graph(
        &self,
        g: &mut Graph<T>,
        z_t: Var,
        ts: &[usize],
        mask: Var,
        background: Var,
        text: Var,
    ) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        let [c, h, w] = self.config.latent_shape();
        if zs != [zs[0], c, h, w] || g.shape(mask) != [zs[0], 1, h, w] || g.shape(background) != zs.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "predict_noise: z_t {zs:?}, mask {:?}, background {:?} for latent {c}x{h}x{w}",
                g.shape(mask),
                g.shape(background)
            )));
        }
        if ts.len() != zs[0] {
            return Err(Error::ShapeMismatch("one timestep per batch item".into()));
        }
        let x = g.concat_channels(z_t, mask)?;
        let x = g.concat_channels(x, background)?;
        self.unet.forward(g, &self.params, x, ts, text)
    }

    /// Inference noise prediction on `[N, ...]` tensors.
    pub fn predict_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        mask: &Tensor<T>,
        background: &Tensor<T>,
        text: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if t == 0 || t > self.schedule.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.schedule.steps)));
        }
        let mut g = Graph::inference();
        let n = z_t.shape().first().copied().unwrap_or(0);
        let (zv, mv, bv, tv) = (
            g.input(z_t.clone()),
            g.input(mask.clone()),
            g.input(background.clone()),
            g.input(text.clone()),
        );
        let out = self.predict_noise_graph(&mut g, zv, &vec![t; n], mv, bv, tv)?;
        let out = g.value(out).clone();
        if !out.is_finite() {
            return Err(Error::numerical("predict_noise", format!("non-finite output at t={t}")));
        }
        Ok(out)
    }

    /// Encodes images, masks and erased backgrounds for the loss.
    pub fn prepare(&self, examples: &[Example]) -> Result<PreparedBatch<T>> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let images: Vec<Raster> = examples.iter().map(|e| e.image.clone()).collect();
        let erased = examples
            .iter()
            .map(|e| erase_background(&e.image, &e.mask))
            .collect::<Result<Vec<_>>>()?;
        let masks = examples
            .iter()
            .map(|e| mask_to_latent(&e.mask, &self.config))
            .collect::<Result<Vec<_>>>()?;
        for e in examples {
            if e.prompt.token_ids.len() != self.config.prompt_len {
                return Err(Error::ShapeMismatch(format!(
                    "prompt has {} ids, model expects {}",
                    e.prompt.token_ids.len(),
                    self.config.prompt_len
                )));
            }
        }
        Ok(PreparedBatch {
            z0: self.encode_images(&images)?,
            mask: Tensor::stack(&masks)?,
            background: self.encode_images(&erased)?,
            prompts: examples.iter().map(|e| e.prompt.token_ids.clone()).collect(),
        })
    }

    /// Builds the noise-prediction loss for one batch and draw on `g`.
    pub fn loss_graph(&self, g: &mut Graph<T>, batch: &PreparedBatch<T>, draw: &LossDraw<T>) -> Result<Var> {
        noise_loss(g, &batch.z0, draw, &self.schedule, |g, zt, t| {
            let m = g.input(batch.mask.clone());
            let b = g.input(batch.background.clone());
            let text = self.encode_prompts_graph(g, &batch.prompts)?;
            self.predict_noise_graph(g, zt, &vec![t; batch.len()], m, b, text)
        })
    }

    /// Loss value without gradient tracking.
    pub fn loss_value(&self, batch: &PreparedBatch<T>, draw: &LossDraw<T>) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.loss_graph(&mut g, batch, draw)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    /// Denoiser plus the given rare-token row (and the whole text encoder
    /// when it is not frozen).
    pub fn finetune_set(&self, rare_id: usize, freeze_text_encoder: bool) -> Trainable {
        let mut tr = Trainable::with_prefix(&self.params, "unet.");
        if freeze_text_encoder {
            tr.rows.insert(self.text.embed, vec![rare_id]);
        } else {
            tr.full.extend(Trainable::with_prefix(&self.params, "text.").full);
        }
        tr
    }

    /// Parameters trained during base pretraining: everything but the autoencoder.
    pub fn pretrain_set(&self) -> Trainable {
        let mut tr = Trainable::with_prefix(&self.params, "unet.");
        tr.full.extend(Trainable::with_prefix(&self.params, "text.").full);
        tr
    }
}
