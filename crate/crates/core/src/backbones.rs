//! Small stand-ins for the image, text and mask encoders and the mask decoder.
//!
//! All maps are channel-last (`[h, w, c]`). Images enter as `[H, W, 3]`
//! tensors scaled to `[-1, 1]`; masks as `[H, W]` tensors of zeros and ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::numerics::{Conv2d, Conv2dSpec, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub target_grid: usize,
    pub reference_grid: usize,
    /// Shared width of image features and the text embedding.
    pub channels: usize,
    pub text_vocab: usize,
    pub decoder_hidden: usize,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub freeze_mask: bool,
    pub freeze_decoder: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            target_grid: 16,
            reference_grid: 8,
            channels: 64,
            text_vocab: 4096,
            decoder_hidden: 64,
            freeze_image: true,
            freeze_text: true,
            freeze_mask: false,
            freeze_decoder: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for grid in [self.target_grid, self.reference_grid] {
            if grid == 0 || !self.image_size.is_multiple_of(grid) || !(self.image_size / grid).is_power_of_two() {
                return Err(CorError::Input(format!(
                    "grid {grid} must divide image size {} by a power of two",
                    self.image_size
                )));
            }
        }
        if self.channels < 4 || !self.channels.is_multiple_of(2) {
            return Err(CorError::Input(format!("channel width {} must be even and at least 4", self.channels)));
        }
        if self.text_vocab == 0 || self.decoder_hidden == 0 {
            return Err(CorError::Input("text vocabulary and decoder width must be positive".into()));
        }
        Ok(())
    }
}

/// Target, reference and text features plus the (trainable) mask features.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub f_tar: Tensor,
    pub f_ref: Tensor,
    pub f_mask: Tensor,
    pub f_txt: Tensor,
}

/// 8-bit channel values to `[-1, 1]`.
pub fn image_tensor(pixels: &[u8], height: usize, width: usize) -> Result<Tensor> {
    if pixels.len() != height * width * 3 {
        return Err(CorError::dim(format!("{} bytes for a {height}x{width} RGB image", pixels.len())));
    }
    Tensor::new(&[height, width, 3], pixels.iter().map(|v| *v as f64 / 127.5 - 1.0).collect())
}

pub fn check_binary(mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(CorError::InvalidMask(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

fn check_image(x: &Tensor, side: usize, channels: usize, what: &str) -> Result<()> {
    if x.shape() != [side, side, channels] {
        return Err(CorError::dim(format!("{what}: expected [{side}, {side}, {channels}], got {:?}", x.shape())));
    }
    Ok(())
}

/// Stride-2 3×3 conv + GeLU blocks, halving the resolution each time, then a
/// channel LayerNorm.
#[derive(Clone, Debug)]
pub struct ConvStack {
    blocks: Vec<Conv2d>,
    norm: LayerNorm,
    image_size: usize,
}

impl ConvStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        image_size: usize,
        grid: usize,
        channels: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let depth = (image_size / grid).trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(depth);
        let mut cin = 3;
        for i in 0..depth {
            let cout = if i == 0 && depth > 1 { channels / 2 } else { channels };
            let spec = Conv2dSpec::dense(2, 1);
            blocks.push(Conv2d::new(store, &format!("{name}.block{}", i + 1), cin, cout, 3, spec, frozen, rng));
            cin = cout;
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cin, frozen);
        ConvStack { blocks, norm, image_size }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        check_image(g.value(image), self.image_size, 3, "image encoder")?;
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(g, x)?;
            x = g.gelu(x)?;
        }
        self.norm.forward(g, x)
    }

    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let x = g.input(image.clone())?;
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect();
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }
}

/// Two convolutions taking a full-resolution mask to the reference grid.
#[derive(Clone, Debug)]
pub struct MaskEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    image_size: usize,
}

impl MaskEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let ratio = cfg.image_size / cfg.reference_grid;
        let s2 = if ratio >= 2 { 2 } else { 1 };
        let s1 = ratio / s2;
        let c = cfg.channels;
        let frozen = cfg.freeze_mask;
        let conv1 = Conv2d::new(store, "mask_encoder.conv1", 1, c / 2, 3, Conv2dSpec::dense(s1, 1), frozen, rng);
        let conv2 = Conv2d::new(store, "mask_encoder.conv2", c / 2, c, 3, Conv2dSpec::dense(s2, 1), frozen, rng);
        MaskEncoder { conv1, conv2, image_size: cfg.image_size }
    }

    /// `mask` is `[H, W]`.
    pub fn forward(&self, g: &mut Graph, mask: Var) -> Result<Var> {
        let s = g.shape(mask);
        if s != [self.image_size, self.image_size] {
            return Err(CorError::dim(format!("mask encoder: expected {0}x{0} mask, got {s:?}", self.image_size)));
        }
        check_binary(g.value(mask))?;
        let x = g.reshape(mask, &[self.image_size, self.image_size, 1])?;
        let x = self.conv1.forward(g, x)?;
        let x = g.gelu(x)?;
        self.conv2.forward(g, x)
    }

    pub fn encode(&self, store: &ParamStore, mask: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let m = g.input(mask.clone())?;
        let y = self.forward(&mut g, m)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias]
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(token: &str) -> u64 {
    token.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Hashed bag-of-tokens embedding followed by one linear layer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    table: ParamId,
    out: Linear,
    vocab: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let table = store.add_uniform("text_encoder.embedding", &[cfg.text_vocab, cfg.channels], 1, cfg.freeze_text, rng);
        let out = Linear::new(store, "text_encoder.out", cfg.channels, cfg.channels, cfg.freeze_text, rng);
        TextEncoder { table, out, vocab: cfg.text_vocab }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token) % self.vocab as u64) as usize
    }

    /// Token counts per hash bucket.
    pub fn counts(&self, text: &str) -> Result<Tensor> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(CorError::EmptyText);
        }
        let mut counts = Tensor::zeros(&[1, self.vocab]);
        for t in &tokens {
            counts.data_mut()[self.bucket(t)] += 1.0;
        }
        Ok(counts)
    }

    pub fn forward(&self, g: &mut Graph, text: &str) -> Result<Var> {
        let counts = g.input(self.counts(text)?)?;
        let table = g.param(self.table)?;
        let summed = g.matmul(counts, table)?;
        let d = g.shape(summed)[1];
        let summed = g.reshape(summed, &[d])?;
        self.out.forward(g, summed)
    }

    pub fn encode(&self, store: &ParamStore, text: &str) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let y = self.forward(&mut g, text)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.table, self.out.weight, self.out.bias]
    }
}

/// Similarity-guided decoder. Target features pass through a learned 1×1
/// embedding; their per-position dot product with the prompt is appended to
/// them, two 1×1 convolutions refine that into one logit per cell (the raw
/// similarity is added back), and the map is resized to image resolution.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    embed: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    image_size: usize,
}

impl MaskDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let frozen = cfg.freeze_decoder;
        let embed = Conv2d::new(store, "decoder.embed", c, c, 1, Conv2dSpec::dense(1, 0), frozen, rng);
        let conv1 = Conv2d::new(store, "decoder.conv1", c + 1, cfg.decoder_hidden, 1, Conv2dSpec::dense(1, 0), frozen, rng);
        let conv2 = Conv2d::new(store, "decoder.conv2", cfg.decoder_hidden, 1, 1, Conv2dSpec::dense(1, 0), frozen, rng);
        MaskDecoder { embed, conv1, conv2, image_size: cfg.image_size }
    }

    /// Per-position dot product of a `[h, w, d]` map with a `[d]` vector.
    pub fn similarity(g: &mut Graph, features: Var, prompt: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let d = g.shape(prompt).to_vec();
        if s.len() != 3 || d != [s[2]] {
            return Err(CorError::dim(format!("decoder: features {s:?} with prompt {d:?}")));
        }
        let flat = g.reshape(features, &[s[0] * s[1], s[2]])?;
        let col = g.reshape(prompt, &[s[2], 1])?;
        let sim = g.matmul(flat, col)?;
        g.reshape(sim, &[s[0], s[1], 1])
    }

    /// Returns `[H, W]` logits.
    pub fn forward(&self, g: &mut Graph, features: Var, prompt: Var) -> Result<Var> {
        let features = self.embed.forward(g, features)?;
        let sim = Self::similarity(g, features, prompt)?;
        let x = g.concat_last(&[features, sim])?;
        let x = self.conv1.forward(g, x)?;
        let x = g.gelu(x)?;
        let x = self.conv2.forward(g, x)?;
        let x = g.add(x, sim)?;
        let x = g.upsample_bilinear(x, self.image_size, self.image_size)?;
        g.reshape(x, &[self.image_size, self.image_size])
    }

    pub fn decode(&self, store: &ParamStore, features: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let f = g.input(features.clone())?;
        let p = g.input(prompt.clone())?;
        let y = self.forward(&mut g, f, p)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.embed.weight,
            self.embed.bias,
            self.conv1.weight,
            self.conv1.bias,
            self.conv2.weight,
            self.conv2.bias,
        ]
    }
}

/// Every encoder and the decoder, registered in one parameter store.
#[derive(Clone, Debug)]
pub struct Backbones {
    pub config: BackboneConfig,
    pub target: ConvStack,
    pub reference: ConvStack,
    pub mask: MaskEncoder,
    pub text: TextEncoder,
    pub decoder: MaskDecoder,
}

impl Backbones {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let target = ConvStack::new(store, "target_encoder", c.image_size, c.target_grid, c.channels, c.freeze_image, rng);
        let reference =
            ConvStack::new(store, "reference_encoder", c.image_size, c.reference_grid, c.channels, c.freeze_image, rng);
        let mask = MaskEncoder::new(store, c, rng);
        let text = TextEncoder::new(store, c, rng);
        let decoder = MaskDecoder::new(store, c, rng);
        Ok(Backbones { config: config.clone(), target, reference, mask, text, decoder })
    }

    pub fn encode_target(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.target.encode(store, image)
    }

    pub fn encode_reference(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.reference.encode(store, image)
    }

    pub fn encode_text(&self, store: &ParamStore, text: &str) -> Result<Tensor> {
        self.text.encode(store, text)
    }

    pub fn encode_mask(&self, store: &ParamStore, mask: &Tensor) -> Result<Tensor> {
        self.mask.encode(store, mask)
    }

    pub fn decode_mask(&self, store: &ParamStore, f_tar: &Tensor, f_avti: &Tensor) -> Result<Tensor> {
        self.decoder.decode(store, f_tar, f_avti)
    }

    pub fn encode_all(&self, store: &ParamStore, target: &Tensor, reference: &Tensor, mask: &Tensor, text: &str) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            f_tar: self.encode_target(store, target)?,
            f_ref: self.encode_reference(store, reference)?,
            f_mask: self.encode_mask(store, mask)?,
            f_txt: self.encode_text(store, text)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, Backbones) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbones::new(&mut store, &BackboneConfig::default(), &mut rng).unwrap();
        (store, b)
    }

    fn noise_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[64, 64, 3], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_shapes() {
        let (store, b) = build();
        let img = noise_image(2);
        let c = BackboneConfig::default().channels;
        assert_eq!(b.encode_target(&store, &img).unwrap().shape(), &[16, 16, c]);
        assert_eq!(b.encode_reference(&store, &img).unwrap().shape(), &[8, 8, c]);
        assert_eq!(b.encode_mask(&store, &Tensor::zeros(&[64, 64])).unwrap().shape(), &[8, 8, c]);
        assert_eq!(b.encode_text(&store, "change the color to light").unwrap().shape(), &[c]);
    }

    #[test]
    fn resolution_mismatch_is_a_dimension_error() {
        let (store, b) = build();
        let small = Tensor::zeros(&[32, 32, 3]);
        assert!(matches!(b.encode_target(&store, &small), Err(CorError::Dimension(_))));
    }

    #[test]
    fn target_and_reference_encoders_differ() {
        let (store, b) = build();
        let img = noise_image(3);
        let t = b.encode_target(&store, &img).unwrap();
        let r = b.encode_reference(&store, &img).unwrap();
        assert_ne!(&t.data()[..8], &r.data()[..8]);
        assert_eq!(t.data(), b.encode_target(&store, &img).unwrap().data());
    }

    #[test]
    fn empty_text_and_non_binary_mask_are_rejected() {
        let (store, b) = build();
        assert!(matches!(b.encode_text(&store, ""), Err(CorError::EmptyText)));
        assert!(matches!(b.encode_text(&store, " ,; "), Err(CorError::EmptyText)));
        let mut m = Tensor::zeros(&[64, 64]);
        m.data_mut()[0] = 0.5;
        assert!(matches!(b.encode_mask(&store, &m), Err(CorError::InvalidMask(_))));
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Change the COLOR, to light!"), vec!["change", "the", "color", "to", "light"]);
    }

    #[test]
    fn decoder_shape() {
        let (store, b) = build();
        let f = noise_image(4);
        let c = BackboneConfig::default().channels;
        let f = Tensor::from_fn(&[16, 16, c], |i| f.data()[i % f.numel()]);
        let p = Tensor::from_fn(&[c], |i| (i as f64 - 16.0) / 16.0);
        let y = b.decode_mask(&store, &f, &p).unwrap();
        assert_eq!(y.shape(), &[64, 64]);
    }
}
