//! Event-frame hybrid autoencoder: dual-branch encoder with factorized
//! cross-attention fusion, 3-channel vector-quantized latent, and decoders
//! that fuse feature pyramids with the latent to synthesize the output.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod vq;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::blocks::l1_loss;
use crate::nn::layers::{join, Params};
use crate::nn::{Scalar, Tensor};
use crate::stca::AttentionConfig;
use crate::TrainRng;

pub use decoder::{DeblurDecoder, Decoder};
pub use encoder::{EncodeOutput, Encoder, PyramidLevel};
pub use vq::{QuantizeResult, VectorQuantizer};

/// The latent is always 3 channels.
pub const EMBED_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHead {
    #[default]
    KernelSynthesis,
    SimpleUnet,
}

/// Encoder fusion ablation modes. `ConcatL` is structurally identical to
/// `Concat`; the ablation harness widens its channels to match the STCA
/// parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Stca,
    Sca,
    Tca,
    Concat,
    ConcatL,
}

impl FusionMode {
    pub fn uses_event_branch(&self) -> bool {
        !matches!(self, FusionMode::Concat | FusionMode::ConcatL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HAEConfig {
    /// Number of downsampling blocks (f2..f5).
    pub n_down: usize,
    /// Image channels (1 grayscale, 3 color).
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub event_base_channels: usize,
    /// Temporal bins of the event voxel input.
    pub bins: usize,
    /// Residual blocks per encoder level.
    pub res_blocks: usize,
    pub codebook_size: usize,
    pub commitment_beta: f64,
    /// Kernel size of the deformable synthesis head.
    pub kernel_size: usize,
    pub attention: AttentionConfig,
    pub decoder_head: DecoderHead,
    pub fusion: FusionMode,
    /// Whether decoder fusion also sees the event pyramid features.
    pub fuse_event_pyramid: bool,
}

impl Default for HAEConfig {
    fn default() -> Self {
        HAEConfig {
            n_down: 3,
            in_channels: 1,
            base_channels: 32,
            channel_mult: vec![1, 2, 2, 4, 4],
            event_base_channels: 16,
            bins: 8,
            res_blocks: 2,
            codebook_size: 512,
            commitment_beta: 0.25,
            kernel_size: 5,
            attention: AttentionConfig::default(),
            decoder_head: DecoderHead::KernelSynthesis,
            fusion: FusionMode::Stca,
            fuse_event_pyramid: false,
        }
    }
}

impl HAEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.n_down) {
            return Err(Error::config(format!(
                "n_down must be in 2..=5, got {}",
                self.n_down
            )));
        }
        if self.channel_mult.len() < self.n_down {
            return Err(Error::config(format!(
                "channel_mult has {} entries, need n_down = {}",
                self.channel_mult.len(),
                self.n_down
            )));
        }
        if self.bins == 0 || self.bins > 32 {
            return Err(Error::config(format!(
                "bins must be in 1..=32, got {}",
                self.bins
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd".to_string()));
        }
        if self.codebook_size == 0 {
            return Err(Error::config("codebook must be non-empty".to_string()));
        }
        Ok(())
    }

    pub fn img_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn evt_channels(&self, level: usize) -> usize {
        self.event_base_channels * self.channel_mult[level]
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.n_down
    }

    /// Latent spatial dims for an input of `(h, w)`.
    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.downsample_factor(), w / self.downsample_factor())
    }

    /// Paper-like widths for the parameter-count comparison (f-n variants).
    pub fn paper(n_down: usize) -> Self {
        HAEConfig {
            n_down,
            in_channels: 3,
            base_channels: 64,
            channel_mult: vec![1, 2, 2, 4, 4],
            event_base_channels: 32,
            bins: 8,
            ..Default::default()
        }
    }
}

/// The full autoencoder: encoder, quantizer, and the configured decoder.
pub struct HaeModel<S: Scalar> {
    pub cfg: HAEConfig,
    pub encoder: Encoder<S>,
    pub quantizer: VectorQuantizer<S>,
    pub decoder: ModelDecoder<S>,
}

pub enum ModelDecoder<S: Scalar> {
    Kernel(Decoder<S>),
    Deblur(DeblurDecoder<S>),
}

impl<S: Scalar> HaeModel<S> {
    pub fn new(cfg: &HAEConfig, rng: &mut TrainRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg, rng);
        let quantizer = VectorQuantizer::new(cfg, rng);
        let decoder = match cfg.decoder_head {
            DecoderHead::KernelSynthesis => ModelDecoder::Kernel(Decoder::new(cfg, rng)),
            DecoderHead::SimpleUnet => ModelDecoder::Deblur(DeblurDecoder::new(cfg, rng)),
        };
        Ok(HaeModel {
            cfg: cfg.clone(),
            encoder,
            quantizer,
            decoder,
        })
    }

    pub fn kernel_decoder(&self) -> Result<&Decoder<S>> {
        match &self.decoder {
            ModelDecoder::Kernel(d) => Ok(d),
            ModelDecoder::Deblur(_) => Err(Error::domain(
                "checkpoint has a deblurring head, not a kernel-synthesis head".to_string(),
            )),
        }
    }

    pub fn deblur_decoder(&self) -> Result<&DeblurDecoder<S>> {
        match &self.decoder {
            ModelDecoder::Deblur(d) => Ok(d),
            ModelDecoder::Kernel(_) => Err(Error::domain(
                "checkpoint has a kernel-synthesis head, not a deblurring head".to_string(),
            )),
        }
    }
}

impl<S: Scalar> Params<S> for HaeModel<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.quantizer.collect(&join(prefix, "vq"), out);
        match &self.decoder {
            ModelDecoder::Kernel(d) => d.collect(&join(prefix, "decoder"), out),
            ModelDecoder::Deblur(d) => d.collect(&join(prefix, "deblur_decoder"), out),
        }
    }
}

/// L1 reconstruction error plus the quantizer regularization term.
pub fn stage1_loss<S: Scalar>(
    i_out: &Tensor<S>,
    i_gt: &Tensor<S>,
    vq_loss: &Tensor<S>,
) -> Result<Tensor<S>> {
    if i_out.shape() != i_gt.shape() {
        return Err(Error::domain(format!(
            "stage1_loss shape mismatch: {:?} vs {:?}",
            i_out.shape(),
            i_gt.shape()
        )));
    }
    Ok(l1_loss(i_out, i_gt).add(vq_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn stage1_loss_examples() {
        let a = Tensor::<f64>::from_array(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5));
        let zero = Tensor::<f64>::scalar(0.0);
        // identical images, zero vq -> 0
        assert_eq!(stage1_loss(&a, &a, &zero).unwrap().item(), 0.0);
        // constant offset 0.1 -> 0.1
        let b = a.add_scalar(0.1);
        let l = stage1_loss(&b, &a, &zero).unwrap().item();
        assert!((l - 0.1).abs() < 1e-12);
        // random pair matches brute-force mean|a-b| + vq
        let x = Tensor::<f64>::from_array(
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1, 0.9, 0.4, 0.7]).unwrap(),
        );
        let y = Tensor::<f64>::from_array(
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.3, 0.2, 0.8, 0.6]).unwrap(),
        );
        let vq = Tensor::<f64>::scalar(0.25);
        let manual = (0.2 + 0.7 + 0.4 + 0.1) / 4.0 + 0.25;
        let got = stage1_loss(&x, &y, &vq).unwrap().item();
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = HAEConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_down = 6;
        assert!(cfg.validate().is_err());
        cfg.n_down = 3;
        cfg.bins = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_width_parameter_count_matches_reported_size() {
        // f3 at paper-like widths: HAE + denoiser + condition-encoder copy
        // within +/-25% of the reported 18.7M parameters
        use crate::diffusion::{ConditionalUnet, DenoiserConfig};
        use crate::nn::layers::Params;
        use rand::SeedableRng;
        let mut rng = crate::TrainRng::seed_from_u64(0);
        let cfg = HAEConfig::paper(3);
        let hae = HaeModel::<f32>::new(&cfg, &mut rng).unwrap();
        let cond_encoder = Encoder::<f32>::new(&cfg, &mut rng);
        let unet = ConditionalUnet::<f32>::new(&DenoiserConfig::paper(), &mut rng).unwrap();
        let total = hae.param_count() + cond_encoder.param_count() + unet.param_count();
        let reported = 18_700_000f64;
        let rel = (total as f64 - reported).abs() / reported;
        assert!(
            rel <= 0.25,
            "paper-width parameter count {total} deviates {:.1}% from 18.7M",
            rel * 100.0
        );
    }

    #[test]
    fn latent_dims_follow_n_down() {
        let mut cfg = HAEConfig::default();
        cfg.n_down = 3;
        assert_eq!(cfg.latent_dims(256, 256), (32, 32));
        cfg.n_down = 4;
        assert_eq!(cfg.latent_dims(64, 64), (4, 4));
    }
}
