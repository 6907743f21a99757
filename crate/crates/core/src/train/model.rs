use crate::backbone::{AggBlock, Cbs, CbsKind, DecoderStage, DownSample};
use crate::error::{Error, Result};
use crate::mae::MicroMae;
use crate::nn::{join, named_tensors, Conv2d, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

use super::config::{NetworkConfig, LEVELS};

/// Name prefix of the masked-autoencoder parameters.
pub const MAE_PREFIX: &str = "mae.";

#[derive(Debug)]
pub struct EncoderLevel<T: Element> {
    pub block: AggBlock<T>,
    pub down: DownSample<T>,
}

/// The full segmentation network.
#[derive(Debug)]
pub struct Network<T: Element = f32> {
    pub cfg: NetworkConfig,
    pub stem: Cbs<T>,
    pub encoder: Vec<EncoderLevel<T>>,
    pub bottleneck: AggBlock<T>,
    pub mae: Option<MicroMae<T>>,
    /// Deepest stage first.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv2d<T>,
}

/// Encoder activations kept for the skip connections.
pub struct Features<T: Element> {
    /// Shallowest first.
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

#[derive(Debug)]
pub struct NetOutput<T: Element> {
    /// Foreground probabilities `[B, 1, H, W]`.
    pub prob: Tensor<T>,
    /// Masked-patch reconstruction loss; zero without the MAE or masking.
    pub recon_loss: Tensor<T>,
    /// Tokens the MAE encoder saw per sample (0 without the MAE).
    pub encoder_tokens: usize,
}

impl<T: Element> Network<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let f = &cfg.encoder_filters;
        let stem = Cbs::new(CbsKind::Cbs2, 3, f[0], rng);
        let mut encoder = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            encoder.push(EncoderLevel {
                block: AggBlock::new(cfg.block, f[i], f[i], rng)?,
                down: DownSample::new(f[i], f[i + 1], rng)?,
            });
        }
        let bottleneck = AggBlock::new(cfg.block, f[LEVELS], f[LEVELS], rng)?;
        let mae = if cfg.use_mae { Some(MicroMae::new(cfg.mae(), rng)?) } else { None };
        let mut decoder = Vec::with_capacity(LEVELS);
        for i in (0..LEVELS).rev() {
            decoder.push(DecoderStage::new(cfg.block, f[i + 1], f[i], cfg.path_repeats[i], rng)?);
        }
        let head = Conv2d::new(f[0], 1, 1, 1, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            bottleneck,
            mae,
            decoder,
            head,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let div = 1 << LEVELS;
        match *x.shape() {
            [_, 3, h, w] if h % div == 0 && w % div == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::InvalidShape {
                op: "network",
                shape: x.shape().to_vec(),
                reason: format!("expected [B, 3, H, W] with H and W multiples of {div}"),
            }),
        }
    }

    pub fn encode(&self, x: &Tensor<T>, phase: Phase) -> Result<Features<T>> {
        self.check_input(x)?;
        let mut cur = self.stem.forward(x, phase)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for level in &self.encoder {
            let s = level.block.forward(&cur, phase)?;
            cur = level.down.forward(&s, phase)?;
            skips.push(s);
        }
        Ok(Features {
            skips,
            bottleneck: self.bottleneck.forward(&cur, phase)?,
        })
    }

    /// Decoder and head; returns probabilities.
    pub fn decode(&self, bottleneck: &Tensor<T>, skips: &[Tensor<T>], phase: Phase) -> Result<Tensor<T>> {
        let mut cur = bottleneck.clone();
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            cur = stage.forward(&cur, skip, phase)?;
        }
        Ok(self.head.forward(&cur)?.sigmoid())
    }

    /// Full pass. `mask_ratio` only matters with the MAE; pass 0 for
    /// deterministic inference.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase, mask_ratio: f64, rng: &mut Rng) -> Result<NetOutput<T>> {
        let feats = self.encode(x, phase)?;
        let (bottleneck, recon_loss, encoder_tokens) = match &self.mae {
            Some(mae) => {
                let out = mae.forward(&feats.bottleneck, mask_ratio, rng)?;
                (out.recon_feat, out.recon_loss, out.encoder_tokens)
            }
            None => (feats.bottleneck, Tensor::scalar(T::zero()), 0),
        };
        Ok(NetOutput {
            prob: self.decode(&bottleneck, &feats.skips, phase)?,
            recon_loss,
            encoder_tokens,
        })
    }

    /// Every named tensor, buffers included, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>, ParamKind)> {
        named_tensors(self)
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(self)
    }

    /// Trainable parameters whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _, k)| *k == ParamKind::Trainable && n.starts_with(prefix))
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    /// Per-component trainable counts for reporting.
    pub fn layer_table(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (name, t, kind) in self.named_tensors() {
            if kind != ParamKind::Trainable {
                continue;
            }
            let mut parts = name.split('.');
            let head = parts.next().unwrap_or_default();
            let group = match head {
                "enc" | "dec" => format!("{head}.{}", parts.next().unwrap_or_default()),
                _ => head.to_string(),
            };
            match rows.last_mut() {
                Some((g, n)) if *g == group => *n += t.numel(),
                _ => rows.push((group, t.numel())),
            }
        }
        rows
    }
}

impl<T: Element> Module<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, level) in self.encoder.iter().enumerate() {
            level.block.visit(&join(prefix, &format!("enc.{i}.block")), f);
            level.down.visit(&join(prefix, &format!("enc.{i}.down")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        if let Some(m) = &self.mae {
            m.visit(&join(prefix, MAE_PREFIX.trim_end_matches('.')), f);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            stage.visit(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BlockKind;

    pub(crate) fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            encoder_filters: vec![4, 4, 8, 8, 8],
            path_repeats: vec![2, 1, 1, 1],
            mae_dim: 8,
            mae_dec_dim: 8,
            mae_enc_depth: 1,
            mae_dec_depth: 1,
            mae_heads: 2,
            mlp_ratio: 2,
            patch: 2,
            input_side: 32,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn small_forward_shapes() {
        let mut r = Rng::new(0);
        let net = Network::<f32>::new(&small_cfg(), &mut r).unwrap();
        let x = Tensor::zeros(&[2, 3, 64, 64]);
        let out = net.forward(&x, Phase::Train, 0.75, &mut r).unwrap();
        assert_eq!(out.prob.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.encoder_tokens, 1);
        let feats = net.encode(&x, Phase::Eval).unwrap();
        assert_eq!(feats.bottleneck.shape(), &[2, 8, 4, 4]);
        assert!(net.forward(&Tensor::zeros(&[1, 3, 20, 32]), Phase::Eval, 0.0, &mut r).is_err());
    }

    #[test]
    fn names_are_unique_and_mae_prefixed() {
        let mut r = Rng::new(1);
        let net = Network::<f32>::new(&small_cfg(), &mut r).unwrap();
        let names: Vec<String> = net.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let set: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.iter().any(|n| n == "mae.mask_token"));
        let total: usize = net.layer_table().iter().map(|(_, n)| n).sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn ablation_lattice_builds() {
        let mut r = Rng::new(2);
        for block in [BlockKind::Elan, BlockKind::Dcelan] {
            for use_mae in [false, true] {
                let cfg = NetworkConfig {
                    block,
                    use_mae,
                    ..small_cfg()
                };
                let net = Network::<f32>::new(&cfg, &mut r).unwrap();
                assert_eq!(net.mae.is_some(), use_mae);
            }
        }
    }
}
