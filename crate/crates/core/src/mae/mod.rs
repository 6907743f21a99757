//! Masked autoencoder over the bottleneck feature map.

pub mod patch;

pub use patch::{patchify, random_masking, sincos_pos_embed, unpatchify, MaskPlan};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, ParamKind, TransformerBlock};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeConfig {
    /// Bottleneck channels.
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub dec_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl MaeConfig {
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch size, channels and MLP ratio must be positive".into()));
        }
        for d in [self.dim, self.dec_dim] {
            if d == 0 || d % 4 != 0 {
                return Err(Error::Config(format!("transformer width {d} must be a positive multiple of 4")));
            }
            if self.heads == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!("transformer width {d} is not divisible by {} heads", self.heads)));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MicroMae<T: Element = f32> {
    pub cfg: MaeConfig,
    pub patch_proj: Linear<T>,
    pub encoder: Vec<TransformerBlock<T>>,
    pub enc_to_dec: Linear<T>,
    /// Shared stand-in for every masked token, in decoder width.
    pub mask_token: Tensor<T>,
    pub decoder: Vec<TransformerBlock<T>>,
    pub pred_head: Linear<T>,
}

/// Result of [`MicroMae::forward`].
#[derive(Debug)]
pub struct MaeOutput<T: Element> {
    /// Same shape as the input map: originals at visible patches,
    /// predictions at masked ones.
    pub recon_feat: Tensor<T>,
    /// Mean squared error over masked patches (scalar).
    pub recon_loss: Tensor<T>,
    pub plan: MaskPlan,
    /// Tokens seen by the encoder per sample.
    pub encoder_tokens: usize,
}

impl<T: Element> MicroMae<T> {
    pub fn new(cfg: MaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.token_width();
        let patch_proj = Linear::new(w, cfg.dim, rng);
        let encoder = (0..cfg.enc_depth)
            .map(|_| TransformerBlock::new(cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let enc_to_dec = Linear::new(cfg.dim, cfg.dec_dim, rng);
        let mask = (0..cfg.dec_dim).map(|_| T::cast(rng.truncated_normal(0.0, 0.02))).collect();
        let mask_token = Tensor::parameter(mask, &[cfg.dec_dim])?;
        let decoder = (0..cfg.dec_depth)
            .map(|_| TransformerBlock::new(cfg.dec_dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let pred_head = Linear::new(cfg.dec_dim, w, rng);
        Ok(Self {
            cfg,
            patch_proj,
            encoder,
            enc_to_dec,
            mask_token,
            decoder,
            pred_head,
        })
    }

    /// Patch embedding plus encoder position table, `[B, N, D]`.
    pub fn embed(&self, patches: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
        let pos = sincos_pos_embed::<T>(grid, self.cfg.dim)?;
        self.patch_proj.forward(patches)?.add(&pos)
    }

    pub fn encode(&self, visible: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = visible.clone();
        for blk in &self.encoder {
            x = blk.forward(&x)?;
        }
        Ok(x)
    }

    /// Restores the full token set in original order and predicts every
    /// patch, `[B, N, P·P·C]`.
    pub fn decode(&self, encoded: &Tensor<T>, plan: &MaskPlan, grid: (usize, usize)) -> Result<Tensor<T>> {
        let b = encoded.dim(0);
        if encoded.rank() != 3 || encoded.dim(1) != plan.n_visible || plan.shuffle.len() != b || plan.tokens() != grid.0 * grid.1 {
            return Err(Error::ShapeMismatch {
                op: "mae_decode",
                lhs: encoded.shape().to_vec(),
                rhs: vec![plan.shuffle.len(), plan.n_visible, plan.tokens()],
            });
        }
        let y = self.enc_to_dec.forward(encoded)?;
        let full = if plan.n_masked() == 0 {
            y
        } else {
            let dd = self.cfg.dec_dim;
            let masks = self.mask_token.reshape(&[1, 1, dd])?.broadcast_to(&[b, plan.n_masked(), dd])?;
            Tensor::concat(&[y, masks], 1)?
        };
        let mut x = full.batch_gather(&plan.ids_restore)?.add(&sincos_pos_embed::<T>(grid, self.cfg.dec_dim)?)?;
        for blk in &self.decoder {
            x = blk.forward(&x)?;
        }
        self.pred_head.forward(&x)
    }

    /// Masks `ratio` of the patches of `feat`, reconstructs them, and
    /// splices predictions back into the map. Maps whose sides are not a
    /// multiple of the patch size are zero-padded for the round trip.
    pub fn forward(&self, feat: &Tensor<T>, ratio: f64, rng: &mut Rng) -> Result<MaeOutput<T>> {
        let [b, c, h, w] = *feat.shape() else {
            return Err(Error::InvalidShape {
                op: "mae_forward",
                shape: feat.shape().to_vec(),
                reason: "expected [B, C, H, W]".into(),
            });
        };
        if c != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                op: "mae_forward",
                lhs: feat.shape().to_vec(),
                rhs: vec![self.cfg.channels],
            });
        }
        let p = self.cfg.patch;
        let grid = (h.div_ceil(p), w.div_ceil(p));
        let n = grid.0 * grid.1;
        let plan = MaskPlan::new(b, n, ratio, rng)?;
        if plan.n_masked() == 0 {
            return Ok(MaeOutput {
                recon_feat: feat.clone(),
                recon_loss: Tensor::scalar(T::zero()),
                plan,
                encoder_tokens: n,
            });
        }
        let pads = [(0, 0), (0, 0), (0, grid.0 * p - h), (0, grid.1 * p - w)];
        let padded = if h % p == 0 && w % p == 0 { feat.clone() } else { feat.pad(&pads)? };
        let patches = patchify(&padded, p)?;
        let visible = self.embed(&patches, grid)?.batch_gather(&plan.keep_ids())?;
        let encoder_tokens = visible.dim(1);
        let pred = self.decode(&self.encode(&visible)?, &plan, grid)?;

        let m: Vec<T> = plan
            .mask_flags
            .iter()
            .flatten()
            .map(|&f| if f { T::one() } else { T::zero() })
            .collect();
        let m = Tensor::from_vec(m, &[b, n, 1])?;
        let target = patches.detach();
        let count = (b * plan.n_masked() * self.cfg.token_width()) as f64;
        let recon_loss = pred.sub(&target)?.square().mul(&m)?.sum_all().mul_scalar(1.0 / count);
        let tokens = patches.mul(&m.rsub_scalar(1.0))?.add(&pred.mul(&m)?)?;
        let recon = unpatchify(&tokens, p, grid)?;
        let recon_feat = if recon.shape() == feat.shape() { recon } else { recon.crop(&pads)? };
        Ok(MaeOutput {
            recon_feat,
            recon_loss,
            plan,
            encoder_tokens,
        })
    }
}

impl<T: Element> Module<T> for MicroMae<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.patch_proj.visit(&join(prefix, "patch_proj"), f);
        for (i, blk) in self.encoder.iter().enumerate() {
            blk.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.enc_to_dec.visit(&join(prefix, "enc_to_dec"), f);
        f(join(prefix, "mask_token"), &self.mask_token, ParamKind::Trainable);
        for (i, blk) in self.decoder.iter().enumerate() {
            blk.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.pred_head.visit(&join(prefix, "pred_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameters;
    use crate::testutil::randn;

    fn tiny() -> MaeConfig {
        MaeConfig {
            channels: 3,
            patch: 2,
            dim: 8,
            dec_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn zero_ratio_passes_map_through() {
        let mut r = Rng::new(0);
        let mae = MicroMae::<f64>::new(tiny(), &mut r).unwrap();
        let x = randn(&mut r, &[2, 3, 8, 8]);
        let out = mae.forward(&x, 0.0, &mut r).unwrap();
        assert!(out.recon_feat.bitwise_eq(&x));
        assert_eq!(out.recon_loss.item(), 0.0);
    }

    #[test]
    fn default_grid_keeps_four_tokens() {
        let mut r = Rng::new(1);
        let mae = MicroMae::<f32>::new(MaeConfig { channels: 4, patch: 4, ..tiny() }, &mut r).unwrap();
        let out = mae.forward(&randn(&mut r, &[1, 4, 16, 16]), 0.75, &mut r).unwrap();
        assert_eq!(out.encoder_tokens, 4);
        assert_eq!(out.plan.n_masked(), 12);
        assert_eq!(out.recon_feat.shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn decoder_emits_all_tokens() {
        let mut r = Rng::new(2);
        let mae = MicroMae::<f32>::new(tiny(), &mut r).unwrap();
        let plan = MaskPlan::new(1, 16, 0.75, &mut r).unwrap();
        let enc = randn(&mut r, &[1, 4, 8]);
        assert_eq!(mae.decode(&enc, &plan, (4, 4)).unwrap().shape(), &[1, 16, 12]);
        assert!(mae.decode(&randn(&mut r, &[1, 5, 8]), &plan, (4, 4)).is_err());
    }

    #[test]
    fn encoder_without_blocks_is_identity() {
        let mut r = Rng::new(3);
        let mae = MicroMae::<f64>::new(MaeConfig { enc_depth: 0, ..tiny() }, &mut r).unwrap();
        let v = randn(&mut r, &[2, 3, 8]);
        assert!(mae.encode(&v).unwrap().bitwise_eq(&v));
    }

    #[test]
    fn visible_patches_keep_originals() {
        let mut r = Rng::new(4);
        let mae = MicroMae::<f64>::new(tiny(), &mut r).unwrap();
        let x = randn(&mut r, &[1, 3, 8, 8]);
        let out = mae.forward(&x, 0.5, &mut r).unwrap();
        let (a, b) = (patchify(&x, 2).unwrap().to_vec(), patchify(&out.recon_feat, 2).unwrap().to_vec());
        for (i, &masked) in out.plan.mask_flags[0].iter().enumerate() {
            let same = a[i * 12..(i + 1) * 12] == b[i * 12..(i + 1) * 12];
            assert_eq!(same, !masked, "token {i}");
        }
    }

    #[test]
    fn masked_inputs_do_not_leak_into_predictions() {
        let mut r = Rng::new(5);
        let mae = MicroMae::<f64>::new(tiny(), &mut r).unwrap();
        let x = randn(&mut r, &[1, 3, 8, 8]);
        let out = mae.forward(&x, 0.75, &mut Rng::new(77)).unwrap();
        // overwrite every masked patch with noise; predictions must not move
        let mut tok = patchify(&x, 2).unwrap().to_vec();
        for (i, &m) in out.plan.mask_flags[0].iter().enumerate() {
            if m {
                tok[i * 12..(i + 1) * 12].iter_mut().for_each(|v| *v += 5.0);
            }
        }
        let x2 = unpatchify(&Tensor::from_vec(tok, &[1, 16, 12]).unwrap(), 2, (4, 4)).unwrap();
        let out2 = mae.forward(&x2, 0.75, &mut Rng::new(77)).unwrap();
        assert!(out.recon_feat.bitwise_eq(&out2.recon_feat));
        assert!(out.recon_loss.item() != out2.recon_loss.item());
    }

    #[test]
    fn loss_is_mean_over_masked_elements() {
        // pred = target + 1 on the masked patches gives loss 1
        let mut r = Rng::new(6);
        let mae = MicroMae::<f64>::new(tiny(), &mut r).unwrap();
        let x = randn(&mut r, &[1, 3, 4, 4]);
        let plan = MaskPlan::new(1, 4, 0.25, &mut Rng::new(3)).unwrap();
        assert_eq!(plan.n_masked(), 1);
        crate::testutil::fill(&mae.pred_head.weight, 0.0);
        let out = mae.forward(&x, 0.25, &mut Rng::new(3)).unwrap();
        let target = patchify(&x, 2).unwrap().to_vec();
        let masked = out.plan.mask_flags[0].iter().position(|&m| m).unwrap();
        let bias: Vec<f64> = target[masked * 12..(masked + 1) * 12].iter().map(|v| v + 1.0).collect();
        mae.pred_head.bias.set_data(&bias).unwrap();
        let out = mae.forward(&x, 0.25, &mut Rng::new(3)).unwrap();
        assert!((out.recon_loss.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padded_grid_round_trips_shape() {
        let mut r = Rng::new(7);
        let mae = MicroMae::<f32>::new(MaeConfig { patch: 4, ..tiny() }, &mut r).unwrap();
        let out = mae.forward(&randn(&mut r, &[1, 3, 14, 14]), 0.75, &mut r).unwrap();
        assert_eq!(out.recon_feat.shape(), &[1, 3, 14, 14]);
        assert_eq!(out.plan.tokens(), 16);
    }

    #[test]
    fn all_parameters_receive_gradient() {
        let mut r = Rng::new(8);
        let mae = MicroMae::<f64>::new(tiny(), &mut r).unwrap();
        let x = randn(&mut r, &[2, 3, 8, 8]);
        mae.forward(&x, 0.75, &mut r).unwrap().recon_loss.backward().unwrap();
        for p in parameters(&mae) {
            assert!(p.grad_norm() > 0.0, "{:?}", p.shape());
        }
    }
}
