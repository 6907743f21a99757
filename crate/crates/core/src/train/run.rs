use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use super::checkpoint::{Checkpoint, Stage, TrainState};
use super::config::RunConfig;
use super::model::{Network, MAE_PREFIX};
use super::optim::{cosine_lr, Adam, AdamParams};
use crate::data::preprocess::{draw_scale, pad_to_square_resize, resize_sample, restore_original, stack, SegSample};
use crate::data::{load_image, save_mask};
use crate::error::{Error, Result};
use crate::nn::{zero_grads, ParamKind, Phase};
use crate::objective::{boundary_weight_map, combined_loss, metrics, tversky_loss, MetricReport};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

/// Box size of the optional hard-pixel weight map.
const BOUNDARY_WINDOW: usize = 31;
pub const LOG_FILE: &str = "train.log";
pub const PRETRAIN_LOG_FILE: &str = "pretrain.log";
pub const REPORT_FILE: &str = "report.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Brings every sample to the canonical square side.
pub fn canonicalize(samples: &[SegSample], side: usize) -> Result<Vec<SegSample>> {
    samples
        .iter()
        .map(|s| {
            if s.height() == side && s.width() == side {
                Ok(s.clone())
            } else {
                Ok(pad_to_square_resize(s, side)?.0)
            }
        })
        .collect()
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub last_report: Option<MetricReport>,
    /// Set when training stopped on `target_dice`.
    pub reached_target: bool,
}

/// Network, optimizer and loop position.
pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network<f32>,
    pub opt: Adam<f32>,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub stage: Stage,
    rng: Rng,
}

impl Trainer {
    /// Fresh network. Weights come from `Rng::new(seed)`, the loop (shuffling,
    /// scales, masking) from an independent stream of the same seed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(&cfg.net, &mut Rng::new(cfg.train.seed))?;
        Ok(Self {
            opt: Adam::new(adam_params(&cfg)),
            rng: Rng::keyed(cfg.train.seed, 1),
            epoch: 0,
            stage: Stage::Train,
            net,
            cfg,
        })
    }

    /// Restores network, optimizer and loop state exactly.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        ck.apply(&t.net, "")?;
        t.opt.load_state(ck.state.adam_step, &ck.extras(&t.net))?;
        t.epoch = ck.state.epoch;
        t.stage = ck.state.stage;
        t.rng = Rng::new(ck.state.rng);
        Ok(t)
    }

    /// Copies only the MAE weights of a pretraining checkpoint.
    pub fn load_pretrained_mae(&mut self, ck: &Checkpoint) -> Result<usize> {
        if !self.cfg.net.use_mae {
            return Err(Error::Checkpoint("network has no MAE to initialise".into()));
        }
        if !ck.config.net.use_mae || ck.config.net.mae() != self.cfg.net.mae() {
            return Err(Error::Checkpoint("MAE configuration differs from the checkpoint".into()));
        }
        ck.apply(&self.net, MAE_PREFIX)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            stage: self.stage,
            epoch: self.epoch,
            rng: self.rng.state(),
            adam_step: self.opt.step,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(&self.net, &self.cfg, self.state(), self.opt.state_tensors()?))
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.cfg.train.lr, self.epoch, self.cfg.train.epochs)
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        self.rng.permutation(n).chunks(self.cfg.train.batch).map(<[usize]>::to_vec).collect()
    }

    fn trainable(&self, filter: impl Fn(&str) -> bool) -> Vec<(String, Tensor<f32>)> {
        self.net
            .named_tensors()
            .into_iter()
            .filter(|(n, _, k)| *k == ParamKind::Trainable && filter(n))
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    /// One pass over canonical samples with the combined objective; returns
    /// the mean batch loss.
    pub fn train_epoch(&mut self, data: &[SegSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let params = self.trainable(|_| true);
        let lr = self.lr();
        let (net_cfg, train_cfg) = (self.cfg.net.clone(), self.cfg.train.clone());
        let mut total = 0.0;
        let batches = self.batches(data.len());
        for batch in &batches {
            let side = if train_cfg.multiscale { draw_scale(&mut self.rng) } else { net_cfg.input_side };
            let samples: Vec<SegSample> = batch
                .iter()
                .map(|&i| if side == data[i].height() { data[i].clone() } else { resize_sample(&data[i], side) })
                .collect();
            zero_grads(&self.net);
            let mut batch_loss = 0.0;
            for chunk in samples.chunks(train_cfg.micro_batch) {
                let refs: Vec<&SegSample> = chunk.iter().collect();
                let (x, y) = stack(&refs)?;
                let out = self.net.forward(&x, Phase::Train, net_cfg.mask_ratio, &mut self.rng)?;
                let weight = if net_cfg.boundary_lambda > 0.0 {
                    Some(boundary_weight_map(&y, BOUNDARY_WINDOW, net_cfg.boundary_lambda)?)
                } else {
                    None
                };
                let seg = tversky_loss(&out.prob, &y, net_cfg.tversky, weight.as_ref())?;
                let loss = combined_loss(&seg, &out.recon_loss, net_cfg.loss)?;
                let share = chunk.len() as f64 / samples.len() as f64;
                let scaled = loss.mul_scalar(share);
                batch_loss += scaled.item() as f64;
                scaled.backward()?;
            }
            self.opt.update(&params, lr)?;
            total += batch_loss;
        }
        zero_grads(&self.net);
        Ok(total / batches.len() as f64)
    }

    /// Bottleneck features of canonical samples under the current encoder,
    /// in eval mode and without a graph.
    pub fn bottleneck_features(&self, data: &[SegSample]) -> Result<Vec<Tensor<f32>>> {
        let _g = no_grad();
        data.iter()
            .map(|s| {
                let (x, _) = stack(&[s])?;
                Ok(self.net.encode(&x, Phase::Eval)?.bottleneck.detach())
            })
            .collect()
    }

    /// One MAE pretraining pass. With `cached` features the convolutional
    /// encoder is frozen; otherwise it is trained jointly through the
    /// reconstruction loss. Returns the mean masked-patch MSE.
    pub fn pretrain_epoch(&mut self, data: &[SegSample], cached: Option<&[Tensor<f32>]>) -> Result<f64> {
        if self.net.mae.is_none() {
            return Err(Error::Config("MAE pretraining needs use_mae = true".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("pretraining set is empty".into()));
        }
        let batches = self.batches(data.len());
        let frozen = cached.is_some();
        let params = self.trainable(|n| n.starts_with(MAE_PREFIX) || (!frozen && is_encoder_param(n)));
        let lr = self.lr();
        let (ratio, train_cfg, side) = (self.cfg.net.mask_ratio, self.cfg.train.clone(), self.cfg.net.input_side);
        let mae = self.net.mae.as_ref().expect("checked above");
        let mut total = 0.0;
        for batch in &batches {
            zero_grads(&self.net);
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(train_cfg.micro_batch) {
                let feat = match cached {
                    Some(f) => Tensor::concat(&chunk.iter().map(|&i| f[i].clone()).collect::<Vec<_>>(), 0)?,
                    None => {
                        let s = if train_cfg.multiscale { draw_scale(&mut self.rng) } else { side };
                        let samples: Vec<SegSample> = chunk.iter().map(|&i| resize_sample(&data[i], s)).collect();
                        let (x, _) = stack(&samples.iter().collect::<Vec<_>>())?;
                        self.net.encode(&x, Phase::Train)?.bottleneck
                    }
                };
                let out = mae.forward(&feat, ratio, &mut self.rng)?;
                let scaled = out.recon_loss.mul_scalar(chunk.len() as f64 / batch.len() as f64);
                batch_loss += scaled.item() as f64;
                scaled.backward()?;
            }
            self.opt.update(&params, lr)?;
            total += batch_loss;
        }
        zero_grads(&self.net);
        Ok(total / batches.len() as f64)
    }

    /// Runs MAE pretraining for the configured epochs, logging one loss per
    /// epoch. Returns the per-epoch losses.
    pub fn pretrain(&mut self, data: &[SegSample], run_dir: Option<&Path>) -> Result<Vec<f64>> {
        if self.stage != Stage::Pretrain {
            self.stage = Stage::Pretrain;
            self.epoch = 0;
        }
        let data = canonicalize(data, self.cfg.net.input_side)?;
        let cached = if self.cfg.train.freeze_cnn { Some(self.bottleneck_features(&data)?) } else { None };
        if let Some(dir) = run_dir {
            create_dir(dir)?;
        }
        let mut losses = Vec::new();
        while self.epoch < self.cfg.train.epochs {
            let loss = self.pretrain_epoch(&data, cached.as_deref())?;
            self.epoch += 1;
            log::info!("pretrain epoch {} loss {loss:.6e}", self.epoch);
            losses.push(loss);
            if let Some(dir) = run_dir {
                append_line(&dir.join(PRETRAIN_LOG_FILE), &format!("{}\t{loss:.9e}", self.epoch))?;
                self.maybe_checkpoint(dir)?;
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(losses)
    }

    fn maybe_checkpoint(&self, dir: &Path) -> Result<()> {
        let every = self.cfg.train.checkpoint_every;
        if every > 0 && self.epoch % every == 0 {
            self.checkpoint()?.save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
        }
        Ok(())
    }

    /// Deterministic probabilities for canonical samples, in order.
    pub fn predict_batch(&self, data: &[SegSample]) -> Result<Vec<Tensor<f32>>> {
        let _g = no_grad();
        let mut rng = Rng::new(0);
        data.iter()
            .map(|s| {
                let (x, _) = stack(&[s])?;
                let out = self.net.forward(&x, Phase::Eval, 0.0, &mut rng)?;
                out.prob.reshape(&[1, s.height(), s.width()])
            })
            .collect()
    }

    /// Eval-mode metrics at the canonical side with masking disabled.
    pub fn evaluate(&self, data: &[SegSample]) -> Result<MetricReport> {
        if data.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        let data = canonicalize(data, self.cfg.net.input_side)?;
        let probs = self.predict_batch(&data)?;
        let mut report = MetricReport {
            threshold: self.cfg.train.threshold,
            samples: Vec::new(),
        };
        for (s, p) in data.iter().zip(&probs) {
            report.extend(metrics(p, &s.mask, self.cfg.train.threshold, std::slice::from_ref(&s.id))?);
        }
        Ok(report)
    }

    /// Segmentation training until `epochs`, or until `monitor` reaches
    /// `target_dice`. With a run directory, appends `epoch<TAB>loss<TAB>mDice`
    /// lines to the log, writes the latest report and a final checkpoint.
    pub fn fit(&mut self, train: &[SegSample], monitor: &[SegSample], run_dir: Option<&Path>) -> Result<FitSummary> {
        if self.stage != Stage::Train {
            self.stage = Stage::Train;
            self.epoch = 0;
        }
        let train = canonicalize(train, self.cfg.net.input_side)?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let monitor = canonicalize(monitor, self.cfg.net.input_side)?;
        if let Some(dir) = run_dir {
            create_dir(dir)?;
        }
        let tc = self.cfg.train.clone();
        let mut summary = FitSummary {
            epochs_run: 0,
            final_loss: f64::NAN,
            last_report: None,
            reached_target: false,
        };
        while self.epoch < tc.epochs {
            let loss = self.train_epoch(&train)?;
            self.epoch += 1;
            summary.epochs_run += 1;
            summary.final_loss = loss;
            let due = tc.eval_every > 0 && (self.epoch % tc.eval_every == 0 || self.epoch == tc.epochs);
            let mut dice_col = "-".to_string();
            if due && !monitor.is_empty() {
                let report = self.evaluate(&monitor)?;
                dice_col = format!("{:.6}", report.m_dice());
                if let Some(dir) = run_dir {
                    std::fs::write(dir.join(REPORT_FILE), report.to_text()).map_err(|e| Error::io(dir, e))?;
                }
                summary.reached_target = tc.target_dice.is_some_and(|t| report.m_dice() >= t);
                summary.last_report = Some(report);
            }
            log::info!("epoch {} loss {loss:.6} mDice {dice_col}", self.epoch);
            if let Some(dir) = run_dir {
                append_line(&dir.join(LOG_FILE), &format!("{}\t{loss:.9}\t{dice_col}", self.epoch))?;
                self.maybe_checkpoint(dir)?;
            }
            if summary.reached_target {
                break;
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(summary)
    }

    /// Binary mask for one image at its original resolution.
    pub fn predict_image(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, h, w) = match *image.shape() {
            [3, h, w] => (3, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "predict",
                    shape: image.shape().to_vec(),
                    reason: "expected [3, H, W]".into(),
                })
            }
        };
        let sample = SegSample::new("input", image.clone(), Tensor::zeros(&[1, h, w]))?;
        let (canon, info) = pad_to_square_resize(&sample, self.cfg.net.input_side)?;
        let prob = self.predict_batch(&[canon])?.remove(0);
        let full = restore_original(&prob, info)?;
        let t = self.cfg.train.threshold;
        let bin: Vec<f32> = full.data().iter().map(|&p| if f64::from(p) >= t { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(bin, &[1, h, w])
    }

    pub fn predict_file(&self, image: &Path, out: &Path) -> Result<()> {
        let mask = self.predict_image(&load_image(image)?)?;
        save_mask(&mask, out)
    }
}

fn adam_params(cfg: &RunConfig) -> AdamParams {
    AdamParams {
        beta1: cfg.train.adam_beta1,
        beta2: cfg.train.adam_beta2,
        eps: cfg.train.adam_eps,
    }
}

/// Parameters upstream of the bottleneck features.
fn is_encoder_param(name: &str) -> bool {
    name.starts_with("stem.") || name.starts_with("enc.") || name.starts_with("bottleneck.")
}
