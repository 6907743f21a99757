use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BlockKind;
use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::objective::{LossWeights, TverskyParams};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Stem width followed by the widths after each of the four down-samplers.
    pub encoder_filters: Vec<usize>,
    /// Skip-path units per level, shallowest first.
    pub path_repeats: Vec<usize>,
    pub block: BlockKind,
    pub use_mae: bool,
    pub mask_ratio: f64,
    pub patch: usize,
    pub mae_dim: usize,
    pub mae_dec_dim: usize,
    pub mae_enc_depth: usize,
    pub mae_dec_depth: usize,
    pub mae_heads: usize,
    pub mlp_ratio: usize,
    pub input_side: usize,
    pub loss: LossWeights,
    pub tversky: TverskyParams,
    /// Hard-pixel weight map strength inside the Tversky counts; 0 = off.
    pub boundary_lambda: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_filters: vec![16, 32, 64, 128, 256],
            path_repeats: vec![8, 6, 4, 2],
            block: BlockKind::Dcelan,
            use_mae: true,
            mask_ratio: 0.75,
            patch: 4,
            mae_dim: 384,
            mae_dec_dim: 256,
            mae_enc_depth: 4,
            mae_dec_depth: 2,
            mae_heads: 4,
            mlp_ratio: 4,
            input_side: 256,
            loss: LossWeights::default(),
            tversky: TverskyParams::default(),
            boundary_lambda: 0.0,
        }
    }
}

pub const LEVELS: usize = 4;

impl NetworkConfig {
    /// Output widths of the decoder stages, deepest first.
    pub fn decoder_filters(&self) -> Vec<usize> {
        self.encoder_filters[..LEVELS].iter().rev().copied().collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_filters[LEVELS]
    }

    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            channels: self.bottleneck_channels(),
            patch: self.patch,
            dim: self.mae_dim,
            dec_dim: self.mae_dec_dim,
            enc_depth: self.mae_enc_depth,
            dec_depth: self.mae_dec_depth,
            heads: self.mae_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.len() != LEVELS + 1 {
            return Err(Error::Config(format!("encoder_filters needs {} entries", LEVELS + 1)));
        }
        if self.encoder_filters.iter().any(|&f| f == 0 || f % 2 != 0) {
            return Err(Error::Config("encoder_filters must be positive and even".into()));
        }
        if self.path_repeats.len() != LEVELS {
            return Err(Error::Config(format!("path_repeats needs {LEVELS} entries")));
        }
        if self.input_side == 0 || self.input_side % (1 << LEVELS) != 0 {
            return Err(Error::Config(format!("input_side must be a positive multiple of {}", 1 << LEVELS)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if self.loss.seg < 0.0 || self.loss.recon < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.boundary_lambda < 0.0 {
            return Err(Error::Config("boundary_lambda must be non-negative".into()));
        }
        self.tversky.validate()?;
        if self.use_mae {
            self.mae().validate()?;
        }
        Ok(())
    }
}

/// Optimisation and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Samples per forward/backward pass; gradients accumulate over the batch.
    pub micro_batch: usize,
    pub seed: u64,
    pub multiscale: bool,
    pub threshold: f64,
    /// Evaluate on the training set every this many epochs (0 = never).
    pub eval_every: usize,
    /// Stop once the training-set mDice reaches this value.
    pub target_dice: Option<f64>,
    /// Keep the convolutional encoder fixed while pretraining the MAE.
    pub freeze_cnn: bool,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 500,
            batch: 8,
            micro_batch: 2,
            seed: 0,
            multiscale: true,
            threshold: 0.5,
            eval_every: 10,
            target_dice: None,
            freeze_cnn: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch and micro_batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Both halves of a run configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (n, t) = (&mut self.net, &mut self.train);
        match key {
            "encoder_filters" => n.encoder_filters = parse_list(key, v)?,
            "path_repeats" => n.path_repeats = parse_list(key, v)?,
            "block" => n.block = v.parse()?,
            "use_mae" | "mae" => n.use_mae = parse_bool(key, v)?,
            "mask_ratio" => n.mask_ratio = parse(key, v)?,
            "patch" => n.patch = parse(key, v)?,
            "mae_dim" => n.mae_dim = parse(key, v)?,
            "mae_dec_dim" => n.mae_dec_dim = parse(key, v)?,
            "mae_enc_depth" => n.mae_enc_depth = parse(key, v)?,
            "mae_dec_depth" => n.mae_dec_depth = parse(key, v)?,
            "mae_heads" => n.mae_heads = parse(key, v)?,
            "mlp_ratio" => n.mlp_ratio = parse(key, v)?,
            "input_side" => n.input_side = parse(key, v)?,
            "loss_seg" => n.loss.seg = parse(key, v)?,
            "loss_recon" => n.loss.recon = parse(key, v)?,
            "tversky_alpha" => n.tversky.alpha = parse(key, v)?,
            "tversky_beta" => n.tversky.beta = parse(key, v)?,
            "tversky_smooth" => n.tversky.smooth = parse(key, v)?,
            "boundary_lambda" => n.boundary_lambda = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "micro_batch" => t.micro_batch = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "multiscale" => t.multiscale = parse_bool(key, v)?,
            "threshold" => t.threshold = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "target_dice" => t.target_dice = if v == "none" { None } else { Some(parse(key, v)?) },
            "freeze_cnn" => t.freeze_cnn = parse_bool(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        let (n, t) = (&self.net, &self.train);
        BTreeMap::from([
            ("encoder_filters", list(&n.encoder_filters)),
            ("path_repeats", list(&n.path_repeats)),
            ("block", n.block.name().to_string()),
            ("use_mae", n.use_mae.to_string()),
            ("mask_ratio", n.mask_ratio.to_string()),
            ("patch", n.patch.to_string()),
            ("mae_dim", n.mae_dim.to_string()),
            ("mae_dec_dim", n.mae_dec_dim.to_string()),
            ("mae_enc_depth", n.mae_enc_depth.to_string()),
            ("mae_dec_depth", n.mae_dec_depth.to_string()),
            ("mae_heads", n.mae_heads.to_string()),
            ("mlp_ratio", n.mlp_ratio.to_string()),
            ("input_side", n.input_side.to_string()),
            ("loss_seg", n.loss.seg.to_string()),
            ("loss_recon", n.loss.recon.to_string()),
            ("tversky_alpha", n.tversky.alpha.to_string()),
            ("tversky_beta", n.tversky.beta.to_string()),
            ("tversky_smooth", n.tversky.smooth.to_string()),
            ("boundary_lambda", n.boundary_lambda.to_string()),
            ("lr", t.lr.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch.to_string()),
            ("micro_batch", t.micro_batch.to_string()),
            ("seed", t.seed.to_string()),
            ("multiscale", t.multiscale.to_string()),
            ("threshold", t.threshold.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("target_dice", t.target_dice.map_or("none".into(), |d| d.to_string())),
            ("freeze_cnn", t.freeze_cnn.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.net.block = BlockKind::Elan;
        c.net.mask_ratio = 0.1 + 0.2;
        c.train.lr = 3.3e-4;
        c.train.target_dice = Some(0.95);
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::from_text("# run\nepochs = 3  # short\n\nmae = off\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(!c.net.use_mae);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("epochs = x").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.net.input_side = 250;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.net.mae_heads = 7;
        assert!(c.validate().is_err());
        c.net.use_mae = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn decoder_mirrors_encoder() {
        assert_eq!(NetworkConfig::default().decoder_filters(), vec![128, 64, 32, 16]);
    }
}
