#![allow(dead_code)]

use dcelanm::data::{synth_dataset, SegSample};
use dcelanm::train::RunConfig;
use dcelanm::Rng;

/// A network small enough to train for a few epochs in well under a second.
pub const SMALL: &str = "\
encoder_filters = 4,4,8,8,8
path_repeats = 1,1,1,1
patch = 2
mae_dim = 16
mae_dec_dim = 8
mae_enc_depth = 1
mae_dec_depth = 1
mae_heads = 2
input_side = 64
batch = 2
micro_batch = 2
multiscale = false
lr = 0.001
epochs = 4
eval_every = 1
";

pub fn small_config() -> RunConfig {
    RunConfig::from_text(SMALL).unwrap()
}

pub fn synth(n: usize, side: usize, seed: u64) -> Vec<SegSample> {
    synth_dataset(n, side, &mut Rng::new(seed)).unwrap()
}
