//! Oracle suites shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod suites;

use bootifol_core::config::{LossConfig, NetConfig};
use bootifol_core::tensor::{Scalar, Tensor};
use bootifol_core::vision::{Frame, LabSequence};
use bootifol_core::Rng;
use rand::Rng as _;

/// Smallest bundle the encoders accept: 4x4 frames, one stride-2 layer.
pub fn micro_net() -> NetConfig {
    NetConfig {
        frame_size: 4,
        conv_filters: vec![3],
        bottleneck_filters: 4,
        width_mult: 1.0,
        kernel: 3,
        state_dim: 4,
        embed_dim: 3,
        lstm_layers: 2,
        lstm_hidden: 3,
        predictor_hidden: 5,
        leak: 0.2,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

pub fn micro_loss(horizon: usize) -> LossConfig {
    LossConfig {
        tau: 0.5,
        rho: 1.0,
        horizon,
        negatives: 2,
        positive_window: 1,
    }
}

pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn vector(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_frame(rng: &mut Rng, size: usize) -> Frame {
    let rgb = (0..size * size * 3).map(|_| rng.gen()).collect();
    Frame::new(size, size, rgb).expect("frame")
}

pub fn random_sequence(rng: &mut Rng, size: usize, frames: usize) -> LabSequence {
    let fr: Vec<Frame> = (0..frames).map(|_| random_frame(rng, size)).collect();
    LabSequence::from_frames(&fr).expect("sequence")
}
