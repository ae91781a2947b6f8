//! Seeded inputs shared by the kernel benchmarks.

use fusionreg::network::InitOptions;
use fusionreg::train::{Batch, TrainState};
use fusionreg::warpcore::{DeformationField, MisregMask};
use fusionreg::{Model, ModelConfig, Result, RunConfig, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(seed: u64, s: Shape, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Image, field within ±2 px and blend mask at `side×side`.
pub fn warp_inputs(side: usize, channels: usize) -> Result<(Tensor, DeformationField, MisregMask)> {
    let s = Shape::new(1, channels, side, side);
    Ok((
        uniform(1, s, 0.0, 1.0),
        DeformationField::new(uniform(2, s.with_c(2), -2.0, 2.0))?,
        MisregMask::new(uniform(3, s.with_c(1), 0.0, 1.0))?,
    ))
}

/// A model with randomized weights, so no branch short-circuits on zeros.
pub fn model(base_channels: usize) -> Result<Model> {
    let cfg = ModelConfig {
        base_channels,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, 7, InitOptions::default())?;
    m.params.randomize(&mut ChaCha8Rng::seed_from_u64(8), 0.2);
    Ok(m)
}

/// Training state for the desk preset plus one random batch.
pub fn desk_step_inputs(batch: usize) -> Result<(TrainState, Batch, RunConfig)> {
    let cfg = RunConfig::desk();
    let s = Shape::new(batch, 3, cfg.patch_size, cfg.patch_size);
    let b = Batch {
        visible: uniform(10, s, 0.0, 1.0),
        infrared: uniform(11, s, 0.0, 1.0),
        fused: uniform(12, s, 0.0, 1.0),
        target: uniform(13, s, 0.0, 1.0),
    };
    Ok((TrainState::for_run(&cfg)?, b, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_requested_shapes() {
        let (x, phi, m) = warp_inputs(16, 3).unwrap();
        assert_eq!(x.shape(), Shape::new(1, 3, 16, 16));
        assert_eq!(phi.tensor().shape().c, 2);
        assert_eq!(m.tensor().shape().c, 1);
        assert_eq!(uniform(1, x.shape(), 0.0, 1.0), x);
    }
}
