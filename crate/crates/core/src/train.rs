//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState};
use crate::data::TrainingPair;
use crate::error::{invalid, Result};
use crate::network::{stack_planes, Ttdsr};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean of the per-step (pre-update) losses.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub optimizer: AdamState,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Trains `model` in place. The batch order of each epoch is a seeded
/// shuffle; the final short batch is kept. `on_epoch` sees every epoch's
/// statistics as soon as it finishes.
pub fn train(
    model: &mut Ttdsr,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return invalid("no training pairs");
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return invalid("epochs and batch size must be positive");
    }
    let mut adam = model.new_optimizer(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = stack_planes(chunk.iter().map(|&i| &pairs[i].lr))?;
            let hr = stack_planes(chunk.iter().map(|&i| &pairs[i].hr))?;
            total += model.training_step(&lr, &hr, &mut adam, cfg.lambda)?;
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            steps,
            mean_loss: total / steps as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} over {steps} steps",
            stats.mean_loss
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome {
        epochs: history,
        optimizer: adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::extract_patches;
    use crate::network::{build_model, NetConfig};
    use crate::plane::{ImagePlane, ValueRange};
    use crate::tcheb::make_basis;

    fn pairs() -> Vec<TrainingPair> {
        let img = ImagePlane::from_vec(
            40,
            40,
            (0..1600)
                .map(|i| {
                    (((i / 40) as f64 * 0.3).sin() * ((i % 40) as f64 * 0.45).cos() + 1.0) / 2.0
                })
                .collect(),
            ValueRange::UNIT,
        )
        .unwrap();
        extract_patches(&[img], 16, 8, 2, 1).unwrap()
    }

    fn tiny() -> NetConfig {
        NetConfig {
            split_point: 2,
            branch_width: 3,
            finetune_width: 4,
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let b = make_basis(8).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let data = pairs();
        let run = || {
            let mut m = build_model(tiny(), &b).unwrap();
            let mut log = Vec::new();
            train(&mut m, &data, &cfg, |s| log.push(*s)).unwrap();
            (m.to_checkpoint().to_bytes(), log)
        };
        let (a, la) = run();
        let (c, lc) = run();
        assert_eq!(a, c);
        assert_eq!(la, lc);
        assert_eq!(la.len(), 2);
        assert_eq!(la[0].steps, 4); // 16 patches in batches of 4
    }

    #[test]
    fn rejects_empty_inputs() {
        let b = make_basis(8).unwrap();
        let mut m = build_model(tiny(), &b).unwrap();
        assert!(train(&mut m, &[], &TrainConfig::default(), |_| {}).is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(&mut m, &pairs(), &cfg, |_| {}).is_err());
    }
}
