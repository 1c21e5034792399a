use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, BatchInput, ModelParams};
use crate::data::{Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::occlusion::{apply_mask, DefenseConfig, GridGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Occlude every presented sample at a fresh random window position.
    pub occlusion_augmentation: bool,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
            occlusion_augmentation: true,
            augmentation: Augmentation {
                max_shift: 2,
                horizontal_flip: false,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(
                "batch size and learning rate must be positive, momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Unoccluded accuracy on the validation set, when one was given.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// SGD with momentum on batch-mean cross-entropy.
pub fn train(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    defense: &DefenseConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let input = params.input;
    if (dataset.channels, dataset.height, dataset.width) != (input.channels, input.height, input.width)
        && !dataset.is_empty()
    {
        return Err(Error::ShapeMismatch(format!(
            "dataset is {}x{}x{}, model expects {}x{}x{}",
            dataset.channels, dataset.height, dataset.width, input.channels, input.height, input.width
        )));
    }
    let mut params = params.clone();
    if config.epochs == 0 || dataset.is_empty() {
        return Ok(TrainOutcome {
            params,
            metrics: Vec::new(),
        });
    }
    let geometry = if config.occlusion_augmentation {
        Some(GridGeometry::new(input.width, input.height, defense)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = params
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
        .collect();
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let plane = input.height * input.width;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut pixels = Vec::with_capacity(chunk.len() * input.pixels());
            let mut masks = Vec::with_capacity(chunk.len() * plane);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = config.augmentation.apply(&dataset.images[i], &mut rng);
                match &geometry {
                    Some(g) => {
                        let mask = g.mask_at(g.random_position(&mut rng));
                        pixels.extend(apply_mask(&img, &mask)?.pixels);
                        masks.extend(mask.to_f32());
                    }
                    None => {
                        pixels.extend(img.pixels);
                        masks.extend(std::iter::repeat_n(1.0f32, plane));
                    }
                }
                labels.push(dataset.labels[i]);
            }
            let (loss, grads) = loss_and_gradients(
                &params,
                BatchInput {
                    pixels: &pixels,
                    masks: &masks,
                    batch: chunk.len(),
                },
                &labels,
            )?;
            loss_sum += f64::from(loss) * chunk.len() as f64;
            seen += chunk.len();
            for ((layer, (vw, vb)), (gw, gb)) in params
                .layers
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&grads.layers)
            {
                for ((w, v), &g) in layer.weight.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *v = mu * *v - lr * g;
                    *w += *v;
                }
                for ((b, v), &g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *v = mu * *v - lr * g;
                    *b += *v;
                }
            }
        }
        let val_accuracy = match val {
            Some(v) => Some(accuracy(&params, v)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            mean_loss: loss_sum / seen as f64,
            val_accuracy,
        });
    }
    Ok(TrainOutcome { params, metrics })
}

/// Unoccluded top-1 accuracy.
pub fn accuracy(params: &ModelParams<f32>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_labels(params, &dataset.images)?;
    let correct = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Argmax (lowest index on ties) of unoccluded predictions.
pub(crate) fn predict_labels(params: &ModelParams<f32>, images: &[crate::image::Image]) -> Result<Vec<usize>> {
    let plane = params.input.height * params.input.width;
    let chunks: Vec<Vec<usize>> = images
        .par_chunks(128)
        .map(|chunk| {
            let pixels: Vec<f32> = chunk.iter().flat_map(|i| i.pixels.iter().copied()).collect();
            let masks = vec![1.0f32; plane * chunk.len()];
            let probs = params.predict_batch(BatchInput {
                pixels: &pixels,
                masks: &masks,
                batch: chunk.len(),
            })?;
            Ok(probs.chunks(probs.len() / chunk.len()).map(crate::argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
