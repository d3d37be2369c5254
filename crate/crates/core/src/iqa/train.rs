use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{g_forward, predict_tensor, IacaConfig, QualityModel};
use crate::dataio::{crop_patch, derive_seed, digest_ids, ImageBuffer};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqaTrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub crop_size: usize,
    /// Stops early after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for IqaTrainHyper {
    fn default() -> Self {
        IqaTrainHyper {
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 100,
            crop_size: 224,
            max_steps: None,
        }
    }
}

impl IqaTrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "the normalized loss needs at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.crop_size < super::MIN_INPUT_SIZE {
            return Err(Error::config("crop_size", format!("must be at least {}", super::MIN_INPUT_SIZE)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub content_id: String,
    pub image: ImageBuffer,
    pub score: f64,
}

/// Total training loss of one batch and its gradient for every parameter.
///
/// The loss sums the normalized regression loss of the final, stage-4 and
/// stage-5 predictions, weighted by `aux_loss_weights`. With a single scale
/// the stage-4 term is dropped.
pub fn batch_loss_and_grads(
    model: &QualityModel,
    images: &[Tensor],
    targets: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    let params = &model.params;
    if images.len() != targets.len() {
        return Err(Error::Shape(format!("{} images vs {} targets", images.len(), targets.len())));
    }
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let mut finals = Vec::new();
    let mut s1s = Vec::new();
    let mut s2s = Vec::new();
    for img in images {
        let x = g.input(img.clone(), false);
        let out = g_forward(&mut g, x, model.layout(), &bound, &model.config)?;
        finals.push(out.score);
        s1s.push(out.score_s1);
        s2s.push(out.score_s2);
    }
    let [w0, w1, w2] = model.config.aux_loss_weights;
    let mut terms = vec![(finals, w0), (s2s, w2)];
    if model.config.use_multi_scale {
        terms.push((s1s, w1));
    }
    let mut total = None;
    for (preds, w) in terms {
        let p = g.concat(&preds);
        let l = g.norm_in_norm(p, targets)?;
        let l = g.scale(l, w);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let loss = total.expect("at least one loss term");
    let value = g.value(loss).item();
    let grads = g.backward(loss).for_bound(&bound, params);
    Ok((value, grads))
}

pub fn train_iqa(items: &[TrainItem], config: IacaConfig, hyper: &IqaTrainHyper, seed: u64) -> Result<QualityModel> {
    train_iqa_logged(items, config, hyper, seed).map(|(m, _)| m)
}

/// Like [`train_iqa`], also returning the loss of every optimizer step.
pub fn train_iqa_logged(
    items: &[TrainItem],
    config: IacaConfig,
    hyper: &IqaTrainHyper,
    seed: u64,
) -> Result<(QualityModel, Vec<f64>)> {
    hyper.validate()?;
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 items, got {}",
            items.len()
        )));
    }
    if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("item `{}` has a non-finite score", bad.id)));
    }
    let mut model = QualityModel::new(config, seed)?;
    let batch = hyper.batch_size.min(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut opt = Adam::new(&model.params, hyper.learning_rate);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    'epochs: for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if hyper.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            if chunk.len() < 2 {
                continue;
            }
            let targets: Vec<f64> = chunk.iter().map(|&i| items[i].score).collect();
            if targets.iter().all(|t| *t == targets[0]) {
                log::debug!("epoch {epoch}: skipping batch with constant targets");
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let crop_seed: u64 = rng.random();
                let img = &items[i].image;
                let patch = if img.height() == hyper.crop_size && img.width() == hyper.crop_size {
                    img.clone()
                } else {
                    crop_patch(img, hyper.crop_size, crop_seed)?
                };
                images.push(patch.to_tensor());
            }
            let step = losses.len();
            let (loss, grads) = batch_loss_and_grads(&model, &images, &targets)?;
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("epoch {epoch}, loss {loss}"),
                });
            }
            opt.step(&mut model.params, &grads);
            losses.push(loss);
            log::debug!("iqa step {step} epoch {epoch} loss {loss:.6}");
        }
    }
    let mut q_max = f64::NEG_INFINITY;
    for item in items {
        q_max = q_max.max(predict_tensor(&item.image.to_tensor(), &model)?.score);
    }
    model.q_max = Some(q_max);
    let contents: std::collections::BTreeSet<&str> = items.iter().map(|i| i.content_id.as_str()).collect();
    model.train_split_digest = digest_ids(contents);
    log::info!("iqa training finished after {} steps; q_max {q_max:.6}", losses.len());
    Ok((model, losses))
}
