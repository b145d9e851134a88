//! Mini-batch training with Adam and early stopping on validation accuracy.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{AttDiCnn, Mode};
use super::optim::Adam;
use super::{argmax, softmax, Scalar};
use crate::error::{Error, Result};
use crate::raster::FdlImage;
use crate::sampling::ImageDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.001,
            patience: 15,
            seed: 13,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, patience and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let records = csv::Reader::from_reader(input).deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_acc >= r.val_acc => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights from the epoch with the best validation accuracy.
    pub model: AttDiCnn<T>,
    /// Optimizer state after the last epoch run.
    pub optimizer: Adam<T>,
    pub history: History,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

pub(crate) fn pixels<T: Scalar>(img: &FdlImage) -> Vec<T> {
    img.pixels.iter().map(|&p| T::of(p as f64)).collect()
}

fn check_dataset<T: Scalar>(model: &AttDiCnn<T>, data: &ImageDataset, what: &'static str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty(what));
    }
    let cfg = model.config();
    if data.n_classes() != cfg.n_classes {
        return Err(Error::Shape {
            context: "dataset classes vs model classes",
            left: vec![data.n_classes()],
            right: vec![cfg.n_classes],
        });
    }
    if let Some(img) = data.images.iter().find(|i| i.side != cfg.input_side) {
        return Err(Error::Shape {
            context: "image side vs model input",
            left: vec![img.side],
            right: vec![cfg.input_side],
        });
    }
    Ok(())
}

/// Inference-mode logits for every image, in input order.
pub fn predict_logits<T: Scalar>(model: &AttDiCnn<T>, images: &[FdlImage]) -> Result<Vec<Vec<T>>> {
    images.par_iter().map(|img| model.forward(&pixels::<T>(img), Mode::Infer)).collect()
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_loss<T: Scalar>(model: &AttDiCnn<T>, data: &ImageDataset) -> Result<(f64, f64)> {
    let logits = predict_logits(model, &data.images)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (z, img) in logits.iter().zip(&data.images) {
        loss -= softmax(z)[img.label].f64().ln();
        correct += usize::from(argmax(z) == img.label);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train with shuffled mini-batches; stops once validation accuracy has not
/// strictly improved for `patience` consecutive epochs and returns the best weights.
pub fn train<T: Scalar>(
    mut model: AttDiCnn<T>,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_dataset(&model, train_set, "training set")?;
    check_dataset(&model, val_set, "validation set")?;

    let inputs: Vec<Vec<T>> = train_set.images.iter().map(pixels).collect();
    let labels = train_set.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.param_count(), config.learning_rate);
    let mut history = History::default();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params().to_vec());
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let imgs: Vec<&[T]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.loss_and_grad(&imgs, &ys, Mode::Train(rng.random())).map_err(|e| match e {
                Error::NonFiniteLoss { index } => {
                    log::error!("event=non_finite_loss epoch={epoch} sample={}", batch[index]);
                    Error::NonFiniteLoss { index: batch[index] }
                }
                e => e,
            })?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct(&ys);
            adam.update(model.params_mut(), &out.grads)?;
        }
        let n = inputs.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        };
        log::info!(
            "event=epoch epoch={epoch} train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4}",
            record.train_loss,
            record.train_acc,
            val_loss,
            val_acc
        );
        history.records.push(record);

        if val_acc > best.0 {
            best = (val_acc, epoch, model.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                log::info!("event=early_stop epoch={epoch} best_epoch={}", best.1);
                break;
            }
        }
    }

    let (best_val_acc, best_epoch, params) = best;
    model.params_mut().copy_from_slice(&params);
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        history,
        best_epoch,
        best_val_acc,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn tiny_dataset(n: usize, seed: u64) -> ImageDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|i| {
                let label = i % 3;
                // class-dependent bright band plus noise
                let pixels = (0..144)
                    .map(|p| {
                        let band = (p / 12) / 4 == label;
                        (if band { 0.8 } else { 0.1 }) + rng.random_range(0.0..0.2f32)
                    })
                    .collect();
                FdlImage { side: 12, pixels, label }
            })
            .collect();
        ImageDataset::new(images, vec!["a".into(), "b".into(), "c".into()], seed).unwrap()
    }

    #[test]
    fn history_csv_round_trip() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                train_acc: 0.25,
                val_loss: 1.25,
                val_acc: 0.5,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(History::read_csv(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn learns_tiny_problem_deterministically() {
        let data = tiny_dataset(30, 1);
        let config = TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 0.01,
            patience: 40,
            ..TrainConfig::default()
        };
        let mut mc = ModelConfig::tiny(3);
        mc.dropout = 0.0;
        let run = || train(AttDiCnn::<f64>::new(mc.clone(), 13).unwrap(), &data, &data, &config).unwrap();
        let a = run();
        assert_eq!(a.history, run().history);
        assert!(a.best_val_acc >= 0.9, "{:?}", a.history.records.last());
        let (_, acc) = evaluate_loss(&a.model, &data).unwrap();
        assert_eq!(acc, a.best_val_acc);
    }

    #[test]
    fn early_stopping_follows_patience() {
        let data = tiny_dataset(12, 2);
        // learning rate so small that validation accuracy cannot move
        let config = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-12,
            patience: 3,
            ..TrainConfig::default()
        };
        let model = AttDiCnn::<f64>::new(ModelConfig::tiny(3), 13).unwrap();
        let initial = model.params().to_vec();
        let out = train(model, &data, &data, &config).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.history.records.len(), 1 + 3);
        // best weights are the epoch-1 weights, not the last ones
        let after_one = out.model.params();
        assert!(after_one.iter().zip(&initial).any(|(a, b)| a != b));
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = tiny_dataset(6, 3);
        let model = AttDiCnn::<f64>::new(ModelConfig::tiny(3), 1).unwrap();
        let empty = data.subset(&[]);
        assert!(matches!(train(model.clone(), &empty, &data, &TrainConfig::default()), Err(Error::Empty(_))));
        let big = AttDiCnn::<f64>::new(ModelConfig::tiny(4), 1).unwrap();
        assert!(train(big, &data, &data, &TrainConfig::default()).is_err());
    }
}
