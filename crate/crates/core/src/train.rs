//! Mini-batch training with Adam and accuracy-by-query-length evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{argmax, Model};
use crate::optim::AdamState;
use crate::rng::{mix64, seeded, stream};
use crate::shapes::{ShapesSample, QUERY_LENGTHS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Re-score the training split in evaluation mode after each epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            eval_every: 1,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Correct and total counts, overall and per query length 3/4/5.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub by_length: [(usize, usize); 3],
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn length_accuracy(&self, len: usize) -> f64 {
        let (c, n) = self.by_length[len - 3];
        ratio(c, n)
    }

    pub fn length_share(&self, len: usize) -> f64 {
        ratio(self.by_length[len - 3].1, self.total)
    }

    /// Per-length accuracies recombined with the observed length mix.
    pub fn recombined(&self) -> f64 {
        QUERY_LENGTHS
            .iter()
            .map(|&l| self.length_accuracy(l) * self.length_share(l))
            .sum()
    }

    pub fn to_kv(&self, prefix: &str) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set(&format!("{prefix}accuracy"), self.accuracy());
        kv.set(&format!("{prefix}count"), self.total);
        kv.set(&format!("{prefix}loss"), self.mean_loss);
        for l in QUERY_LENGTHS {
            kv.set(&format!("{prefix}accuracy_len{l}"), self.length_accuracy(l));
            kv.set(&format!("{prefix}count_len{l}"), self.by_length[l - 3].1);
        }
        kv
    }

    /// Table with one column per query length and the overall figure.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>8}{:>8}{:>8}{:>8}", "query length", "3", "4", "5", "all");
        let _ = write!(s, "{:<14}", "% of set");
        for l in QUERY_LENGTHS {
            let _ = write!(s, "{:>8.1}", 100.0 * self.length_share(l));
        }
        let _ = writeln!(s, "{:>8.1}", 100.0);
        let _ = write!(s, "{:<14}", "accuracy");
        for l in QUERY_LENGTHS {
            let _ = write!(s, "{:>8.1}", 100.0 * self.length_accuracy(l));
        }
        let _ = writeln!(s, "{:>8.1}", 100.0 * self.accuracy());
        s
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Evaluation-mode accuracy and loss.
pub fn evaluate(model: &Model, samples: &[ShapesSample]) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    let mut loss = 0.0;
    for s in samples {
        let p = model.predict(&s.image, &s.tokens)?;
        let answer = s.answer as usize;
        loss -= p.probabilities[answer].max(f64::MIN_POSITIVE).ln();
        let ok = p.answer == answer;
        r.total += 1;
        r.correct += ok as usize;
        let k = (s.query_len as usize).clamp(3, 5) - 3;
        r.by_length[k].1 += 1;
        r.by_length[k].0 += ok as usize;
    }
    r.mean_loss = loss / r.total.max(1) as f64;
    Ok(r)
}

/// Per-sample predictions in evaluation mode.
pub fn predictions(model: &Model, samples: &[ShapesSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| Ok(argmax(&model.predict(&s.image, &s.tokens)?.artifacts.logits)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss with dropout active.
    pub train_loss: f64,
    /// Accuracy of the dropout-mode predictions made while training.
    pub running_accuracy: f64,
    pub train_eval: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let p = format!("epoch{}.", self.epoch);
        kv.set(&format!("{p}train_loss"), self.train_loss);
        kv.set(&format!("{p}running_accuracy"), self.running_accuracy);
        kv.set(&format!("{p}seconds"), self.seconds);
        if let Some(t) = &self.train_eval {
            kv.merge(&t.to_kv(&format!("{p}train_")));
        }
        if let Some(t) = &self.test {
            kv.merge(&t.to_kv(&format!("{p}test_")));
        }
        kv
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch (1-based) with the best test accuracy, or the last epoch without a test split.
    pub best_epoch: usize,
    pub best_params: Vec<Tensor>,
    pub best_test: Option<EvalReport>,
}

/// One pass over `samples` in a seeded shuffled order. Returns `(mean loss, running accuracy)`.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    samples: &[ShapesSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeded(mix64(cfg.seed) ^ mix64(epoch as u64 + 1)));
    let dropout_master = mix64(cfg.seed.wrapping_add(0x0d50_0000 + epoch as u64));
    let mut acc = model.params.zeros_like();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        for t in &mut acc {
            t.data_mut().fill(0.0);
        }
        let w = 1.0 / batch.len() as f64;
        for &i in batch {
            let s = &samples[i];
            let mut rng = stream(dropout_master, i as u64);
            let (loss, pred) =
                model.accumulate_gradients(&s.image, &s.tokens, s.answer as usize, Some(&mut rng), w, &mut acc)?;
            loss_sum += loss;
            correct += (pred == s.answer as usize) as usize;
        }
        adam.step(&mut model.params, &acc)?;
        if model.params.values().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("parameters became non-finite".into()));
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Fixed-budget training, keeping the parameters with the best test accuracy.
/// `on_epoch` sees each epoch's metrics, the current model and whether it is the new best.
pub fn train(
    model: &mut Model,
    train_set: &[ShapesSample],
    test_set: &[ShapesSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &AdamState, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut best_params = model.params.values().to_vec();
    let mut best_test = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (train_loss, running_accuracy) = train_epoch(model, &mut adam, train_set, cfg, epoch)?;
        let due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let train_eval = if cfg.eval_train && due {
            Some(evaluate(model, train_set)?)
        } else {
            None
        };
        let test = if !test_set.is_empty() && due {
            Some(evaluate(model, test_set)?)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            train_loss,
            running_accuracy,
            train_eval,
            test,
            seconds: start.elapsed().as_secs_f64(),
        };
        let score = match (&m.test, &m.train_eval) {
            (Some(t), _) => Some(t.accuracy()),
            (None, Some(t)) if test_set.is_empty() => Some(t.accuracy()),
            _ => None,
        };
        let improved = matches!(score, Some(s) if best.is_none_or(|(b, _)| s > b));
        if improved {
            best = Some((score.unwrap(), epoch));
            best_params = model.params.values().to_vec();
            best_test = m.test;
        }
        info!(
            "epoch {epoch}: loss {:.4} running acc {:.3}{}{}",
            train_loss,
            running_accuracy,
            m.train_eval.map(|t| format!(" train acc {:.4}", t.accuracy())).unwrap_or_default(),
            m.test.map(|t| format!(" test acc {:.4}", t.accuracy())).unwrap_or_default(),
        );
        on_epoch(&m, model, &adam, improved)?;
        history.push(m);
    }
    if best.is_none() {
        best_params = model.params.values().to_vec();
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.map_or(cfg.epochs, |b| b.1),
        best_params,
        best_test,
    })
}
