//! The training loop (seeded shuffling, per-sample augmentation streams,
//! mini-batch cross-entropy, Adam), evaluation, and the six-row ablation
//! harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::augment::{augment_fundus, augment_oct, standardize};
use crate::config::Config;
use crate::dataset::ModalPair;
use crate::encoders::splitmix64;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, report, ConfusionMatrix, MetricsReport};
use crate::model::{forward, ModelParams, Mode};
use crate::tape::Tape;

/// Deterministic per-sample RNG stream id for (seed, epoch, sample index).
/// Samples keep their stream across shuffles because the ORIGINAL dataset
/// index goes in, so training order never changes what a sample sees.
pub fn sample_stream(seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(epoch.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ splitmix64(index)))
}

/// Reserved stream index for the epoch's shuffle (no sample uses it).
const SHUFFLE_STREAM: u64 = u64::MAX;

/// The visiting order of one epoch: a seeded permutation of 0..n.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_stream(seed, epoch, SHUFFLE_STREAM));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Render the per-epoch log as CSV.
pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.train_acc));
    }
    out
}

/// Train a model of the given mode from scratch. Deterministic: the same
/// (dataset, config, mode) always yields bit-identical parameters and log.
pub fn train(dataset: &[ModalPair], cfg: &Config, mode: Mode) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (i, pair) in dataset.iter().enumerate() {
        pair.validate(&cfg.dims)
            .map_err(|e| Error::Shape(format!("training sample {i}: {e}")))?;
        if pair.label.value() >= cfg.fusion.num_classes {
            return Err(Error::Data(format!(
                "training sample {i} has label {} but config declares {} classes",
                pair.label.value(),
                cfg.fusion.num_classes
            )));
        }
    }

    let seed = cfg.train.seed;
    let mut params = ModelParams::init(mode, cfg);
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let order = epoch_order(dataset.len(), seed, epoch as u64);
        let mut cm = ConfusionMatrix::new(cfg.fusion.num_classes)?;
        let mut loss_sum = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut batch_loss: Option<crate::tensor::Tensor> = None;

            for &idx in batch {
                let pair = &dataset[idx];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(sample_stream(seed, epoch as u64, idx as u64));
                let fundus = if cfg.train.augment_fundus {
                    augment_fundus(&pair.fundus, &mut rng)?
                } else {
                    pair.fundus.clone()
                };
                let oct = if cfg.train.augment_oct {
                    augment_oct(&pair.oct, &mut rng)?
                } else {
                    pair.oct.clone()
                };
                // volumes are standardized whether or not augmentation is on
                let oct = standardize(&oct);

                let logits = forward(&mut tape, &params, &fundus, &oct, cfg)?;
                cm.record(pair.label.value(), logits.argmax())?;
                let ce = tape.cross_entropy(&logits, pair.label.value())?;
                batch_loss = Some(match batch_loss {
                    None => ce,
                    Some(acc) => tape.add(&acc, &ce)?,
                });
            }

            let total = batch_loss.expect("batches are never empty");
            let mean = tape.mul_scalar(&total, 1.0 / batch.len() as f64)?;
            let loss_val = mean.data()[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss ({loss_val}) at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss_val * batch.len() as f64;

            tape.backward(&mean)?;
            adam_step(&mut params, &mut state, &cfg.train)?;
            params.visit(&mut |_, t| t.zero_grad());
        }

        log.push(EpochLog {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            train_acc: accuracy(&cm)?,
        });
    }

    Ok(TrainOutcome { params, log })
}

/// Evaluate without augmentation (OCT volumes are still standardized, matching
/// what the network saw in training). Argmax ties resolve to the lowest class.
pub fn evaluate(dataset: &[ModalPair], params: &ModelParams, cfg: &Config) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(cfg.fusion.num_classes)?;
    for (i, pair) in dataset.iter().enumerate() {
        pair.validate(&cfg.dims)
            .map_err(|e| Error::Shape(format!("evaluation sample {i}: {e}")))?;
        let oct = standardize(&pair.oct);
        let mut tape = Tape::no_grad();
        let logits = forward(&mut tape, params, &pair.fundus, &oct, cfg)?;
        cm.record(pair.label.value(), logits.argmax())?;
    }
    report(&cm)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: Mode,
    pub report: MetricsReport,
}

/// Train and evaluate all six component configurations under one shared seed:
/// fundus-only, OCT-only, plain concat, concat+LM, concat+GM, and the full
/// model.
pub fn ablate(train_set: &[ModalPair], eval_set: &[ModalPair], cfg: &Config) -> Result<Vec<AblationRow>> {
    Mode::all()
        .iter()
        .map(|&mode| {
            let outcome = train(train_set, cfg, mode)?;
            let report = evaluate(eval_set, &outcome.params, cfg)?;
            Ok(AblationRow { mode, report })
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "-"
    }
}

/// Text table with component checkmark columns.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>6} {:>5} {:>4} {:>4} {:>7} {:>7}\n",
        "mode", "fundus", "oct", "lm", "gm", "acc", "kappa"
    ));
    for row in rows {
        let (f, o, l, g) = row.mode.flags();
        out.push_str(&format!(
            "{:<12} {:>6} {:>5} {:>4} {:>4} {:>7.3} {:>7.3}\n",
            row.mode.to_string(),
            mark(f),
            mark(o),
            mark(l),
            mark(g),
            row.report.acc,
            row.report.kappa
        ));
    }
    out
}

/// CSV with the fixed column set fundus,oct,lm,gm,acc,kappa.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("fundus,oct,lm,gm,acc,kappa\n");
    for row in rows {
        let (f, o, l, g) = row.mode.flags();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f as u8, o as u8, l as u8, g as u8, row.report.acc, row.report.kappa
        ));
    }
    out
}
