//! Training runs: configuration, the epoch loop, best-checkpoint tracking,
//! and multi-seed aggregation. Log lines carry no timestamps so that runs
//! with the same configuration produce byte-identical artifacts.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::checkpoint_bytes;
use crate::data::{make_batches, UtteranceSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{hierarchical_loss, Hipama, LossBreakdown, Mode, ModelConfig};
use crate::optim::{zero_grads, Adam};

/// Everything a training run needs. The defaults are the reference
/// regime: 100 epochs, batch size 25, learning rate 1e-3, five seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 25,
            learning_rate: 1e-3,
            seeds: vec![0, 1, 2, 3, 4],
            train_path: None,
            test_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Results of one seed's training run.
pub struct TrainOutcome {
    pub model: Hipama,
    pub final_checkpoint: Vec<u8>,
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Training-mode loss means per epoch.
    pub history: Vec<LossBreakdown>,
}

fn fmt_breakdown(bd: &LossBreakdown) -> String {
    let mut s = format!("L_total={:.6} phoneme={:.6}", bd.total, bd.phoneme);
    for (name, v) in &bd.word {
        s.push_str(&format!(" word.{name}={v:.6}"));
    }
    for (name, v) in &bd.utterance {
        s.push_str(&format!(" utterance.{name}={v:.6}"));
    }
    s
}

fn mean_breakdowns(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut out = items[0].clone();
    out.total = items.iter().map(|b| b.total).sum::<f64>() / n;
    out.phoneme = items.iter().map(|b| b.phoneme).sum::<f64>() / n;
    for (i, slot) in out.word.iter_mut().enumerate() {
        slot.1 = items.iter().map(|b| b.word[i].1).sum::<f64>() / n;
    }
    for (i, slot) in out.utterance.iter_mut().enumerate() {
        slot.1 = items.iter().map(|b| b.utterance[i].1).sum::<f64>() / n;
    }
    out
}

/// Mean loss over a dataset with the model frozen (no dropout).
pub fn eval_loss(model: &Hipama, samples: &[UtteranceSample], batch_size: usize) -> Result<f64> {
    let batches = make_batches(
        samples,
        batch_size,
        None,
        model.config.n_phones,
        model.config.max_len,
    )?;
    let mut total = 0.0;
    for batch in &batches {
        let out = model.forward(batch, Mode::Eval);
        total += hierarchical_loss(&out, batch).0.item();
    }
    Ok(total / batches.len() as f64)
}

/// Train one model. The best checkpoint is the epoch with the lowest
/// validation loss (final checkpoint when no validation set is given).
pub fn train_single(
    run: &RunConfig,
    seed: u64,
    train: &[UtteranceSample],
    val: Option<&[UtteranceSample]>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let config = ModelConfig {
        seed,
        ..run.model.clone()
    };
    let model = Hipama::new(config.clone())?;
    let params = model.named_params();
    writeln!(log, "seed {seed}: parameters: {}", model.param_count())?;
    writeln!(
        log,
        "seed {seed}: config: {}",
        serde_json::to_string(&config).expect("config serializes")
    )?;

    // Untrained smoke evaluation, and the starting point for best tracking.
    let mut best_val_loss = match val {
        Some(v) => {
            let loss = eval_loss(&model, v, run.batch_size)?;
            writeln!(log, "seed {seed}: epoch 0/{} val_total={loss:.6} (untrained)", run.epochs)?;
            Some(loss)
        }
        None => None,
    };
    let mut best_checkpoint = checkpoint_bytes(&config, &params);
    let mut best_epoch = 0usize;

    let mut adam = Adam::new(run.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut history = Vec::with_capacity(run.epochs);
    for epoch in 1..=run.epochs {
        let shuffle_seed = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let batches = make_batches(
            train,
            run.batch_size,
            Some(shuffle_seed),
            config.n_phones,
            config.max_len,
        )?;
        let mut epoch_losses = Vec::with_capacity(batches.len());
        for (bi, batch) in batches.iter().enumerate() {
            let out = model.forward(batch, Mode::Train(&mut dropout_rng));
            let (loss, bd) = hierarchical_loss(&out, batch);
            if !bd.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: format!("epoch {epoch} batch {bi} (first utterance '{}')", batch.utt_ids[0]),
                    value: bd.total,
                });
            }
            loss.backward();
            adam.step(&params)?;
            zero_grads(&params);
            epoch_losses.push(bd);
        }
        let mean = mean_breakdowns(&epoch_losses);
        let mut line = format!("seed {seed}: epoch {epoch}/{} {}", run.epochs, fmt_breakdown(&mean));
        if let Some(v) = val {
            let vloss = eval_loss(&model, v, run.batch_size)?;
            line.push_str(&format!(" val_total={vloss:.6}"));
            if best_val_loss.map_or(true, |b| vloss < b) {
                best_val_loss = Some(vloss);
                best_epoch = epoch;
                best_checkpoint = checkpoint_bytes(&config, &params);
            }
        }
        writeln!(log, "{line}")?;
        history.push(mean);
    }
    let final_checkpoint = checkpoint_bytes(&config, &params);
    if val.is_none() {
        best_checkpoint = final_checkpoint.clone();
        best_epoch = run.epochs;
    }
    writeln!(
        log,
        "seed {seed}: best epoch {best_epoch}{}",
        best_val_loss.map_or(String::new(), |v| format!(" (val_total={v:.6})"))
    )?;
    Ok(TrainOutcome {
        model,
        final_checkpoint,
        best_checkpoint,
        best_epoch,
        best_val_loss,
        history,
    })
}

/// Per-seed evaluation reports aggregated as mean and standard deviation.
pub struct MultiSeedSummary {
    pub per_seed: Vec<(u64, EvalReport)>,
}

impl MultiSeedSummary {
    /// Mean +/- population standard deviation per metric, one line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "seeds: {}\n",
            self.per_seed
                .iter()
                .map(|(s, _)| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        let stat = |values: &[f64]| -> (f64, f64) {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let mut row = |level: &str, aspect: &str, metric: &str, values: Vec<f64>| {
            let (mean, sd) = stat(&values);
            out.push_str(&format!(
                "{:<10} {:<13} {:<7} {:>9.6} +/- {:.6}\n",
                level, aspect, metric, mean, sd
            ));
        };
        row(
            "phoneme",
            "accuracy",
            "mse",
            self.per_seed.iter().map(|(_, r)| r.phoneme_mse).collect(),
        );
        row(
            "phoneme",
            "accuracy",
            "pcc",
            self.per_seed.iter().map(|(_, r)| r.phoneme_pcc.value).collect(),
        );
        let n_word = self.per_seed[0].1.word.len();
        for i in 0..n_word {
            let name = self.per_seed[0].1.word[i].0.clone();
            row(
                "word",
                &name,
                "pcc",
                self.per_seed.iter().map(|(_, r)| r.word[i].1.value).collect(),
            );
        }
        let n_utt = self.per_seed[0].1.utterance.len();
        for i in 0..n_utt {
            let name = self.per_seed[0].1.utterance[i].0.clone();
            row(
                "utterance",
                &name,
                "pcc",
                self.per_seed
                    .iter()
                    .map(|(_, r)| r.utterance[i].1.value)
                    .collect(),
            );
        }
        out
    }
}

/// Train one model per seed and evaluate each on the test set.
pub fn train_multi(
    run: &RunConfig,
    train: &[UtteranceSample],
    test: Option<&[UtteranceSample]>,
    log: &mut dyn Write,
) -> Result<(Vec<(u64, TrainOutcome)>, Option<MultiSeedSummary>)> {
    let mut outcomes = Vec::new();
    let mut reports = Vec::new();
    for &seed in &run.seeds {
        let outcome = train_single(run, seed, train, test, log)?;
        if let Some(test) = test {
            let report = evaluate(&outcome.model, test, run.batch_size)?;
            writeln!(log, "seed {seed}: test metrics\n{}", report.to_text())?;
            reports.push((seed, report));
        }
        outcomes.push((seed, outcome));
    }
    let summary = (!reports.is_empty()).then_some(MultiSeedSummary { per_seed: reports });
    if let Some(s) = &summary {
        if run.seeds.len() > 1 {
            writeln!(log, "aggregate over seeds\n{}", s.to_text())?;
        }
    }
    Ok((outcomes, summary))
}
