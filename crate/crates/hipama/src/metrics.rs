//! Evaluation: MSE and Pearson correlation per aspect per granularity,
//! pooled globally over the whole evaluation set (not averaged per batch).

use crate::data::{make_batches, UtteranceSample};
use crate::error::{Error, Result};
use crate::model::{Hipama, Mode, PredictionSet};

/// A metric with a degeneracy marker: a zero-variance input makes the
/// correlation undefined, which is reported as 0 with the flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Pooled sufficient statistics for (prediction, gold) pairs. Shards can
/// be accumulated independently and merged.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairStats {
    pub n: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl PairStats {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    pub fn merge(&self, other: &PairStats) -> PairStats {
        PairStats {
            n: self.n + other.n,
            sx: self.sx + other.sx,
            sy: self.sy + other.sy,
            sxx: self.sxx + other.sxx,
            syy: self.syy + other.syy,
            sxy: self.sxy + other.sxy,
        }
    }

    pub fn pcc(&self) -> MetricValue {
        assert!(self.n >= 2, "pcc needs at least 2 pairs, got {}", self.n);
        let n = self.n as f64;
        let num = n * self.sxy - self.sx * self.sy;
        let var_x = n * self.sxx - self.sx * self.sx;
        let var_y = n * self.syy - self.sy * self.sy;
        let floor_x = f64::EPSILON * n * self.sxx.abs();
        let floor_y = f64::EPSILON * n * self.syy.abs();
        if var_x <= floor_x || var_y <= floor_y {
            return MetricValue {
                value: 0.0,
                degenerate: true,
            };
        }
        MetricValue {
            value: num / (var_x * var_y).sqrt(),
            degenerate: false,
        }
    }

    pub fn mse(&self) -> f64 {
        assert!(self.n > 0, "mse needs at least 1 pair");
        (self.sxx - 2.0 * self.sxy + self.syy) / self.n as f64
    }
}

/// Sample Pearson correlation of two equal-length slices.
pub fn pearson(x: &[f64], y: &[f64]) -> MetricValue {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let mut stats = PairStats::default();
    for (&a, &b) in x.iter().zip(y) {
        stats.push(a, b);
    }
    stats.pcc()
}

/// Per-aspect metrics over an evaluation set, with unit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub phoneme_mse: f64,
    pub phoneme_pcc: MetricValue,
    pub word: Vec<(String, MetricValue)>,
    pub utterance: Vec<(String, MetricValue)>,
    pub phoneme_count: usize,
    pub word_count: usize,
    pub utterance_count: usize,
}

impl EvalReport {
    /// Fixed-width table, one row per (level, aspect, metric).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "units: phonemes={} words={} utterances={}\n",
            self.phoneme_count, self.word_count, self.utterance_count
        ));
        out.push_str("level      aspect        metric  value      flags\n");
        let mut row = |level: &str, aspect: &str, metric: &str, v: f64, degenerate: bool| {
            out.push_str(&format!(
                "{:<10} {:<13} {:<7} {:>9.6} {}\n",
                level,
                aspect,
                metric,
                v,
                if degenerate { "degenerate" } else { "" }
            ));
        };
        row("phoneme", "accuracy", "mse", self.phoneme_mse, false);
        row(
            "phoneme",
            "accuracy",
            "pcc",
            self.phoneme_pcc.value,
            self.phoneme_pcc.degenerate,
        );
        for (name, m) in &self.word {
            row("word", name, "pcc", m.value, m.degenerate);
        }
        for (name, m) in &self.utterance {
            row("utterance", name, "pcc", m.value, m.degenerate);
        }
        out
    }

    pub fn from_pools(pools: &EvalPools) -> EvalReport {
        EvalReport {
            phoneme_mse: pools.phoneme.mse(),
            phoneme_pcc: pools.phoneme.pcc(),
            word: pools
                .word
                .iter()
                .map(|(n, s)| (n.clone(), s.pcc()))
                .collect(),
            utterance: pools
                .utterance
                .iter()
                .map(|(n, s)| (n.clone(), s.pcc()))
                .collect(),
            phoneme_count: pools.phoneme.n,
            word_count: pools.word.first().map_or(0, |(_, s)| s.n),
            utterance_count: pools.utterance.first().map_or(0, |(_, s)| s.n),
        }
    }
}

/// Accumulated (prediction, gold) statistics per level and aspect.
#[derive(Debug, Clone, Default)]
pub struct EvalPools {
    pub phoneme: PairStats,
    pub word: Vec<(String, PairStats)>,
    pub utterance: Vec<(String, PairStats)>,
}

impl EvalPools {
    pub fn merge(&self, other: &EvalPools) -> EvalPools {
        let zip = |a: &[(String, PairStats)], b: &[(String, PairStats)]| {
            a.iter()
                .zip(b)
                .map(|((n, s), (n2, s2))| {
                    assert_eq!(n, n2, "pool aspect order mismatch");
                    (n.clone(), s.merge(s2))
                })
                .collect()
        };
        EvalPools {
            phoneme: self.phoneme.merge(&other.phoneme),
            word: zip(&self.word, &other.word),
            utterance: zip(&self.utterance, &other.utterance),
        }
    }
}

/// Run the frozen model over a dataset and pool predictions against gold.
pub fn collect_pools(
    model: &Hipama,
    samples: &[UtteranceSample],
    batch_size: usize,
) -> Result<EvalPools> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let config = &model.config;
    let batches = make_batches(samples, batch_size, None, config.n_phones, config.max_len)?;
    let mut pools = EvalPools {
        phoneme: PairStats::default(),
        word: config
            .aspects_word
            .iter()
            .map(|a| (a.clone(), PairStats::default()))
            .collect(),
        utterance: config
            .aspects_utt
            .iter()
            .map(|a| (a.clone(), PairStats::default()))
            .collect(),
    };
    for batch in &batches {
        let out = model.forward(batch, Mode::Eval);
        let preds = PredictionSet::from_output(&out, batch);
        let mask = batch.mask.to_vec();
        let gold_p = batch.phoneme_gold.to_vec();
        for i in 0..preds.phoneme_scores.len() {
            if mask[i] == 1.0 {
                pools.phoneme.push(preds.phoneme_scores[i], gold_p[i]);
            }
        }
        let wmask = batch.word_mask.to_vec();
        for ((name, scores), pool) in preds.word_scores.iter().zip(&mut pools.word) {
            let gold = batch
                .word_gold
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("no gold labels for word aspect '{name}'")))?
                .1
                .to_vec();
            for i in 0..scores.len() {
                if wmask[i] == 1.0 {
                    pool.1.push(scores[i], gold[i]);
                }
            }
        }
        for ((name, scores), pool) in preds.utt_scores.iter().zip(&mut pools.utterance) {
            let gold = batch
                .utt_gold
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| {
                    Error::Config(format!("no gold labels for utterance aspect '{name}'"))
                })?
                .1
                .to_vec();
            for (s, g) in scores.iter().zip(&gold) {
                pool.1.push(*s, *g);
            }
        }
    }
    Ok(pools)
}

/// Evaluate a model on a dataset; metrics pool every unpadded unit.
pub fn evaluate(
    model: &Hipama,
    samples: &[UtteranceSample],
    batch_size: usize,
) -> Result<EvalReport> {
    Ok(EvalReport::from_pools(&collect_pools(model, samples, batch_size)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook two-pass PCC, the independent oracle.
    fn pcc_brute(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn perfect_and_inverted_correlation() {
        let x = vec![0.5, 1.0, 2.0, 3.5];
        assert_eq!(pearson(&x, &x).value, 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).value, -1.0);
    }

    #[test]
    fn hand_case_is_exact() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r.value - 0.8).abs() < 1e-12, "got {}", r.value);
        assert!(!r.degenerate);
    }

    #[test]
    fn zero_variance_flags_degenerate_zero() {
        let r = pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
        let r2 = pearson(&[1.0, 2.0, 3.0], &[0.7, 0.7, 0.7]);
        assert!(r2.degenerate);
    }

    #[test]
    fn matches_brute_force_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let got = pearson(&x, &y);
            if got.degenerate {
                continue;
            }
            assert!(
                (got.value - pcc_brute(&x, &y)).abs() < 1e-10,
                "{} vs {}",
                got.value,
                pcc_brute(&x, &y)
            );
        }
    }

    #[test]
    fn invariant_under_positive_affine_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: f64 = rng.gen_range(0.1..4.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r0 = pearson(&x, &y).value;
            let r1 = pearson(&xt, &y).value;
            assert!((r0 - r1).abs() < 1e-12, "{} vs {}", r0, r1);
        }
    }

    #[test]
    fn mse_scales_by_twenty_five_under_label_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw_pred: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..10.0)).collect();
        let raw_gold: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..10.0)).collect();
        let mut raw = PairStats::default();
        let mut scaled = PairStats::default();
        for (p, g) in raw_pred.iter().zip(&raw_gold) {
            raw.push(*p, *g);
            scaled.push(crate::data::scale_label(*p), crate::data::scale_label(*g));
        }
        let ratio = raw.mse() / scaled.mse();
        assert!((ratio - 25.0).abs() < 1e-9, "ratio {}", ratio);
    }

    #[test]
    fn merged_shards_equal_single_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut whole = PairStats::default();
        let mut a = PairStats::default();
        let mut b = PairStats::default();
        for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
            whole.push(*x, *y);
            if i % 2 == 0 {
                a.push(*x, *y);
            } else {
                b.push(*x, *y);
            }
        }
        let merged = a.merge(&b);
        assert_eq!(merged.n, whole.n);
        assert!((merged.pcc().value - whole.pcc().value).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_independent_of_batch_partitioning() {
        let model = Hipama::new(ModelConfig::default()).unwrap();
        let (samples, _) = generate_synthetic(30, 13, 0.2);
        let r1 = evaluate(&model, &samples, 30).unwrap();
        let r2 = evaluate(&model, &samples, 7).unwrap();
        assert!((r1.phoneme_mse - r2.phoneme_mse).abs() < 1e-12);
        assert!((r1.phoneme_pcc.value - r2.phoneme_pcc.value).abs() < 1e-12);
        for (a, b) in r1.word.iter().zip(&r2.word) {
            assert!((a.1.value - b.1.value).abs() < 1e-12);
        }
        for (a, b) in r1.utterance.iter().zip(&r2.utterance) {
            assert!((a.1.value - b.1.value).abs() < 1e-12);
        }
        // Concatenated halves pool to the same report.
        let halves = collect_pools(&model, &samples[..15], 25)
            .unwrap()
            .merge(&collect_pools(&model, &samples[15..], 25).unwrap());
        let r3 = EvalReport::from_pools(&halves);
        assert!((r3.phoneme_pcc.value - r1.phoneme_pcc.value).abs() < 1e-12);
    }

    #[test]
    fn evaluate_counts_match_unpadded_totals() {
        let model = Hipama::new(ModelConfig::default()).unwrap();
        let (samples, _) = generate_synthetic(12, 3, 0.0);
        let report = evaluate(&model, &samples, 5).unwrap();
        let phonemes: usize = samples.iter().map(|s| s.len()).sum();
        let words: usize = samples.iter().map(|s| s.n_words()).sum();
        assert_eq!(report.phoneme_count, phonemes);
        assert_eq!(report.word_count, words);
        assert_eq!(report.utterance_count, 12);
        for (_, m) in report.word.iter().chain(&report.utterance) {
            assert!(m.value.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let model = Hipama::new(ModelConfig::default()).unwrap();
        assert!(evaluate(&model, &[], 4).is_err());
    }

    #[test]
    fn exact_gold_predictions_score_perfectly() {
        // Feed the pools directly: predictions equal to gold give PCC 1
        // everywhere and zero phoneme MSE.
        let mut pools = EvalPools {
            phoneme: PairStats::default(),
            word: vec![("accuracy".into(), PairStats::default())],
            utterance: vec![("total".into(), PairStats::default())],
        };
        for v in [0.3, 0.9, 1.4, 1.9] {
            pools.phoneme.push(v, v);
            pools.word[0].1.push(v, v);
            pools.utterance[0].1.push(v, v);
        }
        let report = EvalReport::from_pools(&pools);
        assert_eq!(report.phoneme_mse, 0.0);
        assert_eq!(report.phoneme_pcc.value, 1.0);
        assert_eq!(report.word[0].1.value, 1.0);
        assert_eq!(report.utterance[0].1.value, 1.0);
    }

    #[test]
    fn constant_output_model_reports_degenerate_zero() {
        let mut pools = EvalPools::default();
        for g in [0.1, 0.5, 1.0, 1.5] {
            pools.phoneme.push(0.7, g);
        }
        let report = EvalReport::from_pools(&pools);
        assert_eq!(report.phoneme_pcc.value, 0.0);
        assert!(report.phoneme_pcc.degenerate);
        let text = report.to_text();
        assert!(text.contains("degenerate"));
    }
}
