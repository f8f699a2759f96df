//! Extraction of mean multi-aspect attention weights for inspection:
//! per level, the N x (N-1) matrix of how much each target aspect attends
//! to every other aspect, averaged over all real positions or utterances.

use crate::data::{make_batches, UtteranceSample};
use crate::error::{Error, Result};
use crate::model::{Hipama, Mode};

/// Mean attention-weight rows per target aspect. Each row has N-1 entries,
/// the non-target aspects in aspect-list order.
#[derive(Debug)]
pub struct AttentionTables {
    pub word: Vec<(String, Vec<f64>)>,
    pub utterance: Vec<(String, Vec<f64>)>,
}

pub fn attention_tables(
    model: &Hipama,
    samples: &[UtteranceSample],
    batch_size: usize,
) -> Result<AttentionTables> {
    if !model.config.multi_aspect_attention {
        return Err(Error::Mismatch(
            "checkpoint was trained without multi-aspect attention; nothing to inspect".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Config("inspection dataset is empty".into()));
    }
    let config = &model.config;
    let n_w = config.aspects_word.len();
    let n_u = config.aspects_utt.len();
    let mut word_sums = vec![vec![0.0; n_w - 1]; n_w];
    let mut word_count = 0usize;
    let mut utt_sums = vec![vec![0.0; n_u - 1]; n_u];
    let mut utt_count = 0usize;

    let batches = make_batches(samples, batch_size, None, config.n_phones, config.max_len)?;
    for batch in &batches {
        let out = model.forward(batch, Mode::Eval);
        let mask = batch.mask.to_vec();
        for (target, w) in out.ma_weights_word.iter().enumerate() {
            let d = w.to_vec(); // [B, T, n_w - 1]
            for b in 0..batch.size {
                for t in 0..batch.t_len {
                    if mask[b * batch.t_len + t] == 1.0 {
                        let base = (b * batch.t_len + t) * (n_w - 1);
                        for k in 0..n_w - 1 {
                            word_sums[target][k] += d[base + k];
                        }
                    }
                }
            }
        }
        for (target, w) in out.ma_weights_utt.iter().enumerate() {
            let d = w.to_vec(); // [B, n_u - 1]
            for b in 0..batch.size {
                for k in 0..n_u - 1 {
                    utt_sums[target][k] += d[b * (n_u - 1) + k];
                }
            }
        }
        word_count += batch.phoneme_count();
        utt_count += batch.size;
    }
    let norm = |sums: Vec<Vec<f64>>, count: usize, names: &[String]| {
        names
            .iter()
            .cloned()
            .zip(
                sums.into_iter()
                    .map(|row| row.into_iter().map(|v| v / count as f64).collect()),
            )
            .map(|(n, row): (String, Vec<f64>)| (n, row))
            .collect::<Vec<_>>()
    };
    Ok(AttentionTables {
        word: norm(word_sums, word_count, &config.aspects_word),
        utterance: norm(utt_sums, utt_count, &config.aspects_utt),
    })
}

impl AttentionTables {
    /// Tab-separated tables, one section per level. Rows are targets;
    /// value columns are the non-target aspects in aspect-list order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, rows: &[(String, Vec<f64>)]| {
            out.push_str(&format!(
                "# level={name} (rows: target aspect; columns: the other aspects in list order)\n"
            ));
            for (target, values) in rows {
                out.push_str(target);
                for v in values {
                    out.push_str(&format!("\t{v:.12}"));
                }
                out.push('\n');
            }
        };
        section("word", &self.word);
        section("utterance", &self.utterance);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::ModelConfig;

    #[test]
    fn tables_have_expected_shapes_and_normalized_rows() {
        let model = Hipama::new(ModelConfig::default()).unwrap();
        let (samples, _) = generate_synthetic(10, 2, 0.1);
        let tables = attention_tables(&model, &samples, 4).unwrap();
        assert_eq!(tables.word.len(), 3);
        assert!(tables.word.iter().all(|(_, row)| row.len() == 2));
        assert_eq!(tables.utterance.len(), 5);
        assert!(tables.utterance.iter().all(|(_, row)| row.len() == 4));
        for (name, row) in tables.word.iter().chain(&tables.utterance) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {name} sums to {s}");
        }
    }

    #[test]
    fn single_utterance_average_equals_direct_recomputation() {
        let model = Hipama::new(ModelConfig::default()).unwrap();
        let (samples, _) = generate_synthetic(1, 5, 0.0);
        let tables = attention_tables(&model, &samples, 1).unwrap();
        let batch = crate::data::Batch::from_samples(&samples, 42, 50, None).unwrap();
        let out = model.forward(&batch, Mode::Eval);
        // Word level: averaging the captured weights over the utterance's
        // real positions must reproduce the table row.
        let t = batch.t_len;
        for (target, (_, row)) in tables.word.iter().enumerate() {
            let d = out.ma_weights_word[target].to_vec();
            for k in 0..row.len() {
                let mean: f64 =
                    (0..t).map(|p| d[p * row.len() + k]).sum::<f64>() / t as f64;
                assert!((row[k] - mean).abs() < 1e-12);
            }
        }
        for (target, (_, row)) in tables.utterance.iter().enumerate() {
            let d = out.ma_weights_utt[target].to_vec();
            for k in 0..row.len() {
                assert!((row[k] - d[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablated_model_is_rejected() {
        let model = Hipama::new(ModelConfig {
            multi_aspect_attention: false,
            ..ModelConfig::default()
        })
        .unwrap();
        let (samples, _) = generate_synthetic(2, 0, 0.0);
        let err = attention_tables(&model, &samples, 2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("multi-aspect"));
    }
}
