//! Dataset records, label scaling, padding/masking, batching, and the
//! synthetic-data generator used as the end-to-end verification oracle.
//!
//! File format (UTF-8, one utterance per line, fields separated by `|`):
//!
//! ```text
//! utt_id|phone_ids|word_index|gop|phoneme_acc|word_acc|word_stress|word_total|utt_scores
//! ```
//!
//! `phone_ids`, `word_index`, and `phoneme_acc` are comma-separated with one
//! entry per phoneme. `gop` holds semicolon-separated rows, one per phoneme,
//! each a comma-separated list of `2 * n_phones` floats. The three word
//! fields carry one raw `[0,10]` score per word; `utt_scores` is the five
//! comma-separated raw utterance scores (accuracy, completeness, fluency,
//! prosody, total). Phoneme accuracy is already on the `[0,2]` scale.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WORD_ASPECTS: [&str; 3] = ["accuracy", "stress", "total"];
pub const UTT_ASPECTS: [&str; 5] = ["accuracy", "completeness", "fluency", "prosody", "total"];

/// Raw word-level scores, each in [0, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordLabels {
    pub accuracy: f64,
    pub stress: f64,
    pub total: f64,
}

/// Raw utterance-level scores, each in [0, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UttLabels {
    pub accuracy: f64,
    pub completeness: f64,
    pub fluency: f64,
    pub prosody: f64,
    pub total: f64,
}

/// One utterance: ids, GOP feature rows, phoneme-to-word alignment, and
/// gold scores at all three granularities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSample {
    pub utt_id: String,
    pub phone_ids: Vec<usize>,
    pub gop: Vec<Vec<f64>>,
    pub word_index: Vec<usize>,
    pub phoneme_accuracy: Vec<f64>,
    pub word_labels: Vec<WordLabels>,
    pub utt_labels: UttLabels,
}

impl UtteranceSample {
    pub fn len(&self) -> usize {
        self.phone_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_labels.len()
    }

    /// Structural and range checks; returns a description of the first
    /// violation found.
    pub fn validate(&self, n_phones: usize) -> std::result::Result<(), String> {
        let t = self.phone_ids.len();
        if t == 0 {
            return Err("empty utterance".into());
        }
        if self.utt_id.is_empty() || self.utt_id.contains('|') || self.utt_id.contains('\n') {
            return Err(format!("bad utt_id {:?}", self.utt_id));
        }
        if self.gop.len() != t || self.word_index.len() != t || self.phoneme_accuracy.len() != t {
            return Err(format!(
                "ragged lengths in '{}': {} phone ids, {} gop rows, {} word indices, {} phoneme scores",
                self.utt_id,
                t,
                self.gop.len(),
                self.word_index.len(),
                self.phoneme_accuracy.len()
            ));
        }
        for (i, row) in self.gop.iter().enumerate() {
            if row.len() != 2 * n_phones {
                return Err(format!(
                    "'{}': gop row {} has {} values, expected {}",
                    self.utt_id,
                    i,
                    row.len(),
                    2 * n_phones
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(format!("'{}': non-finite gop value in row {}", self.utt_id, i));
            }
        }
        for (i, &p) in self.phone_ids.iter().enumerate() {
            if p >= n_phones {
                return Err(format!(
                    "'{}': phone id {} at position {} out of range [0, {})",
                    self.utt_id, p, i, n_phones
                ));
            }
        }
        if self.word_index[0] != 0 {
            return Err(format!("'{}': word_index must start at 0", self.utt_id));
        }
        for w in self.word_index.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(format!(
                    "'{}': word_index must be non-decreasing without gaps, got {} -> {}",
                    self.utt_id, w[0], w[1]
                ));
            }
        }
        let n_words = self.word_index.last().unwrap() + 1;
        if self.word_labels.len() != n_words {
            return Err(format!(
                "'{}': {} words aligned but {} word labels",
                self.utt_id,
                n_words,
                self.word_labels.len()
            ));
        }
        for (i, &q) in self.phoneme_accuracy.iter().enumerate() {
            if !(0.0..=2.0).contains(&q) {
                return Err(format!(
                    "'{}': phoneme score {} at position {} outside [0, 2]",
                    self.utt_id, q, i
                ));
            }
        }
        let in_range = |v: f64| (0.0..=10.0).contains(&v);
        for (i, w) in self.word_labels.iter().enumerate() {
            if ![w.accuracy, w.stress, w.total].iter().all(|v| in_range(*v)) {
                return Err(format!(
                    "'{}': word {} label outside [0, 10]",
                    self.utt_id, i
                ));
            }
        }
        let u = &self.utt_labels;
        if ![u.accuracy, u.completeness, u.fluency, u.prosody, u.total]
            .iter()
            .all(|v| in_range(*v))
        {
            return Err(format!("'{}': utterance label outside [0, 10]", self.utt_id));
        }
        Ok(())
    }
}

// ── Label scaling ────────────────────────────────────────────────────────

/// Map a raw word/utterance score from [0, 10] to the phoneme scale [0, 2].
pub fn scale_label(raw: f64) -> f64 {
    raw / 5.0
}

/// Inverse of `scale_label`.
pub fn unscale_label(scaled: f64) -> f64 {
    scaled * 5.0
}

// ── File i/o ─────────────────────────────────────────────────────────────

fn fmt_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn record_line(s: &UtteranceSample) -> String {
    let ids = s
        .phone_ids
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let widx = s
        .word_index
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let gop = s
        .gop
        .iter()
        .map(|row| fmt_floats(row))
        .collect::<Vec<_>>()
        .join(";");
    let wacc = fmt_floats(&s.word_labels.iter().map(|w| w.accuracy).collect::<Vec<_>>());
    let wstr = fmt_floats(&s.word_labels.iter().map(|w| w.stress).collect::<Vec<_>>());
    let wtot = fmt_floats(&s.word_labels.iter().map(|w| w.total).collect::<Vec<_>>());
    let u = &s.utt_labels;
    let utt = fmt_floats(&[u.accuracy, u.completeness, u.fluency, u.prosody, u.total]);
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{}",
        s.utt_id,
        ids,
        widx,
        gop,
        fmt_floats(&s.phoneme_accuracy),
        wacc,
        wstr,
        wtot,
        utt
    )
}

pub fn write_dataset(samples: &[UtteranceSample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(out, "{}", record_line(s))?;
    }
    out.flush()?;
    Ok(())
}

/// Parse and validate a dataset file. Fails fast with the line number and
/// utterance id of the first bad record.
pub fn load_dataset(path: impl AsRef<Path>, n_phones: usize) -> Result<Vec<UtteranceSample>> {
    let path_str = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let sample = parse_record(&line).map_err(|msg| Error::DataFormat {
            path: path_str.clone(),
            line: idx + 1,
            msg,
        })?;
        sample.validate(n_phones).map_err(|msg| Error::DataFormat {
            path: path_str.clone(),
            line: idx + 1,
            msg,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

fn parse_record(line: &str) -> std::result::Result<UtteranceSample, String> {
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 9 {
        return Err(format!("expected 9 '|'-separated fields, got {}", fields.len()));
    }
    let utt_id = fields[0].to_string();
    let parse_usizes = |s: &str, what: &str| -> std::result::Result<Vec<usize>, String> {
        s.split(',')
            .map(|v| v.parse::<usize>().map_err(|_| format!("bad {} value {:?} in '{}'", what, v, utt_id)))
            .collect()
    };
    let parse_floats = |s: &str, what: &str| -> std::result::Result<Vec<f64>, String> {
        s.split(',')
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| format!("bad {} value {:?} in '{}'", what, v, utt_id))
            })
            .collect()
    };
    let phone_ids = parse_usizes(fields[1], "phone id")?;
    let word_index = parse_usizes(fields[2], "word index")?;
    let gop = fields[3]
        .split(';')
        .map(|row| parse_floats(row, "gop"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let phoneme_accuracy = parse_floats(fields[4], "phoneme score")?;
    let wacc = parse_floats(fields[5], "word accuracy")?;
    let wstr = parse_floats(fields[6], "word stress")?;
    let wtot = parse_floats(fields[7], "word total")?;
    if wacc.len() != wstr.len() || wacc.len() != wtot.len() {
        return Err(format!(
            "'{}': word label lists disagree in length ({}, {}, {})",
            utt_id,
            wacc.len(),
            wstr.len(),
            wtot.len()
        ));
    }
    let word_labels = wacc
        .iter()
        .zip(&wstr)
        .zip(&wtot)
        .map(|((&accuracy, &stress), &total)| WordLabels { accuracy, stress, total })
        .collect();
    let utt = parse_floats(fields[8], "utterance score")?;
    if utt.len() != 5 {
        return Err(format!(
            "'{}': expected 5 utterance scores, got {}",
            utt_id,
            utt.len()
        ));
    }
    Ok(UtteranceSample {
        utt_id,
        phone_ids,
        gop,
        word_index,
        phoneme_accuracy,
        word_labels,
        utt_labels: UttLabels {
            accuracy: utt[0],
            completeness: utt[1],
            fluency: utt[2],
            prosody: utt[3],
            total: utt[4],
        },
    })
}

// ── Batching ─────────────────────────────────────────────────────────────

/// A padded, masked stack of samples ready for a forward pass. Labels are
/// already scaled to [0, 2]; padding uses phone id `n_phones`, zero GOP
/// rows, and mask 0.
#[derive(Debug)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    pub size: usize,
    pub t_len: usize,
    pub w_len: usize,
    pub gop: Tensor,          // [B, T, 2*n_phones]
    pub phone_ids: Vec<usize>, // row-major [B, T]
    pub mask: Tensor,         // [B, T]
    pub lengths: Vec<usize>,
    pub word_counts: Vec<usize>,
    pub alignment: Tensor, // [B, W, T]; 1/count over each word's positions
    pub word_mask: Tensor, // [B, W]
    pub phoneme_gold: Tensor, // [B, T]
    pub word_gold: Vec<(String, Tensor)>, // per aspect, [B, W]
    pub utt_gold: Vec<(String, Tensor)>,  // per aspect, [B]
}

impl Batch {
    /// Builds a batch padded to the longest sample (or `pad_to`, which must
    /// not be shorter). Samples longer than `max_len` are rejected.
    pub fn from_samples(
        samples: &[UtteranceSample],
        n_phones: usize,
        max_len: usize,
        pad_to: Option<usize>,
    ) -> Result<Batch> {
        assert!(!samples.is_empty(), "batch: no samples");
        for s in samples {
            if s.len() > max_len {
                return Err(Error::Config(format!(
                    "utterance '{}' has {} phonemes, exceeding max_len {}",
                    s.utt_id,
                    s.len(),
                    max_len
                )));
            }
        }
        let b = samples.len();
        let longest = samples.iter().map(UtteranceSample::len).max().unwrap();
        let t_len = pad_to.unwrap_or(longest).max(longest);
        let w_len = samples.iter().map(UtteranceSample::n_words).max().unwrap();
        let gop_dim = 2 * n_phones;

        let mut gop = vec![0.0; b * t_len * gop_dim];
        let mut phone_ids = vec![n_phones; b * t_len];
        let mut mask = vec![0.0; b * t_len];
        let mut phoneme_gold = vec![0.0; b * t_len];
        let mut alignment = vec![0.0; b * w_len * t_len];
        let mut word_mask = vec![0.0; b * w_len];
        let mut word_gold: Vec<Vec<f64>> = vec![vec![0.0; b * w_len]; 3];
        let mut utt_gold: Vec<Vec<f64>> = vec![vec![0.0; b]; 5];

        for (i, s) in samples.iter().enumerate() {
            let t = s.len();
            for p in 0..t {
                gop[(i * t_len + p) * gop_dim..(i * t_len + p) * gop_dim + gop_dim]
                    .copy_from_slice(&s.gop[p]);
                phone_ids[i * t_len + p] = s.phone_ids[p];
                mask[i * t_len + p] = 1.0;
                phoneme_gold[i * t_len + p] = s.phoneme_accuracy[p];
            }
            let mut counts = vec![0usize; s.n_words()];
            for &w in &s.word_index {
                counts[w] += 1;
            }
            for (p, &w) in s.word_index.iter().enumerate() {
                alignment[(i * w_len + w) * t_len + p] = 1.0 / counts[w] as f64;
            }
            for (w, labels) in s.word_labels.iter().enumerate() {
                word_mask[i * w_len + w] = 1.0;
                word_gold[0][i * w_len + w] = scale_label(labels.accuracy);
                word_gold[1][i * w_len + w] = scale_label(labels.stress);
                word_gold[2][i * w_len + w] = scale_label(labels.total);
            }
            let u = &s.utt_labels;
            for (k, v) in [u.accuracy, u.completeness, u.fluency, u.prosody, u.total]
                .into_iter()
                .enumerate()
            {
                utt_gold[k][i] = scale_label(v);
            }
        }

        Ok(Batch {
            utt_ids: samples.iter().map(|s| s.utt_id.clone()).collect(),
            size: b,
            t_len,
            w_len,
            gop: Tensor::new(gop, &[b, t_len, gop_dim]),
            phone_ids,
            mask: Tensor::new(mask, &[b, t_len]),
            lengths: samples.iter().map(UtteranceSample::len).collect(),
            word_counts: samples.iter().map(UtteranceSample::n_words).collect(),
            alignment: Tensor::new(alignment, &[b, w_len, t_len]),
            word_mask: Tensor::new(word_mask, &[b, w_len]),
            phoneme_gold: Tensor::new(phoneme_gold, &[b, t_len]),
            word_gold: WORD_ASPECTS
                .iter()
                .zip(word_gold)
                .map(|(n, d)| (n.to_string(), Tensor::new(d, &[b, w_len])))
                .collect(),
            utt_gold: UTT_ASPECTS
                .iter()
                .zip(utt_gold)
                .map(|(n, d)| (n.to_string(), Tensor::new(d, &[b])))
                .collect(),
        })
    }

    /// Total real phonemes in the batch.
    pub fn phoneme_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Total real words in the batch.
    pub fn word_count(&self) -> usize {
        self.word_counts.iter().sum()
    }
}

/// Deterministically shuffle (when a seed is given) and cut into padded
/// batches of `batch_size` (the last batch may be smaller).
pub fn make_batches(
    samples: &[UtteranceSample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    n_phones: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    assert!(batch_size >= 1, "batch: batch_size must be >= 1");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let group: Vec<UtteranceSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        batches.push(Batch::from_samples(&group, n_phones, max_len, None)?);
    }
    Ok(batches)
}

// ── Synthetic data ───────────────────────────────────────────────────────

pub const SYNTH_N_PHONES: usize = 42;
const SYNTH_MAX_WORDS: usize = 8;
const SYNTH_MAX_WORD_LEN: usize = 4;

/// Provenance of a generated dataset: every coefficient derives from the
/// seed, summarized here for logging.
#[derive(Debug, Clone)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub noise: f64,
    pub n_utts: usize,
    pub coeff_digest: u64,
}

impl std::fmt::Display for GeneratorInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "synthetic seed={} noise={} n={} coeff_digest={:016x}",
            self.seed, self.noise, self.n_utts, self.coeff_digest
        )
    }
}

/// Snap to a binary grid so that label scaling round-trips exactly.
fn quantize(v: f64) -> f64 {
    ((v * 256.0).round() / 256.0).clamp(0.0, 10.0)
}

/// Word- and utterance-level labels computed from per-phoneme quality
/// `q` (each in [0, 2]) and the word segmentation. Pure: the defining
/// mixtures are recomputable from `q` alone.
pub fn synthetic_labels(word_lens: &[usize], q: &[f64]) -> (Vec<WordLabels>, UttLabels) {
    assert_eq!(word_lens.iter().sum::<usize>(), q.len());
    let mut words = Vec::with_capacity(word_lens.len());
    let mut offset = 0;
    for &len in word_lens {
        let qs = &q[offset..offset + len];
        offset += len;
        let mean = qs.iter().sum::<f64>() / len as f64;
        let var = qs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let accuracy = quantize(5.0 * mean);
        let stress = quantize(10.0 * (-6.0 * var).exp());
        let total = quantize(0.7 * accuracy + 0.3 * stress);
        words.push(WordLabels { accuracy, stress, total });
    }
    let n = words.len() as f64;
    let mean_acc = words.iter().map(|w| w.accuracy).sum::<f64>() / n;
    let mean_stress = words.iter().map(|w| w.stress).sum::<f64>() / n;
    let accuracy = quantize(mean_acc);
    let fluency = quantize(0.5 * mean_acc + 0.5 * mean_stress);
    let prosody = quantize(0.3 * mean_acc + 0.7 * mean_stress);
    let completeness =
        quantize(10.0 * words.iter().filter(|w| w.accuracy >= 5.0).count() as f64 / n);
    let total = quantize((accuracy + completeness + fluency + prosody) / 4.0);
    (
        words,
        UttLabels {
            accuracy,
            completeness,
            fluency,
            prosody,
            total,
        },
    )
}

/// Generate `n_utts` utterances. Per phoneme a latent quality q in [0, 2]
/// is drawn: each word gets an independent base quality, and half the
/// words are "uneven" (their phonemes alternate above/below the base, so
/// within-word variance carries a detectable local signature). The GOP
/// row is a fixed random linear encoding of (q, phone identity) plus
/// gaussian noise scaled by `noise`. Labels derive from q via
/// `synthetic_labels`.
pub fn generate_synthetic(
    n_utts: usize,
    seed: u64,
    noise: f64,
) -> (Vec<UtteranceSample>, GeneratorInfo) {
    assert!(n_utts >= 1, "generator: n_utts must be >= 1");
    assert!(noise >= 0.0, "generator: noise must be >= 0");
    let gop_dim = 2 * SYNTH_N_PHONES;

    // Encoding coefficients come from their own stream so they only depend
    // on the seed, not on n_utts.
    let mut coeff_rng = ChaCha8Rng::seed_from_u64(seed);
    let w_q: Vec<f64> = (0..gop_dim).map(|_| coeff_rng.gen_range(-1.0..1.0)).collect();
    let offsets: Vec<f64> = (0..SYNTH_N_PHONES * gop_dim)
        .map(|_| coeff_rng.gen_range(-0.5..0.5))
        .collect();
    let mut digest: u64 = 0xcbf29ce484222325;
    for v in w_q.iter().chain(&offsets) {
        digest = (digest ^ v.to_bits()).wrapping_mul(0x100000001b3);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut gauss = GaussSource::default();
    let mut samples = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let n_words = rng.gen_range(2..=SYNTH_MAX_WORDS);
        let word_lens: Vec<usize> = (0..n_words)
            .map(|_| rng.gen_range(1..=SYNTH_MAX_WORD_LEN))
            .collect();
        let mut q = Vec::new();
        let mut word_index = Vec::new();
        for (w, &len) in word_lens.iter().enumerate() {
            let word_quality: f64 = rng.gen_range(0.1..1.9);
            let swing = if rng.gen::<f64>() < 0.5 { 0.45 } else { 0.0 };
            for p in 0..len {
                let parity = if p % 2 == 0 { 1.0 } else { -1.0 };
                let jitter: f64 = rng.gen_range(-0.08..0.08);
                q.push((word_quality + parity * swing + jitter).clamp(0.0, 2.0));
                word_index.push(w);
            }
        }
        let phone_ids: Vec<usize> = (0..q.len()).map(|_| rng.gen_range(0..SYNTH_N_PHONES)).collect();
        let gop: Vec<Vec<f64>> = q
            .iter()
            .zip(&phone_ids)
            .map(|(&quality, &p)| {
                (0..gop_dim)
                    .map(|j| {
                        quality * w_q[j]
                            + offsets[p * gop_dim + j]
                            + noise * gauss.next(&mut rng)
                    })
                    .collect()
            })
            .collect();
        let (word_labels, utt_labels) = synthetic_labels(&word_lens, &q);
        samples.push(UtteranceSample {
            utt_id: format!("syn-{}-{:05}", seed, i),
            phone_ids,
            gop,
            word_index,
            phoneme_accuracy: q,
            word_labels,
            utt_labels,
        });
    }
    (
        samples,
        GeneratorInfo {
            seed,
            noise,
            n_utts,
            coeff_digest: digest,
        },
    )
}

/// Box-Muller standard normal over a seeded uniform stream.
#[derive(Default)]
struct GaussSource {
    spare: Option<f64>,
}

impl GaussSource {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}
