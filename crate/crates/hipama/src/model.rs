//! The assessment network: GOP + phoneme-id embedding, a phoneme encoder
//! (LSTM, multi-head self-attention, convolution), per-aspect word and
//! utterance modules coupled by multi-aspect attention, regression heads,
//! and the summed multi-level loss.
//!
//! Two structural switches mirror the ablations: `hierarchical` routes
//! utterance modules through aggregated word representations (off: every
//! module reads the phoneme encoder output directly), and
//! `multi_aspect_attention` enables the cross-aspect residual attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, UTT_ASPECTS, WORD_ASPECTS};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, sinusoidal_encoding, Activation, AttentionPooling, Conv1dSame, Dense, Lstm,
    MultiHeadSelfAttention,
};
use crate::optim::Parameter;
use crate::tensor::Tensor;

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub n_phones: usize,
    pub width: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub dropout_utt: f64,
    pub max_len: usize,
    pub aspects_word: Vec<String>,
    pub aspects_utt: Vec<String>,
    pub hierarchical: bool,
    pub multi_aspect_attention: bool,
    pub positional_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_phones: 42,
            width: 24,
            heads: 4,
            kernel_size: 3,
            dropout_utt: 0.2,
            max_len: 50,
            aspects_word: WORD_ASPECTS.iter().map(|s| s.to_string()).collect(),
            aspects_utt: UTT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            hierarchical: true,
            multi_aspect_attention: true,
            positional_encoding: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// GOP feature width: one log phone posterior and one log posterior
    /// ratio per phone.
    pub fn gop_dim(&self) -> usize {
        2 * self.n_phones
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_phones == 0 || self.width == 0 || self.max_len == 0 {
            return fail("n_phones, width, and max_len must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_utt) {
            return fail(format!("dropout_utt {} outside [0, 1)", self.dropout_utt));
        }
        for (label, list) in [("word", &self.aspects_word), ("utterance", &self.aspects_utt)] {
            if list.is_empty() {
                return fail(format!("{label} aspect list is empty"));
            }
            let mut seen = std::collections::HashSet::new();
            for a in list {
                if !seen.insert(a.as_str()) {
                    return fail(format!("duplicate {label} aspect '{a}'"));
                }
            }
        }
        Ok(())
    }
}

// ── Outputs ──────────────────────────────────────────────────────────────

/// The intermediate aspect tensors for one (level, aspect) pair: the
/// module representation `a`, the attention vector `m` (when enabled),
/// and the final representation `r`.
pub struct AspectCapture {
    pub level: &'static str,
    pub aspect: String,
    pub a: Tensor,
    pub m: Option<Tensor>,
    pub r: Tensor,
}

/// Graph-side forward results (tensors still attached for backward).
pub struct ForwardOutput {
    pub phoneme_scores: Tensor,             // [B, T], zero at padding
    pub word_scores: Vec<(String, Tensor)>, // per aspect, [B, W]
    pub utt_scores: Vec<(String, Tensor)>,  // per aspect, [B]
    pub ma_weights_word: Vec<Tensor>,       // per target aspect, [B, T, N_w - 1]
    pub ma_weights_utt: Vec<Tensor>,        // per target aspect, [B, N_u - 1]
    pub captures: Vec<AspectCapture>,
}

/// Detached model outputs for evaluation and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub batch_size: usize,
    pub t_len: usize,
    pub w_len: usize,
    pub phoneme_scores: Vec<f64>,
    pub word_scores: Vec<(String, Vec<f64>)>,
    pub utt_scores: Vec<(String, Vec<f64>)>,
    /// Per target aspect, flattened `[B, T, N_w - 1]`.
    pub ma_weights_word: Vec<Vec<f64>>,
    /// Per target aspect, flattened `[B, N_u - 1]`.
    pub ma_weights_utt: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn from_output(out: &ForwardOutput, batch: &Batch) -> PredictionSet {
        PredictionSet {
            batch_size: batch.size,
            t_len: batch.t_len,
            w_len: batch.w_len,
            phoneme_scores: out.phoneme_scores.to_vec(),
            word_scores: out
                .word_scores
                .iter()
                .map(|(n, t)| (n.clone(), t.to_vec()))
                .collect(),
            utt_scores: out
                .utt_scores
                .iter()
                .map(|(n, t)| (n.clone(), t.to_vec()))
                .collect(),
            ma_weights_word: out.ma_weights_word.iter().map(Tensor::to_vec).collect(),
            ma_weights_utt: out.ma_weights_utt.iter().map(Tensor::to_vec).collect(),
        }
    }
}

/// Clamp a scaled score into the valid label range for display.
pub fn clamp_score(v: f64) -> f64 {
    v.clamp(0.0, 2.0)
}

// ── Forward mode ─────────────────────────────────────────────────────────

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

// ── Aspect module ────────────────────────────────────────────────────────

struct AspectModule {
    name: String,
    dense: Dense,
    pool: Option<AttentionPooling>,
    head: Dense,
}

impl AspectModule {
    fn new(name: &str, width: usize, with_pool: bool, rng: &mut ChaCha8Rng) -> AspectModule {
        AspectModule {
            name: name.to_string(),
            dense: Dense::new(width, width, Some(Activation::Relu), rng),
            pool: with_pool.then(|| AttentionPooling::new(width, rng)),
            head: Dense::new(width, 1, None, rng),
        }
    }

    fn params(&self, level: &str) -> Vec<Parameter> {
        let mut out = self.dense.params(&format!("{level}.{}.dense", self.name));
        if let Some(pool) = &self.pool {
            out.extend(pool.params(&format!("{level}.{}.pool", self.name)));
        }
        out.extend(self.head.params(&format!("{level}.{}.head", self.name)));
        out
    }
}

/// Cross-aspect attention over the pooled non-target stack: for each
/// target aspect the others are stacked in list order, attention-pooled,
/// scored against the target with a scaled dot product, and the weighted
/// sum is added residually. Returns the final representations, the
/// attention weights (one `[..., N-1]` tensor per target), and (a, m)
/// pairs for capture.
fn multi_aspect_attention(
    reps: &[Tensor],
    modules: &[AspectModule],
    width: usize,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<(Tensor, Tensor)>) {
    let n = reps.len();
    assert!(n >= 2, "multi-aspect attention needs at least 2 aspects");
    let lead: Vec<usize> = reps[0].shape()[..reps[0].shape().len() - 1].to_vec();
    let mut col_shape = lead.clone();
    col_shape.push(1);
    col_shape.push(width);
    let stack_axis = col_shape.len() - 2;
    let mut row_shape = lead.clone();
    row_shape.push(n - 1);
    let mut vcol_shape = row_shape.clone();
    vcol_shape.push(1);
    let scale = 1.0 / (width as f64).sqrt();

    let cols: Vec<Tensor> = reps.iter().map(|a| a.reshape(&col_shape)).collect();
    let mut finals = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut captures = Vec::with_capacity(n);
    for (target, module) in modules.iter().enumerate() {
        let others: Vec<&Tensor> = cols
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, t)| t)
            .collect();
        let stack = Tensor::concat(&others, stack_axis); // [..., N-1, d]
        let pool = module
            .pool
            .as_ref()
            .expect("multi-aspect attention requires pooling parameters");
        let (pooled, _) = pool.forward(&stack);
        let logits = cols[target]
            .mul(&pooled)
            .sum_axis(col_shape.len() - 1)
            .scale(scale); // [..., N-1]
        let v = logits.softmax(row_shape.len() - 1);
        let m = pooled.mul(&v.reshape(&vcol_shape)).sum_axis(stack_axis); // [..., d]
        let r = reps[target].add(&m);
        finals.push(r);
        weights.push(v);
        captures.push((reps[target].clone(), m));
    }
    (finals, weights, captures)
}

// ── The model ────────────────────────────────────────────────────────────

pub struct Hipama {
    pub config: ModelConfig,
    gop_proj: Dense,
    phone_embed: Tensor, // [n_phones + 1, width]; last row is the padding id
    pos_table: Option<Tensor>,
    lstm: Lstm,
    phoneme_attn: MultiHeadSelfAttention,
    conv: Conv1dSame,
    phoneme_head: Dense,
    word_modules: Vec<AspectModule>,
    utt_attn: Option<MultiHeadSelfAttention>,
    utt_modules: Vec<AspectModule>,
}

impl Hipama {
    pub fn new(config: ModelConfig) -> Result<Hipama> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width;
        let gop_proj = Dense::new(config.gop_dim(), d, None, &mut rng);
        let phone_embed = {
            let t = crate::nn::xavier_uniform(
                &[config.n_phones + 1, d],
                config.n_phones + 1,
                d,
                &mut rng,
            );
            // The padding id must map to the zero vector; padded positions
            // never receive gradient, so the row stays zero.
            t.with_data_mut(|data| {
                let start = config.n_phones * d;
                data[start..start + d].iter_mut().for_each(|v| *v = 0.0);
            });
            t
        };
        let pos_table = config
            .positional_encoding
            .then(|| sinusoidal_encoding(config.max_len, d));
        let lstm = Lstm::new(d, d, &mut rng);
        let phoneme_attn = MultiHeadSelfAttention::new(d, config.heads, &mut rng);
        let conv = Conv1dSame::new(d, d, config.kernel_size, &mut rng);
        let phoneme_head = Dense::new(d, 1, None, &mut rng);
        let with_pool = config.multi_aspect_attention;
        let word_modules = config
            .aspects_word
            .iter()
            .map(|a| AspectModule::new(a, d, with_pool && config.aspects_word.len() >= 2, &mut rng))
            .collect();
        let utt_attn = config
            .hierarchical
            .then(|| MultiHeadSelfAttention::new(d, config.heads, &mut rng));
        let utt_modules = config
            .aspects_utt
            .iter()
            .map(|a| AspectModule::new(a, d, with_pool && config.aspects_utt.len() >= 2, &mut rng))
            .collect();
        Ok(Hipama {
            config,
            gop_proj,
            phone_embed,
            pos_table,
            lstm,
            phoneme_attn,
            conv,
            phoneme_head,
            word_modules,
            utt_attn,
            utt_modules,
        })
    }

    /// Every trainable tensor, in a fixed order with unique names.
    pub fn named_params(&self) -> Vec<Parameter> {
        let mut out = self.gop_proj.params("embed.gop");
        out.push(Parameter::new("embed.phone.table", self.phone_embed.clone()));
        out.extend(self.lstm.params("phoneme.lstm"));
        out.extend(self.phoneme_attn.params("phoneme.attn"));
        out.extend(self.conv.params("phoneme.conv"));
        out.extend(self.phoneme_head.params("phoneme.head"));
        for m in &self.word_modules {
            out.extend(m.params("word"));
        }
        if let Some(attn) = &self.utt_attn {
            out.extend(attn.params("utterance.attn"));
        }
        for m in &self.utt_modules {
            out.extend(m.params("utterance"));
        }
        debug_assert!({
            let mut names: Vec<&str> = out.iter().map(|p| p.name.as_str()).collect();
            names.sort_unstable();
            names.windows(2).all(|w| w[0] != w[1])
        });
        out
    }

    pub fn param_count(&self) -> usize {
        crate::optim::count_params(&self.named_params())
    }

    /// Look up a parameter by its full name.
    pub fn param(&self, name: &str) -> Option<Parameter> {
        self.named_params().into_iter().find(|p| p.name == name)
    }

    /// Overwrite all parameters from checkpoint entries (name, shape, data).
    pub fn load_state(&self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut by_name: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
            entries.iter().map(|e| (e.0.as_str(), e)).collect();
        for p in self.named_params() {
            let entry = by_name.remove(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter '{}'", p.name))
            })?;
            if entry.1 != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    entry.1,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data(&entry.2);
        }
        if let Some(stray) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unknown parameter '{stray}' in checkpoint"
            )));
        }
        Ok(())
    }

    // ── Stages ───────────────────────────────────────────────────────────

    /// Projected GOP features plus phoneme embedding, zeroed at padding.
    fn embed_inputs(&self, batch: &Batch) -> Tensor {
        let (b, t) = (batch.size, batch.t_len);
        assert!(
            t <= self.config.max_len,
            "batch length {} exceeds max_len {}",
            t,
            self.config.max_len
        );
        let g = self.gop_proj.forward(&batch.gop);
        let e = Tensor::embedding(&self.phone_embed, &batch.phone_ids, &[b, t]);
        let mut x = g.add(&e);
        if let Some(pe) = &self.pos_table {
            x = x.add(&pe.slice(0, 0, t));
        }
        x.mul(&batch.mask.reshape(&[b, t, 1]))
    }

    /// LSTM -> self-attention -> convolution, plus the per-position score.
    fn phoneme_encoder(&self, x: &Tensor, batch: &Batch) -> (Tensor, Tensor) {
        let (b, t) = (batch.size, batch.t_len);
        let seq = self.lstm.forward(x, &batch.mask);
        let ctx = self.phoneme_attn.forward(&seq, &batch.mask);
        let h = self.conv.forward(&ctx, &batch.mask);
        let scores = self
            .phoneme_head
            .forward(&h)
            .reshape(&[b, t])
            .mul(&batch.mask);
        (h, scores)
    }

    /// Per-aspect word representations and alignment-averaged word scores.
    fn word_level(
        &self,
        h: &Tensor,
        batch: &Batch,
        out: &mut ForwardOutput,
    ) -> Vec<Tensor> {
        let (b, t, w) = (batch.size, batch.t_len, batch.w_len);
        let reps: Vec<Tensor> = self
            .word_modules
            .iter()
            .map(|m| m.dense.forward(h))
            .collect();
        let finals = if self.config.multi_aspect_attention && reps.len() >= 2 {
            let (finals, weights, captures) =
                multi_aspect_attention(&reps, &self.word_modules, self.config.width);
            out.ma_weights_word = weights;
            for ((module, (a, m)), r) in
                self.word_modules.iter().zip(captures).zip(&finals)
            {
                out.captures.push(AspectCapture {
                    level: "word",
                    aspect: module.name.clone(),
                    a,
                    m: Some(m),
                    r: r.clone(),
                });
            }
            finals
        } else {
            for (module, a) in self.word_modules.iter().zip(&reps) {
                out.captures.push(AspectCapture {
                    level: "word",
                    aspect: module.name.clone(),
                    a: a.clone(),
                    m: None,
                    r: a.clone(),
                });
            }
            reps
        };
        for (module, rep) in self.word_modules.iter().zip(&finals) {
            let pos_scores = module
                .head
                .forward(rep)
                .reshape(&[b, t])
                .mul(&batch.mask);
            let word_scores = batch
                .alignment
                .matmul(&pos_scores.reshape(&[b, t, 1]))
                .reshape(&[b, w])
                .mul(&batch.word_mask);
            out.word_scores.push((module.name.clone(), word_scores));
        }
        finals
    }

    /// Aggregate into one vector per utterance, then per-aspect scoring.
    fn utterance_level(
        &self,
        word_reps: Option<&[Tensor]>,
        h: &Tensor,
        batch: &Batch,
        mode: &mut Mode,
        out: &mut ForwardOutput,
    ) {
        let (b, t) = (batch.size, batch.t_len);
        let mask_col = batch.mask.reshape(&[b, t, 1]);
        let inv_len = Tensor::new(
            batch.lengths.iter().map(|&l| 1.0 / l as f64).collect(),
            &[b, 1],
        );
        let z = match word_reps {
            Some(reps) => {
                // Average the word-level aspect representations, contextualize
                // with self-attention, then pool over real positions.
                let mut sum = reps[0].clone();
                for r in &reps[1..] {
                    sum = sum.add(r);
                }
                let u = sum.scale(1.0 / reps.len() as f64);
                let attn = self
                    .utt_attn
                    .as_ref()
                    .expect("hierarchical model must own the utterance attention");
                let mut g = attn.forward(&u, &batch.mask);
                if let Mode::Train(rng) = mode {
                    g = dropout(&g, self.config.dropout_utt, true, rng);
                }
                g.mul(&mask_col).sum_axis(1).mul(&inv_len)
            }
            None => h.mul(&mask_col).sum_axis(1).mul(&inv_len),
        };
        let reps: Vec<Tensor> = self
            .utt_modules
            .iter()
            .map(|m| m.dense.forward(&z))
            .collect();
        let finals = if self.config.multi_aspect_attention && reps.len() >= 2 {
            let (finals, weights, captures) =
                multi_aspect_attention(&reps, &self.utt_modules, self.config.width);
            out.ma_weights_utt = weights;
            for ((module, (a, m)), r) in
                self.utt_modules.iter().zip(captures).zip(&finals)
            {
                out.captures.push(AspectCapture {
                    level: "utterance",
                    aspect: module.name.clone(),
                    a,
                    m: Some(m),
                    r: r.clone(),
                });
            }
            finals
        } else {
            for (module, a) in self.utt_modules.iter().zip(&reps) {
                out.captures.push(AspectCapture {
                    level: "utterance",
                    aspect: module.name.clone(),
                    a: a.clone(),
                    m: None,
                    r: a.clone(),
                });
            }
            reps
        };
        for (module, rep) in self.utt_modules.iter().zip(&finals) {
            let scores = module.head.forward(rep).reshape(&[b]);
            out.utt_scores.push((module.name.clone(), scores));
        }
    }

    pub fn forward(&self, batch: &Batch, mut mode: Mode) -> ForwardOutput {
        assert_eq!(
            batch.gop.shape()[2],
            self.config.gop_dim(),
            "batch gop width {} does not match model gop width {}",
            batch.gop.shape()[2],
            self.config.gop_dim()
        );
        let mut out = ForwardOutput {
            phoneme_scores: Tensor::zeros(&[1]),
            word_scores: Vec::new(),
            utt_scores: Vec::new(),
            ma_weights_word: Vec::new(),
            ma_weights_utt: Vec::new(),
            captures: Vec::new(),
        };
        let x = self.embed_inputs(batch);
        let (h, phoneme_scores) = self.phoneme_encoder(&x, batch);
        out.phoneme_scores = phoneme_scores;
        let word_reps = self.word_level(&h, batch, &mut out);
        if self.config.hierarchical {
            self.utterance_level(Some(&word_reps), &h, batch, &mut mode, &mut out);
        } else {
            self.utterance_level(None, &h, batch, &mut mode, &mut out);
        }
        out
    }
}

// ── Loss ─────────────────────────────────────────────────────────────────

/// Scalar loss terms, read out of the graph for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub phoneme: f64,
    pub word: Vec<(String, f64)>,
    pub utterance: Vec<(String, f64)>,
}

fn masked_mse(pred: &Tensor, gold: &Tensor, mask: &Tensor, count: f64) -> Tensor {
    let diff = pred.sub(gold);
    diff.mul(&diff).mul(mask).sum_all().scale(1.0 / count)
}

/// Sum over levels of the per-level average of aspect MSE losses:
/// phoneme MSE plus the word-aspect mean plus the utterance-aspect mean,
/// each pooled over unpadded elements only.
pub fn hierarchical_loss(out: &ForwardOutput, batch: &Batch) -> (Tensor, LossBreakdown) {
    let phoneme = masked_mse(
        &out.phoneme_scores,
        &batch.phoneme_gold,
        &batch.mask,
        batch.phoneme_count() as f64,
    );
    let mut word_terms = Vec::new();
    for (name, scores) in &out.word_scores {
        let gold = batch
            .word_gold
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no gold labels for word aspect '{name}'"));
        word_terms.push((
            name.clone(),
            masked_mse(scores, &gold.1, &batch.word_mask, batch.word_count() as f64),
        ));
    }
    let mut utt_terms = Vec::new();
    for (name, scores) in &out.utt_scores {
        let gold = batch
            .utt_gold
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no gold labels for utterance aspect '{name}'"));
        let diff = scores.sub(&gold.1);
        utt_terms.push((name.clone(), diff.mul(&diff).mean_all()));
    }

    let mut total = phoneme.clone();
    let mut word_sum: Option<Tensor> = None;
    for (_, t) in &word_terms {
        word_sum = Some(match word_sum {
            Some(acc) => acc.add(t),
            None => t.clone(),
        });
    }
    if let Some(ws) = word_sum {
        total = total.add(&ws.scale(1.0 / word_terms.len() as f64));
    }
    let mut utt_sum: Option<Tensor> = None;
    for (_, t) in &utt_terms {
        utt_sum = Some(match utt_sum {
            Some(acc) => acc.add(t),
            None => t.clone(),
        });
    }
    if let Some(us) = utt_sum {
        total = total.add(&us.scale(1.0 / utt_terms.len() as f64));
    }

    let breakdown = LossBreakdown {
        total: total.item(),
        phoneme: phoneme.item(),
        word: word_terms.iter().map(|(n, t)| (n.clone(), t.item())).collect(),
        utterance: utt_terms.iter().map(|(n, t)| (n.clone(), t.item())).collect(),
    };
    (total, breakdown)
}
