//! Neural building blocks: dense, LSTM, multi-head self-attention,
//! same-padded 1-d convolution, attention pooling, dropout.
//!
//! All layers take `[B, T, d]` (or trailing-feature) tensors and a `[B, T]`
//! mask with 1.0 at real positions and 0.0 at padding. Padding must be a
//! suffix. Layers guarantee that appending padded positions never changes
//! outputs at real positions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::optim::Parameter;
use crate::tensor::Tensor;

/// Uniform init in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new_grad(data, shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

// ── Dense ────────────────────────────────────────────────────────────────

/// Affine map on the trailing axis: `y = x W + b`, optional activation.
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Option<Activation>,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Option<Activation>,
        rng: &mut ChaCha8Rng,
    ) -> Dense {
        Dense {
            w: xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
            b: Tensor::new_grad(vec![0.0; out_dim], &[out_dim]),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.w).add(&self.b);
        match self.activation {
            Some(a) => a.apply(&y),
            None => y,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{prefix}.w"), self.w.clone()),
            Parameter::new(format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────────

/// Single-layer unidirectional LSTM. Gate blocks are packed along the
/// last axis in the order input, forget, candidate, output. The hidden
/// state is carried through unchanged across masked steps and outputs at
/// masked positions are zero.
pub struct Lstm {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Lstm {
        let w_ih = xavier_uniform(&[input_dim, 4 * hidden], input_dim, hidden, rng);
        let w_hh = xavier_uniform(&[hidden, 4 * hidden], hidden, hidden, rng);
        // Forget-gate bias starts at +1 so early training does not erase state.
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Lstm {
            w_ih,
            w_hh,
            bias: Tensor::new_grad(b, &[4 * hidden]),
            hidden,
        }
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "lstm: input must be [B,T,d], got {:?}", shape);
        let (b, t_len) = (shape[0], shape[1]);
        assert_eq!(
            mask.shape(),
            &[b, t_len],
            "lstm: mask shape {:?} does not match input {:?}",
            mask.shape(),
            shape
        );
        assert_suffix_mask(mask);
        let h_dim = self.hidden;

        // Input projections for every step at once.
        let xg = x.matmul(&self.w_ih).add(&self.bias); // [B,T,4h]
        let mut h = Tensor::zeros(&[b, h_dim]);
        let mut c = Tensor::zeros(&[b, h_dim]);
        let mask_data = mask.to_vec();
        let mut outs: Vec<Tensor> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let gates = xg
                .slice(1, t, 1)
                .reshape(&[b, 4 * h_dim])
                .add(&h.matmul(&self.w_hh));
            let i_g = gates.slice(1, 0, h_dim).sigmoid();
            let f_g = gates.slice(1, h_dim, h_dim).sigmoid();
            let g_g = gates.slice(1, 2 * h_dim, h_dim).tanh();
            let o_g = gates.slice(1, 3 * h_dim, h_dim).sigmoid();
            let c_new = f_g.mul(&c).add(&i_g.mul(&g_g));
            let h_new = o_g.mul(&c_new.tanh());

            let m_col: Vec<f64> = (0..b).map(|i| mask_data[i * t_len + t]).collect();
            let keep_col: Vec<f64> = m_col.iter().map(|v| 1.0 - v).collect();
            let m_t = Tensor::new(m_col, &[b, 1]);
            let keep_t = Tensor::new(keep_col, &[b, 1]);
            c = m_t.mul(&c_new).add(&keep_t.mul(&c));
            h = m_t.mul(&h_new).add(&keep_t.mul(&h));
            outs.push(h_new.mul(&m_t).reshape(&[b, 1, h_dim]));
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat(&refs, 1)
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{prefix}.w_ih"), self.w_ih.clone()),
            Parameter::new(format!("{prefix}.w_hh"), self.w_hh.clone()),
            Parameter::new(format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

fn assert_suffix_mask(mask: &Tensor) -> (usize, usize) {
    let shape = mask.shape();
    let (b, t_len) = (shape[0], shape[1]);
    let data = mask.data();
    for i in 0..b {
        let row = &data[i * t_len..(i + 1) * t_len];
        let mut seen_pad = false;
        for &v in row {
            assert!(
                v == 0.0 || v == 1.0,
                "mask: entries must be 0 or 1, got {}",
                v
            );
            if v == 0.0 {
                seen_pad = true;
            } else {
                assert!(!seen_pad, "mask: padding must be a suffix, got row {:?}", row);
            }
        }
    }
    (b, t_len)
}

// ── Multi-head self-attention ────────────────────────────────────────────

/// Scaled dot-product self-attention with per-head scale 1/sqrt(d/heads).
/// Padded keys are excluded; no residual connection is included here.
pub struct MultiHeadSelfAttention {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> MultiHeadSelfAttention {
        assert!(
            heads >= 1 && dim % heads == 0,
            "attention: dim {} not divisible by heads {}",
            dim,
            heads
        );
        let mk = |rng: &mut ChaCha8Rng| xavier_uniform(&[dim, dim], dim, dim, rng);
        MultiHeadSelfAttention {
            wq: mk(rng),
            bq: Tensor::new_grad(vec![0.0; dim], &[dim]),
            wk: mk(rng),
            bk: Tensor::new_grad(vec![0.0; dim], &[dim]),
            wv: mk(rng),
            bv: Tensor::new_grad(vec![0.0; dim], &[dim]),
            wo: mk(rng),
            bo: Tensor::new_grad(vec![0.0; dim], &[dim]),
            heads,
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        assert_eq!(
            shape.len(),
            3,
            "attention: input must be [B,T,d], got {:?}",
            shape
        );
        let (b, t_len, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(
            d, self.dim,
            "attention: input width {} does not match layer width {}",
            d, self.dim
        );
        let q = x.matmul(&self.wq).add(&self.bq);
        let k = x.matmul(&self.wk).add(&self.bk);
        let v = x.matmul(&self.wv).add(&self.bv);
        let key_mask = mask.reshape(&[b, 1, t_len]);
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctxs: Vec<Tensor> = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(2, h * hd, hd);
            let kh = k.slice(2, h * hd, hd);
            let vh = v.slice(2, h * hd, hd);
            let scores = qh.matmul(&kh.transpose_last2()).scale(scale); // [B,T,T]
            let attn = scores.softmax_masked(2, &key_mask);
            ctxs.push(attn.matmul(&vh));
        }
        let refs: Vec<&Tensor> = ctxs.iter().collect();
        let ctx = Tensor::concat(&refs, 2);
        let out = ctx.matmul(&self.wo).add(&self.bo);
        out.mul(&mask.reshape(&[b, t_len, 1]))
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{prefix}.wq"), self.wq.clone()),
            Parameter::new(format!("{prefix}.bq"), self.bq.clone()),
            Parameter::new(format!("{prefix}.wk"), self.wk.clone()),
            Parameter::new(format!("{prefix}.bk"), self.bk.clone()),
            Parameter::new(format!("{prefix}.wv"), self.wv.clone()),
            Parameter::new(format!("{prefix}.bv"), self.bv.clone()),
            Parameter::new(format!("{prefix}.wo"), self.wo.clone()),
            Parameter::new(format!("{prefix}.bo"), self.bo.clone()),
        ]
    }
}

// ── 1-d convolution with "same" zero padding ─────────────────────────────

/// Temporal convolution preserving sequence length. The mask is applied to
/// the input before convolving and to the output after, so padded positions
/// contribute zeros and receive zeros.
pub struct Conv1dSame {
    pub w: Tensor, // [kernel, d_in, d_out]
    pub b: Tensor,
    pub kernel_size: usize,
}

impl Conv1dSame {
    pub fn new(d_in: usize, d_out: usize, kernel_size: usize, rng: &mut ChaCha8Rng) -> Conv1dSame {
        assert!(
            kernel_size % 2 == 1,
            "conv: kernel_size must be odd, got {}",
            kernel_size
        );
        Conv1dSame {
            w: xavier_uniform(
                &[kernel_size, d_in, d_out],
                kernel_size * d_in,
                d_out,
                rng,
            ),
            b: Tensor::new_grad(vec![0.0; d_out], &[d_out]),
            kernel_size,
        }
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "conv: input must be [B,T,d], got {:?}", shape);
        let (b, t_len, d_in) = (shape[0], shape[1], shape[2]);
        let d_out = self.w.shape()[2];
        let mask_col = mask.reshape(&[b, t_len, 1]);
        let xm = x.mul(&mask_col);
        let half = self.kernel_size / 2;
        let padded = if half == 0 {
            xm
        } else {
            let z = Tensor::zeros(&[b, half, d_in]);
            Tensor::concat(&[&z, &xm, &z], 1)
        };
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel_size {
            let xj = padded.slice(1, j, t_len); // [B,T,d_in]
            let wj = self.w.slice(0, j, 1).reshape(&[d_in, d_out]);
            let yj = xj.matmul(&wj);
            acc = Some(match acc {
                Some(a) => a.add(&yj),
                None => yj,
            });
        }
        acc.unwrap().add(&self.b).mul(&mask_col)
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{prefix}.w"), self.w.clone()),
            Parameter::new(format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

// ── Attention pooling ────────────────────────────────────────────────────

/// Row re-weighting: energies e_i = q · tanh(W s_i + b), u = softmax(e),
/// output rows u_i * s_i. Works on any leading batch shape; the pooled
/// axis is the second-to-last one.
pub struct AttentionPooling {
    pub w: Tensor,
    pub b: Tensor,
    pub q: Tensor,
}

impl AttentionPooling {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> AttentionPooling {
        AttentionPooling {
            w: xavier_uniform(&[dim, dim], dim, dim, rng),
            b: Tensor::new_grad(vec![0.0; dim], &[dim]),
            q: xavier_uniform(&[dim], dim, 1, rng),
        }
    }

    /// Returns the re-weighted rows and the row weights `[..., K]`.
    pub fn forward(&self, s: &Tensor) -> (Tensor, Tensor) {
        let shape = s.shape().to_vec();
        assert!(
            shape.len() >= 2,
            "attention pooling: input must be [..., K, d], got {:?}",
            shape
        );
        let d = shape[shape.len() - 1];
        let q_col = self.q.reshape(&[d, 1]);
        let e = s.matmul(&self.w).add(&self.b).tanh().matmul(&q_col); // [..., K, 1]
        let mut row_shape = shape.clone();
        row_shape.pop();
        let u = e.reshape(&row_shape).softmax(row_shape.len() - 1); // [..., K]
        let mut col_shape = row_shape.clone();
        col_shape.push(1);
        let pooled = s.mul(&u.reshape(&col_shape));
        (pooled, u)
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{prefix}.w"), self.w.clone()),
            Parameter::new(format!("{prefix}.b"), self.b.clone()),
            Parameter::new(format!("{prefix}.q"), self.q.clone()),
        ]
    }
}

// ── Dropout ──────────────────────────────────────────────────────────────

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity at inference.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout: rate {} outside [0, 1)",
        rate
    );
    if !training || rate == 0.0 {
        return x.clone();
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape()))
}

/// Fixed sinusoidal position table `[t_len, dim]`.
pub fn sinusoidal_encoding(t_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; t_len * dim];
    for pos in 0..t_len {
        for i in 0..dim {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, &[t_len, dim])
}
