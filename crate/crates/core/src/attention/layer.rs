use rand::Rng;

use super::{AttentionConfig, MaskSpec, TokenGroup};
use crate::error::{Error, Result};
use crate::nn::{
    axpy, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn_acc, layer_norm_backward, layer_norm_forward,
    softmax_backward_in_place, softmax_in_place, LayerNormCache, Matrix, Parameter,
};

const LN_EPS: f64 = 1e-5;

/// Weights of one post-norm Transformer layer:
/// `h = LN(x + MHA(x))`, `y = LN(h + W2·gelu(W1·h))`.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
}

/// Activations retained from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    positions: Vec<i64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// per head, g×g attention probabilities (before dropout)
    probs: Vec<Matrix>,
    /// per head dropout multipliers (0 or 1/(1-p)), absent when dropout is off
    attn_drop: Option<Vec<Matrix>>,
    attn_out: Matrix,
    ln1: LayerNormCache,
    hidden: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
    ffn_drop: Option<Matrix>,
    ln2: LayerNormCache,
}

impl TransformerWeights {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let p = |name: &str, m: Matrix| Parameter::new(format!("{prefix}.{name}"), m);
        Self {
            wq: p("wq", Matrix::random_normal(d, d, sd, rng)),
            bq: p("bq", Matrix::zeros(1, d)),
            wk: p("wk", Matrix::random_normal(d, d, sd, rng)),
            bk: p("bk", Matrix::zeros(1, d)),
            wv: p("wv", Matrix::random_normal(d, d, sd, rng)),
            bv: p("bv", Matrix::zeros(1, d)),
            wo: p("wo", Matrix::random_normal(d, d, sd, rng)),
            bo: p("bo", Matrix::zeros(1, d)),
            ln1_gain: p("ln1_gain", Matrix::filled(1, d, 1.0)),
            ln1_bias: p("ln1_bias", Matrix::zeros(1, d)),
            w1: p("w1", Matrix::random_normal(d, f, sd, rng)),
            b1: p("b1", Matrix::zeros(1, f)),
            w2: p("w2", Matrix::random_normal(f, d, sf, rng)),
            b2: p("b2", Matrix::zeros(1, d)),
            ln2_gain: p("ln2_gain", Matrix::filled(1, d, 1.0)),
            ln2_bias: p("ln2_bias", Matrix::zeros(1, d)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gain, &self.ln2_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }

    fn check(&self, group: &TokenGroup, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        if group.is_empty() {
            return Err(Error::Invalid("attention over an empty token group".into()));
        }
        if group.states.cols() != cfg.d_model || self.wq.value.rows() != cfg.d_model {
            return Err(Error::shape(
                "transformer_layer",
                format!(
                    "group width {}, weights width {}, config d_model {}",
                    group.states.cols(),
                    self.wq.value.rows(),
                    cfg.d_model
                ),
            ));
        }
        if group.states.rows() != group.positions.len() {
            return Err(Error::shape("transformer_layer", "positions length differs from rows"));
        }
        Ok(())
    }

    /// Attention sublayer only: `concat_h(softmax(Q_h K_hᵀ/√d_h) V_h) · Wo + bo`.
    pub fn attention(&self, group: &TokenGroup, cfg: &AttentionConfig, mask: MaskSpec) -> Result<Matrix> {
        self.check(group, cfg)?;
        let x = &group.states;
        let q = affine(x, &self.wq, &self.bq);
        let k = affine(x, &self.wk, &self.bk);
        let v = affine(x, &self.wv, &self.bv);
        let (attn_out, _, _) = attend::<rand::rngs::ThreadRng>(&q, &k, &v, &group.positions, cfg, mask, None)?;
        Ok(affine(&attn_out, &self.wo, &self.bo))
    }

    /// Full layer forward. `dropout_rng` enables dropout (after the attention
    /// softmax and after the FFN activation) when `cfg.dropout > 0`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        group: &TokenGroup,
        cfg: &AttentionConfig,
        mask: MaskSpec,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Matrix, LayerCache)> {
        self.check(group, cfg)?;
        let x = &group.states;
        let mut rng = dropout_rng.filter(|_| cfg.dropout > 0.0);

        let q = affine(x, &self.wq, &self.bq);
        let k = affine(x, &self.wk, &self.bk);
        let v = affine(x, &self.wv, &self.bv);
        let (attn_out, probs, attn_drop) =
            attend(&q, &k, &v, &group.positions, cfg, mask, rng.as_deref_mut())?;
        let mut r1 = affine(&attn_out, &self.wo, &self.bo);
        r1.add_assign(x);
        let (hidden, ln1) = layer_norm_forward(&r1, self.ln1_gain.value.data(), self.ln1_bias.value.data(), LN_EPS)?;

        let ffn_pre = affine(&hidden, &self.w1, &self.b1);
        let mut ffn_act = ffn_pre.clone();
        ffn_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let ffn_drop = rng.map(|r| {
            let mask = dropout_mask(ffn_act.rows(), ffn_act.cols(), cfg.dropout, r);
            for (a, m) in ffn_act.data_mut().iter_mut().zip(mask.data()) {
                *a *= m;
            }
            mask
        });
        let mut r2 = affine(&ffn_act, &self.w2, &self.b2);
        r2.add_assign(&hidden);
        let (out, ln2) = layer_norm_forward(&r2, self.ln2_gain.value.data(), self.ln2_bias.value.data(), LN_EPS)?;

        let cache = LayerCache {
            input: x.clone(),
            positions: group.positions.clone(),
            q,
            k,
            v,
            probs,
            attn_drop,
            attn_out,
            ln1,
            hidden,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ln2,
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_out` through the layer, accumulating parameter gradients.
    /// Returns the gradient with respect to the layer input.
    pub fn backward(&mut self, cache: &LayerCache, cfg: &AttentionConfig, d_out: &Matrix) -> Matrix {
        let d_r2 = layer_norm_backward(
            &cache.ln2,
            self.ln2_gain.value.data(),
            d_out,
            self.ln2_gain.grad.data_mut(),
            self.ln2_bias.grad.data_mut(),
        );
        // r2 = hidden + ffn_act·W2 + b2
        let mut d_hidden = d_r2.clone();
        gemm_tn_acc(&cache.ffn_act, &d_r2, &mut self.w2.grad);
        d_r2.col_sums_into(self.b2.grad.data_mut());
        let mut d_act = Matrix::zeros(d_r2.rows(), cfg.ffn_dim);
        gemm_nt(&d_r2, &self.w2.value, &mut d_act);
        if let Some(mask) = &cache.ffn_drop {
            for (g, m) in d_act.data_mut().iter_mut().zip(mask.data()) {
                *g *= m;
            }
        }
        for (g, &pre) in d_act.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
            *g *= gelu_grad(pre);
        }
        gemm_tn_acc(&cache.hidden, &d_act, &mut self.w1.grad);
        d_act.col_sums_into(self.b1.grad.data_mut());
        gemm_nt(&d_act, &self.w1.value, &mut d_hidden);

        let d_r1 = layer_norm_backward(
            &cache.ln1,
            self.ln1_gain.value.data(),
            &d_hidden,
            self.ln1_gain.grad.data_mut(),
            self.ln1_bias.grad.data_mut(),
        );
        // r1 = x + attn_out·Wo + bo
        let mut d_x = d_r1.clone();
        gemm_tn_acc(&cache.attn_out, &d_r1, &mut self.wo.grad);
        d_r1.col_sums_into(self.bo.grad.data_mut());
        let mut d_attn = Matrix::zeros(d_r1.rows(), cfg.d_model);
        gemm_nt(&d_r1, &self.wo.value, &mut d_attn);

        let (dq, dk, dv) = attend_backward(cache, cfg, &d_attn);
        for (dm, w, b) in [(&dq, &mut self.wq, &mut self.bq), (&dk, &mut self.wk, &mut self.bk), (&dv, &mut self.wv, &mut self.bv)] {
            gemm_tn_acc(&cache.input, dm, &mut w.grad);
            dm.col_sums_into(b.grad.data_mut());
            gemm_nt(dm, &w.value, &mut d_x);
        }
        d_x
    }
}

fn affine(x: &Matrix, w: &Parameter, b: &Parameter) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.value.cols());
    gemm_nn(x, &w.value, &mut out);
    out.add_row_broadcast(b.value.data());
    out
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    m
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dh);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Matrix, src: &Matrix, h: usize, dh: usize) {
    for i in 0..src.rows() {
        axpy(1.0, src.row(i), &mut dst.row_mut(i)[h * dh..(h + 1) * dh]);
    }
}

type AttendOut = (Matrix, Vec<Matrix>, Option<Vec<Matrix>>);

fn attend<R: Rng + ?Sized>(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    positions: &[i64],
    cfg: &AttentionConfig,
    mask: MaskSpec,
    mut rng: Option<&mut R>,
) -> Result<AttendOut> {
    let g = q.rows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(g, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut drops = rng.as_ref().map(|_| Vec::with_capacity(cfg.heads));
    for h in 0..cfg.heads {
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        let vh = head_slice(v, h, dh);
        let mut s = Matrix::zeros(g, g);
        gemm_nt(&qh, &kh, &mut s);
        for i in 0..g {
            let row = s.row_mut(i);
            let mut any = false;
            for (j, x) in row.iter_mut().enumerate() {
                if mask.visible(positions[i], positions[j]) {
                    *x *= scale;
                    any = true;
                } else {
                    *x = f64::NEG_INFINITY;
                }
            }
            if !any {
                return Err(Error::EmptyAttention { row: i });
            }
            softmax_in_place(row);
        }
        let mut oh = Matrix::zeros(g, dh);
        match rng.as_deref_mut() {
            Some(r) => {
                let dm = dropout_mask(g, g, cfg.dropout, r);
                let mut dropped = s.clone();
                for (a, m) in dropped.data_mut().iter_mut().zip(dm.data()) {
                    *a *= m;
                }
                gemm_nn(&dropped, &vh, &mut oh);
                drops.as_mut().expect("dropout enabled").push(dm);
            }
            None => gemm_nn(&s, &vh, &mut oh),
        }
        add_head_slice(&mut out, &oh, h, dh);
        probs.push(s);
    }
    Ok((out, probs, drops))
}

fn attend_backward(cache: &LayerCache, cfg: &AttentionConfig, d_attn: &Matrix) -> (Matrix, Matrix, Matrix) {
    let g = cache.q.rows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(g, cfg.d_model);
    let mut dk = Matrix::zeros(g, cfg.d_model);
    let mut dv = Matrix::zeros(g, cfg.d_model);
    for h in 0..cfg.heads {
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let d_oh = head_slice(d_attn, h, dh);
        let p = &cache.probs[h];
        let p_used = match &cache.attn_drop {
            Some(dm) => {
                let mut x = p.clone();
                for (a, m) in x.data_mut().iter_mut().zip(dm[h].data()) {
                    *a *= m;
                }
                x
            }
            None => p.clone(),
        };
        // oh = p_used · vh
        let mut d_vh = Matrix::zeros(g, dh);
        gemm_tn_acc(&p_used, &d_oh, &mut d_vh);
        let mut d_p = Matrix::zeros(g, g);
        gemm_nt(&d_oh, &vh, &mut d_p);
        if let Some(dm) = &cache.attn_drop {
            for (a, m) in d_p.data_mut().iter_mut().zip(dm[h].data()) {
                *a *= m;
            }
        }
        for i in 0..g {
            softmax_backward_in_place(p.row(i), d_p.row_mut(i));
        }
        // masked entries have p = 0, hence zero score gradient
        let d_s = d_p.scale(scale);
        let mut d_qh = Matrix::zeros(g, dh);
        gemm_nn(&d_s, &kh, &mut d_qh);
        let mut d_kh = Matrix::zeros(g, dh);
        gemm_tn_acc(&d_s, &qh, &mut d_kh);
        add_head_slice(&mut dq, &d_qh, h, dh);
        add_head_slice(&mut dk, &d_kh, h, dh);
        add_head_slice(&mut dv, &d_vh, h, dh);
    }
    (dq, dk, dv)
}

impl LayerCache {
    pub fn positions(&self) -> &[i64] {
        &self.positions
    }

    /// Attention probabilities of head `h` (rows: queries, cols: keys).
    pub fn attention_probs(&self, h: usize) -> &Matrix {
        &self.probs[h]
    }
}

/// Multi-head self-attention over one token group (attention sublayer with output projection).
pub fn multi_head_attention(
    group: &TokenGroup,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<Matrix> {
    weights.attention(group, cfg, mask)
}

/// One Transformer layer over a token group, inference mode. Positions pass through unchanged.
pub fn transformer_layer(
    group: &TokenGroup,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<TokenGroup> {
    let (states, _) = weights.forward::<rand::rngs::ThreadRng>(group, cfg, mask, None)?;
    Ok(TokenGroup { states, positions: group.positions.clone() })
}
