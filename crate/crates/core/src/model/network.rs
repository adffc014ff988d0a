//! Full-sequence forward and backward passes of the encoder-decoder.

use ndarray::{s, Array2, Axis};

use super::layers::{positions, AttnCache, FfnCache, RmsCache};
use super::params::ModelParams;
use crate::vocab::TokenId;

pub(crate) struct EncoderCache {
    attn_norm: RmsCache,
    attn: AttnCache,
    ffn_norm: RmsCache,
    ffn: FfnCache,
    final_norm: RmsCache,
}

pub(crate) struct DecoderCache {
    input_ids: Vec<TokenId>,
    self_norm: RmsCache,
    self_attn: AttnCache,
    cross_norm: RmsCache,
    cross_attn: AttnCache,
    ffn_norm: RmsCache,
    ffn: FfnCache,
    final_norm: RmsCache,
    hidden: Array2<f64>,
}

/// Activations of one teacher-forced pass.
pub(crate) struct ForwardPass {
    pub logits: Array2<f64>,
    enc: EncoderCache,
    dec: DecoderCache,
}

impl ModelParams {
    /// Looks up embedding rows: the n×d input matrix X.
    pub fn embed(&self, ids: &[TokenId]) -> Array2<f64> {
        self.embedding.select(Axis(0), ids) * self.config.embed_scale
    }

    /// Adds the gradient with respect to embedded rows `dx` of `ids` to
    /// the embedding table gradient.
    pub(crate) fn accumulate_embedding_grad(&self, grad: &mut ModelParams, ids: &[TokenId], dx: &Array2<f64>) {
        for (row, &id) in dx.rows().into_iter().zip(ids) {
            grad.embedding
                .slice_mut(s![id, ..])
                .scaled_add(self.config.embed_scale, &row);
        }
    }

    fn add_positions(&self, mut x: Array2<f64>) -> Array2<f64> {
        if self.config.use_positions {
            x += &positions(x.nrows(), x.ncols());
        }
        x
    }

    pub(crate) fn encode(&self, x: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
        let e = &self.encoder;
        let h0 = self.add_positions(x.clone());
        let (a, attn_norm) = e.attn_norm.forward(&h0);
        let (att, attn) = e.self_attn.forward(&a, &a, false);
        let h1 = h0 + att;
        let (b, ffn_norm) = e.ffn_norm.forward(&h1);
        let (f, ffn) = e.ffn.forward(&b);
        let h2 = h1 + f;
        let (out, final_norm) = e.final_norm.forward(&h2);
        (
            out,
            EncoderCache {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
                final_norm,
            },
        )
    }

    /// Output logits from the final decoder hidden states.
    pub(crate) fn project(&self, hidden: &Array2<f64>) -> Array2<f64> {
        if self.config.tie_embeddings {
            let scale = 1.0 / (self.config.d_model as f64).sqrt();
            hidden.dot(&self.embedding.t()) * scale + &self.output_bias
        } else {
            hidden.dot(&self.output) + &self.output_bias
        }
    }

    pub(crate) fn decode_all(&self, enc_out: &Array2<f64>, input_ids: &[TokenId]) -> (Array2<f64>, DecoderCache) {
        let d = &self.decoder;
        let y0 = self.add_positions(self.embed(input_ids));
        let (c, self_norm) = d.self_norm.forward(&y0);
        let (sa, self_attn) = d.self_attn.forward(&c, &c, true);
        let g1 = y0 + sa;
        let (e, cross_norm) = d.cross_norm.forward(&g1);
        let (ca, cross_attn) = d.cross_attn.forward(&e, enc_out, false);
        let g2 = g1 + ca;
        let (f, ffn_norm) = d.ffn_norm.forward(&g2);
        let (ff, ffn) = d.ffn.forward(&f);
        let g3 = g2 + ff;
        let (hidden, final_norm) = d.final_norm.forward(&g3);
        let logits = self.project(&hidden);
        (
            logits,
            DecoderCache {
                input_ids: input_ids.to_vec(),
                self_norm,
                self_attn,
                cross_norm,
                cross_attn,
                ffn_norm,
                ffn,
                final_norm,
                hidden,
            },
        )
    }

    /// Teacher-forced pass: encoder on `x`, decoder on `decoder_input`.
    pub(crate) fn forward(&self, x: &Array2<f64>, decoder_input: &[TokenId]) -> ForwardPass {
        let (enc_out, enc) = self.encode(x);
        let (logits, dec) = self.decode_all(&enc_out, decoder_input);
        ForwardPass { logits, enc, dec }
    }

    /// Backpropagates `dlogits` (same shape as the logits) through the whole
    /// network. Parameter gradients are accumulated into `grad`; the return
    /// value is the gradient with respect to the encoder input matrix X.
    pub(crate) fn backward(&self, pass: &ForwardPass, dlogits: &Array2<f64>, grad: &mut ModelParams) -> Array2<f64> {
        let dc = &pass.dec;
        let d = &self.decoder;
        let gd = &mut grad.decoder;

        let dhidden = if self.config.tie_embeddings {
            let scale = 1.0 / (self.config.d_model as f64).sqrt();
            grad.embedding.scaled_add(scale, &dlogits.t().dot(&dc.hidden));
            dlogits.dot(&self.embedding) * scale
        } else {
            grad.output += &dc.hidden.t().dot(dlogits);
            dlogits.dot(&self.output.t())
        };
        grad.output_bias += &dlogits.sum_axis(Axis(0));

        let dg3 = d.final_norm.backward(&dc.final_norm, &dhidden, &mut gd.final_norm);
        let dff = d.ffn.backward(&dc.ffn, &dg3, &mut gd.ffn);
        let dg2 = d.ffn_norm.backward(&dc.ffn_norm, &dff, &mut gd.ffn_norm) + &dg3;
        let (dq, denc) = d.cross_attn.backward(&dc.cross_attn, &dg2, &mut gd.cross_attn);
        let dg1 = d.cross_norm.backward(&dc.cross_norm, &dq, &mut gd.cross_norm) + &dg2;
        let (dq, dk) = d.self_attn.backward(&dc.self_attn, &dg1, &mut gd.self_attn);
        let dy0 = d.self_norm.backward(&dc.self_norm, &(dq + dk), &mut gd.self_norm) + &dg1;
        self.accumulate_embedding_grad(grad, &dc.input_ids, &dy0);

        let ec = &pass.enc;
        let e = &self.encoder;
        let ge = &mut grad.encoder;
        let dh2 = e.final_norm.backward(&ec.final_norm, &denc, &mut ge.final_norm);
        let dff = e.ffn.backward(&ec.ffn, &dh2, &mut ge.ffn);
        let dh1 = e.ffn_norm.backward(&ec.ffn_norm, &dff, &mut ge.ffn_norm) + &dh2;
        let (dq, dk) = e.self_attn.backward(&ec.attn, &dh1, &mut ge.self_attn);
        e.attn_norm.backward(&ec.attn_norm, &(dq + dk), &mut ge.attn_norm) + &dh1
    }
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row -= lse;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;

    fn small(tied: bool) -> ModelParams {
        let mut cfg = ModelConfig::new(11);
        cfg.d_model = 6;
        cfg.d_ff = 8;
        cfg.tie_embeddings = tied;
        ModelParams::init(&cfg, 5)
    }

    // loss = sum(logits ∘ W) for a fixed W; checks every parameter tensor
    // against central differences.
    fn check_param_grads(p: &ModelParams) {
        let src = [3usize, 4, 5, 6];
        let dec_in = [0usize, 7, 8];
        let w = Array2::from_shape_fn((3, 11), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let x = p.embed(&src);
        let pass = p.forward(&x, &dec_in);
        let mut grad = p.zeros_like();
        let dx = p.backward(&pass, &w, &mut grad);
        p.accumulate_embedding_grad(&mut grad, &src, &dx);
        let loss = |q: &ModelParams| (q.forward(&q.embed(&src), &dec_in).logits * &w).sum();
        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let h = 1e-6;
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for k in (0..len).step_by(1 + len / 7) {
                let mut qp = p.clone();
                qp.tensors_mut()[ti][k] += h;
                let mut qm = p.clone();
                qm.tensors_mut()[ti][k] -= h;
                let num = (loss(&qp) - loss(&qm)) / (2.0 * h);
                let ana = analytic[ti][k];
                assert!(
                    (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                    "{name}[{k}]: numeric {num} analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_untied() {
        check_param_grads(&small(false));
    }

    #[test]
    fn parameter_gradients_tied() {
        check_param_grads(&small(true));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let l = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        for row in log_softmax(&l).rows() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
