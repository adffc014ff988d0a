//! Greedy decoding with optional fixed embedding noise, and exact
//! gradients of decoded-token logits with respect to the encoder input.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::layers::{gelu, positions};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS_ID, PAD_ID};

/// Decoding never runs past this many generated tokens by default.
pub const DEFAULT_MAX_DECODE_LEN: usize = 200;

/// An additive perturbation of the encoder input matrix, held fixed for a
/// whole decode.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample(pub Array2<f64>);

/// Everything a decode produced: the (possibly perturbed) input matrix,
/// the emitted ids, and the logit row behind each emitted id.
///
/// The input matrix and decoded ids fully determine every activation, so
/// [`input_gradients`] replays them teacher-forced instead of storing
/// per-layer caches.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input_ids: Vec<TokenId>,
    /// Encoder input embeddings, after noise.
    pub x: Array2<f64>,
    /// Emitted ids, ending with EOS unless the length cap was hit.
    pub decoded: Vec<TokenId>,
    /// One row per decoded position.
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.decoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoded.is_empty()
    }

    /// Pre-softmax score of the emitted token at each position.
    pub fn chosen_logits(&self) -> Vec<f64> {
        self.decoded
            .iter()
            .enumerate()
            .map(|(k, &id)| self.logits[[k, id]])
            .collect()
    }
}

fn rms_row(x: ArrayView1<f64>, scale: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let inv = 1.0 / (x.dot(&x) / d + 1e-6).sqrt();
    &x * inv * scale
}

fn attend(q: &Array1<f64>, keys: ArrayView2Ref, values: ArrayView2Ref) -> Array1<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut scores = keys.dot(q) * scale;
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    scores.mapv_inplace(|v| (v - max).exp());
    let total = scores.sum();
    scores /= total;
    scores.dot(&values)
}

type ArrayView2Ref<'a> = ndarray::ArrayView2<'a, f64>;

/// Step-wise decoder state with cached self-attention keys and values.
struct IncrementalDecoder<'a> {
    params: &'a ModelParams,
    cross_keys: Array2<f64>,
    cross_values: Array2<f64>,
    self_keys: Array2<f64>,
    self_values: Array2<f64>,
    positions: Array2<f64>,
    len: usize,
}

impl<'a> IncrementalDecoder<'a> {
    fn new(params: &'a ModelParams, enc_out: &Array2<f64>, max_len: usize) -> Self {
        let d = params.config.d_model;
        let ca = &params.decoder.cross_attn;
        IncrementalDecoder {
            params,
            cross_keys: enc_out.dot(&ca.wk),
            cross_values: enc_out.dot(&ca.wv),
            self_keys: Array2::zeros((max_len, d)),
            self_values: Array2::zeros((max_len, d)),
            positions: positions(max_len, d),
            len: 0,
        }
    }

    /// Feeds one decoder input token, returns the next-token logits.
    fn step(&mut self, token: TokenId) -> Array1<f64> {
        let p = self.params;
        let dec = &p.decoder;
        let t = self.len;
        let mut y0 = &p.embedding.row(token) * p.config.embed_scale;
        if p.config.use_positions {
            y0 += &self.positions.row(t);
        }
        let c = rms_row(y0.view(), &dec.self_norm.scale);
        let sa = &dec.self_attn;
        self.self_keys.row_mut(t).assign(&c.dot(&sa.wk));
        self.self_values.row_mut(t).assign(&c.dot(&sa.wv));
        self.len += 1;
        let o = attend(
            &c.dot(&sa.wq),
            self.self_keys.slice(s![..self.len, ..]),
            self.self_values.slice(s![..self.len, ..]),
        );
        let g1 = y0 + o.dot(&sa.wo);
        let e = rms_row(g1.view(), &dec.cross_norm.scale);
        let ca = &dec.cross_attn;
        let o2 = attend(&e.dot(&ca.wq), self.cross_keys.view(), self.cross_values.view());
        let g2 = g1 + o2.dot(&ca.wo);
        let f = rms_row(g2.view(), &dec.ffn_norm.scale);
        let ff = &dec.ffn;
        let act = (f.dot(&ff.w1) + &ff.b1).mapv(gelu);
        let g3 = g2 + act.dot(&ff.w2) + &ff.b2;
        let z = rms_row(g3.view(), &dec.final_norm.scale);
        p.project(&z.insert_axis(Axis(0))).row(0).to_owned()
    }
}

fn argmax(row: ArrayView1<f64>) -> TokenId {
    // first maximum wins, which keeps ties deterministic
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from input ids. `noise`, when given, is added to the
/// input embeddings once and kept for every decoding step.
pub fn greedy_decode(
    params: &ModelParams,
    input_ids: &[TokenId],
    noise: Option<&NoiseSample>,
    max_len: usize,
) -> Result<ForwardTrace> {
    if input_ids.is_empty() {
        return Err(Error::Data("cannot decode an empty input".into()));
    }
    let vocab_size = params.config.vocab_size;
    if let Some(&bad) = input_ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Vocab(format!("<id {bad}>")));
    }
    let mut x = params.embed(input_ids);
    if let Some(NoiseSample(n)) = noise {
        if n.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "noise is {:?} but input embeddings are {:?}",
                n.dim(),
                x.dim()
            )));
        }
        x += n;
    }
    let (enc_out, _) = params.encode(&x);
    let mut dec = IncrementalDecoder::new(params, &enc_out, max_len.max(1));
    let mut decoded = Vec::new();
    let mut logits = Array2::zeros((max_len, vocab_size));
    let mut prev = PAD_ID;
    while decoded.len() < max_len {
        let row = dec.step(prev);
        let next = argmax(row.view());
        logits.row_mut(decoded.len()).assign(&row);
        decoded.push(next);
        if next == EOS_ID {
            break;
        }
        prev = next;
    }
    let logits = logits.slice(s![..decoded.len(), ..]).to_owned();
    Ok(ForwardTrace {
        input_ids: input_ids.to_vec(),
        x,
        decoded,
        logits,
    })
}

/// Decoder input for teacher forcing: start token then all but the last
/// target token.
pub(crate) fn shift_right(target: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(PAD_ID)
        .chain(target.iter().take(target.len().saturating_sub(1)).copied())
        .collect()
}

/// Gradient of the summed logits of the decoded tokens at `positions`
/// with respect to the encoder input matrix X (n×d), with the decoded
/// sequence teacher-forced.
pub fn input_gradients(params: &ModelParams, trace: &ForwardTrace, positions: &[usize]) -> Result<Array2<f64>> {
    Ok(input_gradients_many(params, trace, &[positions])?.remove(0))
}

/// [`input_gradients`] for several position sets, sharing one forward pass.
pub fn input_gradients_many(params: &ModelParams, trace: &ForwardTrace, spans: &[&[usize]]) -> Result<Vec<Array2<f64>>> {
    let m = trace.decoded.len();
    for positions in spans {
        if positions.is_empty() {
            return Err(Error::EmptySpan);
        }
        if let Some(&bad) = positions.iter().find(|&&k| k >= m) {
            return Err(Error::Span { position: bad, len: m });
        }
    }
    let pass = params.forward(&trace.x, &shift_right(&trace.decoded));
    let mut scratch = params.zeros_like();
    Ok(spans
        .iter()
        .map(|positions| {
            let mut dlogits = Array2::zeros(pass.logits.raw_dim());
            for &k in positions.iter() {
                dlogits[[k, trace.decoded[k]]] += 1.0;
            }
            params.backward(&pass, &dlogits, &mut scratch)
        })
        .collect())
}

/// Sum of the decoded-token logits at `positions`, recomputed from a
/// teacher-forced pass over `x`. The scalar whose gradient
/// [`input_gradients`] returns.
pub fn span_logit_sum(params: &ModelParams, x: &Array2<f64>, decoded: &[TokenId], positions: &[usize]) -> f64 {
    let pass = params.forward(x, &shift_right(decoded));
    positions.iter().map(|&k| pass.logits[[k, decoded[k]]]).sum()
}
