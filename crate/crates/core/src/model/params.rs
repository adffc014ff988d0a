use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, RmsNorm};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Add fixed sinusoidal positions to encoder and decoder inputs.
    pub use_positions: bool,
    /// Reuse the embedding table as output projection (scaled by 1/sqrt(d)).
    pub tie_embeddings: bool,
    /// Standard deviation of the initial embedding entries.
    pub embed_init_std: f64,
    /// Embedding rows are multiplied by this before entering either stack.
    #[serde(default = "unit")]
    pub embed_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            d_ff: 64,
            use_positions: true,
            tie_embeddings: false,
            embed_init_std: 1.0,
            embed_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: RmsNorm,
    pub self_attn: Attention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
    pub final_norm: RmsNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: RmsNorm,
    pub self_attn: Attention,
    pub cross_norm: RmsNorm,
    pub cross_attn: Attention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
    pub final_norm: RmsNorm,
}

/// All trainable weights of the encoder-decoder. Also used as the
/// container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// |V|×d, shared by encoder and decoder inputs.
    pub embedding: Array2<f64>,
    pub encoder: EncoderLayer,
    pub decoder: DecoderLayer,
    /// d×|V|; unused when embeddings are tied.
    pub output: Array2<f64>,
    pub output_bias: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        ModelParams {
            config: config.clone(),
            embedding: Array2::zeros((v, d)),
            encoder: EncoderLayer {
                attn_norm: RmsNorm::zeros(d),
                self_attn: Attention::zeros(d),
                ffn_norm: RmsNorm::zeros(d),
                ffn: FeedForward::zeros(d, f),
                final_norm: RmsNorm::zeros(d),
            },
            decoder: DecoderLayer {
                self_norm: RmsNorm::zeros(d),
                self_attn: Attention::zeros(d),
                cross_norm: RmsNorm::zeros(d),
                cross_attn: Attention::zeros(d),
                ffn_norm: RmsNorm::zeros(d),
                ffn: FeedForward::zeros(d, f),
                final_norm: RmsNorm::zeros(d),
            },
            output: Array2::zeros((d, v)),
            output_bias: Array1::zeros(v),
        }
    }

    /// Seeded random initialization: unit norm scales, zero biases,
    /// N(0, 1/fan_in) matrices.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let embed = Normal::new(0.0, config.embed_init_std).expect("finite std");
        p.embedding.mapv_inplace(|_| embed.sample(&mut rng));
        let mut fill = |m: &mut Array2<f64>| {
            let dist = Normal::new(0.0, 1.0 / (m.nrows() as f64).sqrt()).expect("finite std");
            m.mapv_inplace(|_| dist.sample(&mut rng));
        };
        for attn in [
            &mut p.encoder.self_attn,
            &mut p.decoder.self_attn,
            &mut p.decoder.cross_attn,
        ] {
            fill(&mut attn.wq);
            fill(&mut attn.wk);
            fill(&mut attn.wv);
            fill(&mut attn.wo);
        }
        fill(&mut p.encoder.ffn.w1);
        fill(&mut p.encoder.ffn.w2);
        fill(&mut p.decoder.ffn.w1);
        fill(&mut p.decoder.ffn.w2);
        fill(&mut p.output);
        for norm in p.norms_mut() {
            norm.scale.fill(1.0);
        }
        p
    }

    fn norms_mut(&mut self) -> [&mut RmsNorm; 7] {
        [
            &mut self.encoder.attn_norm,
            &mut self.encoder.ffn_norm,
            &mut self.encoder.final_norm,
            &mut self.decoder.self_norm,
            &mut self.decoder.cross_norm,
            &mut self.decoder.ffn_norm,
            &mut self.decoder.final_norm,
        ]
    }

    /// A gradient buffer matching these parameters.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let e = &self.encoder;
        let d = &self.decoder;
        vec![
            ("embedding", flat(&self.embedding)),
            ("enc.attn_norm", flat(&e.attn_norm.scale)),
            ("enc.attn.wq", flat(&e.self_attn.wq)),
            ("enc.attn.wk", flat(&e.self_attn.wk)),
            ("enc.attn.wv", flat(&e.self_attn.wv)),
            ("enc.attn.wo", flat(&e.self_attn.wo)),
            ("enc.ffn_norm", flat(&e.ffn_norm.scale)),
            ("enc.ffn.w1", flat(&e.ffn.w1)),
            ("enc.ffn.b1", flat(&e.ffn.b1)),
            ("enc.ffn.w2", flat(&e.ffn.w2)),
            ("enc.ffn.b2", flat(&e.ffn.b2)),
            ("enc.final_norm", flat(&e.final_norm.scale)),
            ("dec.self_norm", flat(&d.self_norm.scale)),
            ("dec.self_attn.wq", flat(&d.self_attn.wq)),
            ("dec.self_attn.wk", flat(&d.self_attn.wk)),
            ("dec.self_attn.wv", flat(&d.self_attn.wv)),
            ("dec.self_attn.wo", flat(&d.self_attn.wo)),
            ("dec.cross_norm", flat(&d.cross_norm.scale)),
            ("dec.cross_attn.wq", flat(&d.cross_attn.wq)),
            ("dec.cross_attn.wk", flat(&d.cross_attn.wk)),
            ("dec.cross_attn.wv", flat(&d.cross_attn.wv)),
            ("dec.cross_attn.wo", flat(&d.cross_attn.wo)),
            ("dec.ffn_norm", flat(&d.ffn_norm.scale)),
            ("dec.ffn.w1", flat(&d.ffn.w1)),
            ("dec.ffn.b1", flat(&d.ffn.b1)),
            ("dec.ffn.w2", flat(&d.ffn.w2)),
            ("dec.ffn.b2", flat(&d.ffn.b2)),
            ("dec.final_norm", flat(&d.final_norm.scale)),
            ("output", flat(&self.output)),
            ("output_bias", flat(&self.output_bias)),
        ]
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(30);
        out.push(self.embedding.as_slice_mut().expect("standard layout"));
        out.push(e.attn_norm.scale.as_slice_mut().expect("standard layout"));
        for m in [
            &mut e.self_attn.wq,
            &mut e.self_attn.wk,
            &mut e.self_attn.wv,
            &mut e.self_attn.wo,
        ] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        out.push(e.ffn_norm.scale.as_slice_mut().expect("standard layout"));
        out.push(e.ffn.w1.as_slice_mut().expect("standard layout"));
        out.push(e.ffn.b1.as_slice_mut().expect("standard layout"));
        out.push(e.ffn.w2.as_slice_mut().expect("standard layout"));
        out.push(e.ffn.b2.as_slice_mut().expect("standard layout"));
        out.push(e.final_norm.scale.as_slice_mut().expect("standard layout"));
        out.push(d.self_norm.scale.as_slice_mut().expect("standard layout"));
        for m in [
            &mut d.self_attn.wq,
            &mut d.self_attn.wk,
            &mut d.self_attn.wv,
            &mut d.self_attn.wo,
        ] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        out.push(d.cross_norm.scale.as_slice_mut().expect("standard layout"));
        for m in [
            &mut d.cross_attn.wq,
            &mut d.cross_attn.wk,
            &mut d.cross_attn.wv,
            &mut d.cross_attn.wo,
        ] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        out.push(d.ffn_norm.scale.as_slice_mut().expect("standard layout"));
        out.push(d.ffn.w1.as_slice_mut().expect("standard layout"));
        out.push(d.ffn.b1.as_slice_mut().expect("standard layout"));
        out.push(d.ffn.w2.as_slice_mut().expect("standard layout"));
        out.push(d.ffn.b2.as_slice_mut().expect("standard layout"));
        out.push(d.final_norm.scale.as_slice_mut().expect("standard layout"));
        out.push(self.output.as_slice_mut().expect("standard layout"));
        out.push(self.output_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

// owned arrays built by this module are always in standard layout
fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
