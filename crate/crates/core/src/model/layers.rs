//! Differentiable building blocks. Every forward returns a cache holding
//! exactly what its backward needs; backward accumulates parameter
//! gradients into a caller-provided gradient struct of the same shape.

use ndarray::{Array1, Array2, Axis, Zip};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub scale: Array1<f64>,
}

pub(crate) struct RmsCache {
    x: Array2<f64>,
    inv_rms: Array1<f64>,
}

impl RmsNorm {
    pub fn new(d: usize) -> Self {
        RmsNorm {
            scale: Array1::ones(d),
        }
    }

    pub(crate) fn zeros(d: usize) -> Self {
        RmsNorm {
            scale: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, RmsCache) {
        let d = x.ncols() as f64;
        let inv_rms: Array1<f64> = x
            .rows()
            .into_iter()
            .map(|row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt())
            .collect();
        let mut y = x.clone();
        Zip::from(y.rows_mut())
            .and(&inv_rms)
            .for_each(|mut row, &s| {
                row *= s;
                row *= &self.scale;
            });
        (
            y,
            RmsCache {
                x: x.clone(),
                inv_rms,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &RmsCache, dy: &Array2<f64>, grad: &mut RmsNorm) -> Array2<f64> {
        let d = cache.x.ncols() as f64;
        let mut dx = Array2::zeros(cache.x.raw_dim());
        for ((x, dy), (mut dx, &s)) in cache
            .x
            .rows()
            .into_iter()
            .zip(dy.rows())
            .zip(dx.rows_mut().into_iter().zip(cache.inv_rms.iter()))
        {
            let xhat = &x * s;
            grad.scale.scaled_add(1.0, &(&dy * &xhat));
            let u = &dy * &self.scale;
            let proj = u.dot(&xhat) / d;
            dx.assign(&((&u - &(&xhat * proj)) * s));
        }
        dx
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

pub(crate) struct AttnCache {
    queries_in: Array2<f64>,
    keys_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    o: Array2<f64>,
}

impl Attention {
    pub(crate) fn zeros(d: usize) -> Self {
        Attention {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
        }
    }

    /// `queries_in` is m×d, `keys_in` n×d. With `causal`, query i only sees
    /// keys 0..=i.
    pub(crate) fn forward(
        &self,
        queries_in: &Array2<f64>,
        keys_in: &Array2<f64>,
        causal: bool,
    ) -> (Array2<f64>, AttnCache) {
        let scale = 1.0 / (self.wq.ncols() as f64).sqrt();
        let q = queries_in.dot(&self.wq);
        let k = keys_in.dot(&self.wk);
        let v = keys_in.dot(&self.wv);
        let mut p = q.dot(&k.t()) * scale;
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let visible = if causal { i + 1 } else { row.len() };
            let max = row
                .iter()
                .take(visible)
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (j, s) in row.iter_mut().enumerate() {
                if j < visible {
                    *s = (*s - max).exp();
                    sum += *s;
                } else {
                    *s = 0.0;
                }
            }
            row /= sum;
        }
        let o = p.dot(&v);
        let out = o.dot(&self.wo);
        (
            out,
            AttnCache {
                queries_in: queries_in.clone(),
                keys_in: keys_in.clone(),
                q,
                k,
                v,
                p,
                o,
            },
        )
    }

    /// Returns gradients with respect to the query-side and key-side inputs.
    pub(crate) fn backward(
        &self,
        c: &AttnCache,
        dout: &Array2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (self.wq.ncols() as f64).sqrt();
        grad.wo += &c.o.t().dot(dout);
        let d_o = dout.dot(&self.wo.t());
        let dp = d_o.dot(&c.v.t());
        let dv = c.p.t().dot(&d_o);
        // softmax Jacobian, row-wise
        let row_dot = (&dp * &c.p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (&dp - &row_dot) * &c.p * scale;
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        grad.wq += &c.queries_in.t().dot(&dq);
        grad.wk += &c.keys_in.t().dot(&dk);
        grad.wv += &c.keys_in.t().dot(&dv);
        let d_queries = dq.dot(&self.wq.t());
        let d_keys = dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        (d_queries, d_keys)
    }
}

/// Position-wise GELU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub(crate) struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl FeedForward {
    pub(crate) fn zeros(d: usize, f: usize) -> Self {
        FeedForward {
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(gelu);
        let out = act.dot(&self.w2) + &self.b2;
        (
            out,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub(crate) fn backward(&self, c: &FfnCache, dout: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        grad.w2 += &c.act.t().dot(dout);
        grad.b2 += &dout.sum_axis(Axis(0));
        let mut dpre = dout.dot(&self.w2.t());
        Zip::from(&mut dpre).and(&c.pre).for_each(|g, &p| *g *= gelu_grad(p));
        grad.w1 += &c.x.t().dot(&dpre);
        grad.b1 += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.w1.t())
    }
}

/// Fixed sinusoidal position table, `len`×`d`.
pub(crate) fn positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
