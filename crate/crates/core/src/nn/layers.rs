use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{ParamId, Params};
use crate::Scalar;

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, inp: usize, out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = p.normal(format!("{name}.w"), inp, out, std, rng);
        let b = p.zeros(format!("{name}.b"), 1, out);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(p.get(self.w));
        y += &p.get(self.b).row(0);
        y
    }

    /// Accumulates weight and bias gradients and returns `dL/dx`.
    pub fn backward<T: Scalar>(&self, p: &Params<T>, g: &mut Params<T>, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.backward_params(g, x, dy);
        dy.dot(&p.get(self.w).t())
    }

    pub fn backward_params<T: Scalar>(&self, g: &mut Params<T>, x: ArrayView2<T>, dy: ArrayView2<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), g.get_mut(self.w));
        let db = dy.sum_axis(Axis(0));
        let mut gb = g.get_mut(self.b).row_mut(0);
        gb += &db;
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with affine `gamma`, `beta` (`1 x d`).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl LayerNorm {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize) -> Self {
        Self { gamma: p.ones(format!("{name}.gamma"), 1, d), beta: p.zeros(format!("{name}.beta"), 1, d) }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: ArrayView2<T>) -> (Array2<T>, LnCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
            *is = T::one() / (var + eps).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &xhat * &p.get(self.gamma).row(0);
        y += &p.get(self.beta).row(0);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, p: &Params<T>, g: &mut Params<T>, cache: &LnCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        {
            let dg = (&dy * &cache.xhat).sum_axis(Axis(0));
            let mut gg = g.get_mut(self.gamma).row_mut(0);
            gg += &dg;
        }
        {
            let db = dy.sum_axis(Axis(0));
            let mut gb = g.get_mut(self.beta).row_mut(0);
            gb += &db;
        }
        let dxhat = &dy * &p.get(self.gamma).row(0);
        let n = T::of(dy.ncols() as f64);
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum = dh.sum();
            let dot = dh.iter().zip(xh).fold(T::zero(), |a, (&u, &v)| a + u * v);
            let k = cache.inv_std[i] / n;
            Zip::from(dx.row_mut(i)).and(dh).and(xh).for_each(|o, &u, &v| *o = k * (n * u - sum - v * dot));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

/// Row span `[start, start + len)` of one sequence inside a stacked batch.
pub type Span = (usize, usize);

/// Multi-head self-attention restricted to each span.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    /// Softmax weights per span, heads stacked along rows.
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl Attention {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        assert_eq!(d % heads, 0, "width must be divisible by the head count");
        Self {
            qkv: Linear::new(p, &format!("{name}.qkv"), d, 3 * d, std, rng),
            out: Linear::new(p, &format!("{name}.out"), d, d, std, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: ArrayView2<T>, spans: &[Span]) -> (Array2<T>, AttnCache<T>) {
        let d = x.ncols();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut ctx = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(spans.len());
        for &(start, len) in spans {
            let rows = start..start + len;
            let mut pr = Array2::zeros((self.heads * len, len));
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                for mut row in sc.rows_mut() {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                    let mut z = T::zero();
                    row.mapv_inplace(|v| {
                        let e = (v * scale - m).exp();
                        z = z + e;
                        e
                    });
                    row.mapv_inplace(|v| v / z);
                }
                let o = sc.dot(&v);
                ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&o);
                pr.slice_mut(s![h * len..(h + 1) * len, ..]).assign(&sc);
            }
            probs.push(pr);
        }
        let y = self.out.forward(p, ctx.view());
        (y, AttnCache { x: x.to_owned(), qkv, probs, ctx })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &AttnCache<T>,
        spans: &[Span],
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        let d = dy.ncols();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dctx = self.out.backward(p, g, cache.ctx.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for (&(start, len), pr) in spans.iter().zip(&cache.probs) {
            let rows = start..start + len;
            for h in 0..self.heads {
                let pm = pr.slice(s![h * len..(h + 1) * len, ..]);
                let q = cache.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache.qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = dctx.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dv = pm.t().dot(&dout);
                let dp = dout.dot(&v.t());
                let mut ds = Array2::zeros((len, len));
                for i in 0..len {
                    let dot = pm.row(i).iter().zip(dp.row(i)).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    Zip::from(ds.row_mut(i))
                        .and(pm.row(i))
                        .and(dp.row(i))
                        .for_each(|o, &pv, &dpv| *o = pv * (dpv - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
        }
        self.qkv.backward(p, g, cache.x.view(), dqkv.view())
    }
}

/// Pre-norm encoder layer: `x + drop(attn(ln1 x))`, then `+ drop(ffn(ln2 x))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    drop1: Option<Array2<T>>,
    ln2: LnCache<T>,
    b: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    drop2: Option<Array2<T>>,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), d),
            attn: Attention::new(p, &format!("{name}.attn"), d, heads, std, rng),
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), d),
            ffn_in: Linear::new(p, &format!("{name}.ffn.in"), d, 4 * d, std, rng),
            ffn_out: Linear::new(p, &format!("{name}.ffn.out"), 4 * d, d, std, rng),
        }
    }

    /// `dropout` carries the rate and RNG in training mode.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        p: &Params<T>,
        x: Array2<T>,
        spans: &[Span],
        mut dropout: Option<(f64, &mut R)>,
    ) -> (Array2<T>, LayerCache<T>) {
        let (a, ln1) = self.ln1.forward(p, x.view());
        let (mut att, attn) = self.attn.forward(p, a.view(), spans);
        let drop1 = dropout.as_mut().map(|(rate, rng)| dropout_mask::<T>(att.dim(), *rate, *rng));
        if let Some(m) = &drop1 {
            att *= m;
        }
        let x1 = x + &att;
        let (b, ln2) = self.ln2.forward(p, x1.view());
        let pre = self.ffn_in.forward(p, b.view());
        let act = pre.mapv(gelu);
        let mut f = self.ffn_out.forward(p, act.view());
        let drop2 = dropout.as_mut().map(|(rate, rng)| dropout_mask::<T>(f.dim(), *rate, *rng));
        if let Some(m) = &drop2 {
            f *= m;
        }
        let x2 = x1 + &f;
        (x2, LayerCache { ln1, attn, drop1, ln2, b, pre, act, drop2 })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &LayerCache<T>,
        spans: &[Span],
        dy: Array2<T>,
    ) -> Array2<T> {
        let mut df = dy.clone();
        if let Some(m) = &cache.drop2 {
            df *= m;
        }
        let dact = self.ffn_out.backward(p, g, cache.act.view(), df.view());
        let dpre = Zip::from(&dact).and(&cache.pre).map_collect(|&u, &x| u * gelu_grad(x));
        let db = self.ffn_in.backward(p, g, cache.b.view(), dpre.view());
        let dx1 = dy + &self.ln2.backward(p, g, &cache.ln2, db.view());
        let mut datt = dx1.clone();
        if let Some(m) = &cache.drop1 {
            datt *= m;
        }
        let da = self.attn.backward(p, g, &cache.attn, spans, datt.view());
        dx1 + &self.ln1.backward(p, g, &cache.ln1, da.view())
    }
}
