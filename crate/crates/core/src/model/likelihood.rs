//! Loss terms on plain tensors, sharing the tape's kernels so the numbers
//! agree with training bit for bit.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::draw::{GaussianParams, TimestepTrace, LOGVAR_LIMIT};
use crate::nn::{Graph, Real, Shape4, Tensor4};

/// Per-unit `KL(q || p)` in nats.
pub fn gaussian_kl<R: Real>(q: &GaussianParams<R>, p: &GaussianParams<R>) -> Result<Tensor4<R>> {
    let mut g = Graph::no_grad();
    let v = [&q.mu, &q.log_var, &p.mu, &p.log_var].map(|t| g.constant(t.clone()));
    let k = g.gaussian_kl(v[0], v[1], v[2], v[3])?;
    Ok(g.value(k).clone())
}

fn split_canvas<R: Real>(r_t: &Tensor4<R>, c: usize) -> Result<(Tensor4<R>, Tensor4<R>)> {
    if r_t.shape().c != 2 * c {
        return Err(Error::shape(
            "input_nll_gaussian",
            format!("{} canvas channels", 2 * c),
            r_t.shape(),
        ));
    }
    let lv = r_t
        .channels(c, c)
        .map(|v| v.max(R::of(-LOGVAR_LIMIT)).min(R::of(LOGVAR_LIMIT)));
    Ok((r_t.channels(0, c), lv))
}

/// Dequantized-Gaussian input cost per image: `sum(log(1/s) - log N(x))`.
/// `x` must already carry the dequantization noise.
pub fn input_nll_gaussian<R: Real>(
    x: &ImageBatch<R>,
    r_t: &Tensor4<R>,
    s: f64,
) -> Result<Vec<f64>> {
    let xs = x.x.shape();
    let (mean, lv) = split_canvas(r_t, xs.c)?;
    let mut g = Graph::no_grad();
    let (xv, mv, lvv) = (g.constant(x.x.clone()), g.constant(mean), g.constant(lv));
    let nll = g.gaussian_nll(xv, mv, lvv)?;
    let d = xs.item() as f64;
    Ok(g.value(nll)
        .sum_per_item()
        .into_iter()
        .map(|v| v - s.ln() * d)
        .collect())
}

/// Bin-integrated Gaussian input cost per image: `-sum log P(bin of x)`.
pub fn input_nll_binned_gaussian<R: Real>(
    x: &ImageBatch<R>,
    r_t: &Tensor4<R>,
    s: f64,
) -> Result<Vec<f64>> {
    let (mean, lv) = split_canvas(r_t, x.x.shape().c)?;
    let mut g = Graph::no_grad();
    let (xv, mv, lvv) = (g.constant(x.x.clone()), g.constant(mean), g.constant(lv));
    let nll = g.binned_gaussian_nll(xv, mv, lvv, s)?;
    Ok(g.value(nll).sum_per_item())
}

/// Bernoulli input cost per image with `r_t` as logits.
pub fn input_nll_bernoulli<R: Real>(x: &ImageBatch<R>, r_t: &Tensor4<R>) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let (xv, lv) = (g.constant(x.x.clone()), g.constant(r_t.clone()));
    let nll = g.bernoulli_nll(xv, lv)?;
    Ok(g.value(nll).sum_per_item())
}

/// `beta * lx + sum_t sum_units KL` per image.
pub fn elbo_loss<R: Real>(traces: &[TimestepTrace<R>], lx: &[f64], beta: f64) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = lx.iter().map(|v| beta * v).collect();
    for tr in traces {
        for layer in &tr.layers {
            let kl = layer
                .kl
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("step {} has no posterior", tr.t)))?;
            let per = kl.sum_per_item();
            if per.len() != out.len() {
                return Err(Error::shape(
                    "elbo_loss",
                    Shape4::new(out.len(), 1, 1, 1),
                    kl.shape(),
                ));
            }
            for (o, k) in out.iter_mut().zip(per) {
                *o += k;
            }
        }
    }
    Ok(out)
}

/// Converts nats per image to bits per input dimension.
pub fn bits_per_dim(nats: f64, dims: usize) -> f64 {
    nats / (dims as f64 * std::f64::consts::LN_2)
}
