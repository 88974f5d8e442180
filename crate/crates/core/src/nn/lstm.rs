//! Convolutional LSTM: every linear map of a standard LSTM (no peepholes)
//! replaced by a convolution. Gate pre-activations are laid out as four
//! channel blocks `[input | forget | output | candidate]`.

use crate::error::{Error, Result};
use crate::nn::{ConvKernel, Graph, Real, Tensor4, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<R> {
    pub h: Tensor4<R>,
    pub c: Tensor4<R>,
}

impl<R: Real> ConvLstmState<R> {
    pub fn new(h: Tensor4<R>, c: Tensor4<R>) -> Result<Self> {
        if h.shape() != c.shape() {
            return Err(Error::shape("ConvLstmState", h.shape(), c.shape()));
        }
        Ok(ConvLstmState { h, c })
    }
}

/// Gate convolutions: one kernel per input map plus the recurrent kernel
/// applied to the previous hidden state. Each produces `4 * features`
/// channels.
#[derive(Clone, Debug)]
pub struct ConvLstmGates<R> {
    pub inputs: Vec<ConvKernel<R>>,
    pub hidden: ConvKernel<R>,
}

/// Applies the LSTM nonlinearity to summed gate pre-activations.
pub fn lstm_cell<R: Real>(g: &mut Graph<R>, gates: Var, c_prev: Var) -> Result<(Var, Var)> {
    let f = g.shape(c_prev).c;
    if g.shape(gates).c != 4 * f {
        return Err(Error::shape(
            "lstm_cell",
            format!("{} gate channels", 4 * f),
            g.shape(gates),
        ));
    }
    let i = g.slice(gates, 0, f);
    let fg = g.slice(gates, f, f);
    let o = g.slice(gates, 2 * f, f);
    let cand = g.slice(gates, 3 * f, f);
    let i = g.sigmoid(i);
    let fg = g.sigmoid(fg);
    let o = g.sigmoid(o);
    let cand = g.tanh(cand);
    let keep = g.mul(fg, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// One step of a convolutional LSTM on plain tensors.
pub fn conv_lstm_step<R: Real>(
    state: &ConvLstmState<R>,
    input_maps: &[Tensor4<R>],
    gates: &ConvLstmGates<R>,
) -> Result<ConvLstmState<R>> {
    if input_maps.len() != gates.inputs.len() {
        return Err(Error::Contract(format!(
            "conv_lstm_step: {} input maps for {} input kernels",
            input_maps.len(),
            gates.inputs.len()
        )));
    }
    let mut g = Graph::no_grad();
    let conv = |g: &mut Graph<R>, x: &Tensor4<R>, k: &ConvKernel<R>| -> Result<Var> {
        let xv = g.constant(x.clone());
        let wv = g.constant(k.weight.clone());
        let bv = (!k.bias.is_empty()).then(|| {
            let shape = crate::nn::Shape4::new(1, k.bias.len(), 1, 1);
            g.constant(Tensor4::from_vec(shape, k.bias.clone()))
        });
        g.conv(xv, wv, bv, k.stride, k.pad)
    };
    let mut terms = vec![conv(&mut g, &state.h, &gates.hidden)?];
    let want = g.shape(terms[0]);
    for (x, k) in input_maps.iter().zip(&gates.inputs) {
        let t = conv(&mut g, x, k)?;
        if g.shape(t) != want {
            return Err(Error::shape(
                "conv_lstm_step (input alignment)",
                want,
                g.shape(t),
            ));
        }
        terms.push(t);
    }
    let pre = g.sum_of(&terms)?;
    let c_prev = g.constant(state.c.clone());
    let (h, c) = lstm_cell(&mut g, pre, c_prev)?;
    Ok(ConvLstmState {
        h: g.value(h).clone(),
        c: g.value(c).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{graph::sigmoid, Padding, Shape4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvKernel<f64> {
        let w = Tensor4::uniform(Shape4::new(out_c, in_c, k, k), -0.5, 0.5, rng);
        let b = (0..out_c).map(|i| (i as f64) * 0.01 - 0.05).collect();
        let pad = if stride == 1 {
            Padding::uniform(k / 2)
        } else {
            Padding::same(k, stride, 8, 8)
        };
        ConvKernel::new(w, b, stride, pad).unwrap()
    }

    #[test]
    fn all_zero_cell_stays_at_zero() {
        let s = Shape4::new(1, 2, 3, 3);
        let state = ConvLstmState::new(Tensor4::zeros(s), Tensor4::zeros(s)).unwrap();
        let zero =
            |ic| ConvKernel::same(Tensor4::zeros(Shape4::new(8, ic, 3, 3)), vec![0.0; 8]).unwrap();
        let gates = ConvLstmGates {
            inputs: vec![zero(1)],
            hidden: zero(2),
        };
        let next =
            conv_lstm_step(&state, &[Tensor4::zeros(Shape4::new(1, 1, 3, 3))], &gates).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape4::new(1, 2, 4, 4);
        let state =
            ConvLstmState::<f64>::new(Tensor4::randn(s, &mut rng), Tensor4::randn(s, &mut rng))
                .unwrap();
        let mut bias = vec![0.0; 8];
        bias[2..4].fill(20.0); // forget block
        bias[0..2].fill(-20.0); // input block closed
        let hidden = ConvKernel::same(Tensor4::zeros(Shape4::new(8, 2, 3, 3)), bias).unwrap();
        let input = ConvKernel::same(Tensor4::zeros(Shape4::new(8, 1, 3, 3)), vec![]).unwrap();
        let next = conv_lstm_step(
            &state,
            &[Tensor4::randn(Shape4::new(1, 1, 4, 4), &mut rng)],
            &ConvLstmGates {
                inputs: vec![input],
                hidden,
            },
        )
        .unwrap();
        for (a, b) in next.c.data().iter().zip(state.c.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = 3;
        let s = Shape4::new(2, f, 4, 4);
        let state =
            ConvLstmState::new(Tensor4::randn(s, &mut rng), Tensor4::randn(s, &mut rng)).unwrap();
        let x = Tensor4::randn(Shape4::new(2, 2, 8, 8), &mut rng);
        let gates = ConvLstmGates {
            inputs: vec![kernel(4 * f, 2, 3, 2, &mut rng)],
            hidden: kernel(4 * f, f, 3, 1, &mut rng),
        };
        let next = conv_lstm_step(&state, std::slice::from_ref(&x), &gates).unwrap();

        // elementwise reference: direct summation for every gate unit
        let pre =
            |k: &ConvKernel<f64>, inp: &Tensor4<f64>, n: usize, o: usize, y: usize, xx: usize| {
                let geom = k.geom();
                let is = inp.shape();
                let mut acc = k.bias[o];
                for c in 0..geom.in_c {
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            let iy = (y * geom.stride + ky) as isize - geom.pad.top as isize;
                            let ix = (xx * geom.stride + kx) as isize - geom.pad.left as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                                acc += inp.at(n, c, iy as usize, ix as usize)
                                    * k.weight.at(o, c, ky, kx);
                            }
                        }
                    }
                }
                acc
            };
        for n in 0..2 {
            for ch in 0..f {
                for y in 0..4 {
                    for xx in 0..4 {
                        let gate = |blk: usize| {
                            pre(&gates.hidden, &state.h, n, blk * f + ch, y, xx)
                                + pre(&gates.inputs[0], &x, n, blk * f + ch, y, xx)
                        };
                        let (i, fg, o, cand) = (
                            sigmoid(gate(0)),
                            sigmoid(gate(1)),
                            sigmoid(gate(2)),
                            gate(3).tanh(),
                        );
                        let c = fg * state.c.at(n, ch, y, xx) + i * cand;
                        let h = o * c.tanh();
                        assert!((next.c.at(n, ch, y, xx) - c).abs() < 1e-6);
                        assert!((next.h.at(n, ch, y, xx) - h).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn misaligned_input_is_rejected() {
        let s = Shape4::new(1, 1, 4, 4);
        let state = ConvLstmState::new(Tensor4::<f64>::zeros(s), Tensor4::zeros(s)).unwrap();
        let gates = ConvLstmGates {
            inputs: vec![
                ConvKernel::same(Tensor4::zeros(Shape4::new(4, 1, 3, 3)), vec![]).unwrap(),
            ],
            hidden: ConvKernel::same(Tensor4::zeros(Shape4::new(4, 1, 3, 3)), vec![]).unwrap(),
        };
        let err = conv_lstm_step(&state, &[Tensor4::zeros(Shape4::new(1, 1, 8, 8))], &gates);
        assert!(err.is_err());
    }
}
