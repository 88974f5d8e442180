//! Runs a convolutional LSTM over a short sequence of random maps and checks
//! the taped gradient of a small conv + LSTM graph against finite differences.
//!
//! cargo run --release --example conv_lstm

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convdraw::nn::{
    conv_lstm_step, grad_check, lstm_cell, ConvGeom, ConvKernel, ConvLstmGates, ConvLstmState,
    Graph, Padding, ParamStore, Shape4, Tensor4,
};

fn main() -> convdraw::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (features, inputs, size) = (4, 2, 8);
    let geom = |in_c| ConvGeom {
        out_c: 4 * features,
        in_c,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: Padding::uniform(1),
    };
    let gates = ConvLstmGates {
        inputs: vec![ConvKernel::<f64>::init(geom(inputs), &mut rng)],
        hidden: ConvKernel::init(geom(features), &mut rng),
    };
    let zeros = Tensor4::zeros(Shape4::new(1, features, size, size));
    let mut state = ConvLstmState::new(zeros.clone(), zeros)?;
    for t in 0..5 {
        let x = Tensor4::randn(Shape4::new(1, inputs, size, size), &mut rng);
        state = conv_lstm_step(&state, &[x], &gates)?;
        println!(
            "t={t} |h|max {:.4} |c|max {:.4}",
            state.h.max_abs(),
            state.c.max_abs()
        );
    }

    // the same cell on the tape, differentiated with respect to its weights
    let mut store = ParamStore::<f64>::new();
    let s = |c| Shape4::new(1, c, size, size);
    store.add(
        "x",
        &[1, inputs, size, size],
        Tensor4::randn(s(inputs), &mut rng),
    )?;
    store.add(
        "c",
        &[1, features, size, size],
        Tensor4::randn(s(features), &mut rng),
    )?;
    store.add(
        "w",
        &[4 * features, inputs, 3, 3],
        gates.inputs[0].weight.clone(),
    )?;
    let report = grad_check(&store, 1e-5, |p| {
        let mut g = Graph::new();
        let v: Vec<_> = p.ids().map(|id| g.param(p, id)).collect();
        let pre = g.conv(v[0], v[2], None, 1, Padding::uniform(1))?;
        let (h, c) = lstm_cell(&mut g, pre, v[1])?;
        let hc = g.mul(h, c)?;
        let loss = g.sum(hc);
        let grads = g.backward(loss, p.len(), p)?;
        Ok((g.value(loss).data()[0], grads.params))
    })?;
    println!(
        "gradient check: {} probes, max relative error {:.2e}",
        report.probes, report.max_rel_error
    );
    Ok(())
}
