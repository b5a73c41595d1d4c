//! Builds a small expression on the tape, backpropagates, and checks the
//! analytic gradients of a whole toy transformer against finite differences.
//!
//! `cargo run --release --example gradcheck`

use splm::autodiff::Tape;
use splm::gradcheck::{check, GradcheckOptions};
use splm::model::{Architecture, ModelConfig, ModelState, TokenBatch};
use splm::tensor::Tensor;

fn main() -> splm::Result<()> {
    // y = sum(gelu(x W + b))
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.3])?);
    let w = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.5, 0.25, 0.3, -1.2])?);
    let b = tape.leaf(Tensor::new(vec![2], vec![0.1, -0.1])?);
    let h = tape.matmul(x, w, false)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.gelu(h);
    let y = tape.sum(h);
    tape.backward(y)?;
    println!("y = {:.6}", tape.value(y).data()[0]);
    println!("dy/dW = {:?}", tape.grad_tensor(w).data());

    let mut cfg = ModelConfig::new(Architecture::DecoderOnly, 24);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 8;
    let model = ModelState::init(cfg, 0)?;
    let input = TokenBatch::padded(&[vec![5, 9, 12, 7], vec![6, 20]], 4);
    let targets = [Some(9), Some(12), Some(7), None, Some(20), None, None, None];
    let report = check(
        &model.params,
        |t, p| {
            let h = model.causal_hidden(t, p, &input, None)?;
            let z = model.project(t, p, h, None)?;
            t.softmax_cross_entropy(z, &targets)
        },
        GradcheckOptions::default(),
    )?;
    println!(
        "decoder-only toy model: {} coordinates, max relative error {:.2e}",
        report.coords_checked, report.max_relative_error
    );
    Ok(())
}
