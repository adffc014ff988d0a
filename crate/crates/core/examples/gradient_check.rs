//! Compare input gradients against central finite differences on a
//! randomly initialized model.

use rationale_assoc::format::{source_for, task_vocab, Mode, TaskFormat};
use rationale_assoc::model::{greedy_decode, input_gradients, span_logit_sum, ModelConfig, ModelParams};
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};

fn main() -> rationale_assoc::Result<()> {
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 1, n: 20 })?;
    let vocab = task_vocab(&data);
    let params = ModelParams::init(&ModelConfig::new(vocab.len()), 7);
    let h = 1e-5;

    for (k, inst) in data.iter().take(5).enumerate() {
        let ids = vocab.encode(&source_for(inst, Mode::InputToLabelRationale, TaskFormat::Qa, None)?)?;
        let trace = greedy_decode(&params, &ids, None, 12)?;
        let span: Vec<usize> = (0..trace.len()).collect();
        let grad = input_gradients(&params, &trace, &span)?;

        let mut x = trace.x.clone();
        let mut worst = 0.0f64;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = x[[i, j]];
                x[[i, j]] = orig + h;
                let up = span_logit_sum(&params, &x, &trace.decoded, &span);
                x[[i, j]] = orig - h;
                let down = span_logit_sum(&params, &x, &trace.decoded, &span);
                x[[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = grad[[i, j]];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
        println!("instance {k}: {}x{} inputs, {} decoded, max rel err {worst:.2e}", x.nrows(), x.ncols(), trace.len());
    }
    Ok(())
}
