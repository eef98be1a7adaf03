//! Central finite-difference gradient checking.

use rand::Rng;

use super::graph::{Graph, Mode};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::rng::rng_from_seed;

/// Worst relative gradient error over all inputs.
///
/// `build` records a function of the input variables on a fresh tape. A
/// non-scalar output is reduced to a scalar by a fixed random projection so
/// every output element contributes. The relative error of each input is
/// `|g_tape - g_fd|_2 / max(|g_tape|_2, |g_fd|_2, 1e-6)`. The absolute floor
/// keeps gradients that vanish identically (a key bias under softmax
/// attention) from turning round-off into a large relative error.
pub fn gradient_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Var, Vec<Var>), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let mut rng = rng_from_seed(0x9e37);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv = tape.constant(Tensor::new(tape.shape(out).to_vec(), w)?);
        let prod = tape.mul(out, wv)?;
        let flat = tape.reshape(prod, vec![n])?;
        let loss = tape.sum_last(flat);
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let (tp, lp, _) = eval(&plus)?;
            let (tm, lm, _) = eval(&minus)?;
            *slot = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * step);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-6));
    }
    Ok(worst)
}

/// Uniform random tensor with entries in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

/// Worst relative gradient error of a graph's parameters and input, using
/// train-mode semantics (batch statistics).
pub fn graph_gradient_check(graph: &Graph, input: &Tensor, step: f64) -> Result<f64, AutodiffError> {
    let out_shape = {
        let mut g = graph.clone();
        g.set_mode(Mode::Train);
        g.forward(input)?.shape().to_vec()
    };
    let weights = random_tensor(&out_shape, 1.0, 0x51ed);
    let loss = |g: &Graph, x: &Tensor| -> Result<f64, AutodiffError> {
        let mut g = g.clone();
        g.set_mode(Mode::Train);
        let y = g.forward(x)?;
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut g = graph.clone();
    g.set_mode(Mode::Train);
    g.forward(input)?;
    let grads = g.backward(&weights)?;

    let rel = |a: &Tensor, n: &[f64]| {
        let diff: f64 = a.data().iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-6)
    };
    let mut worst: f64 = 0.0;
    let n_params = graph.params().len();
    for p in 0..n_params {
        let len = graph.params()[p].len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut gp = graph.clone();
            gp.params_mut()[p].data_mut()[j] += step;
            let mut gm = graph.clone();
            gm.params_mut()[p].data_mut()[j] -= step;
            *slot = (loss(&gp, input)? - loss(&gm, input)?) / (2.0 * step);
        }
        worst = worst.max(rel(&grads.params[p], &numeric));
    }
    let mut numeric = vec![0.0; input.len()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let mut xp = input.clone();
        xp.data_mut()[j] += step;
        let mut xm = input.clone();
        xm.data_mut()[j] -= step;
        *slot = (loss(graph, &xp)? - loss(graph, &xm)?) / (2.0 * step);
    }
    Ok(worst.max(rel(&grads.input, &numeric)))
}
