//! Linear probe: softmax regression on raw node features, used to calibrate
//! how informative synthetic features are on their own.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adcore::{AdError, Order, Tape, Tensor};
use crate::graph::Graph;
use crate::metalearner::{cross_entropy, logits};

/// Trains on half of each class's nodes (chosen by `seed`) with full-batch
/// gradient descent on the mean cross-entropy and returns accuracy on the
/// other half.
pub fn linear_probe(g: &Graph, steps: usize, lr: f64, seed: u64) -> Result<f64, AdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = {
        let mut c = g.labels().to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for &c in &classes {
        let mut nodes = g.nodes_of_class(c);
        nodes.shuffle(&mut rng);
        let half = nodes.len().div_ceil(2);
        train.extend_from_slice(&nodes[..half]);
        test.extend_from_slice(&nodes[half..]);
    }
    let target = |nodes: &[usize]| -> Vec<usize> {
        nodes.iter().map(|&v| classes.binary_search(&g.labels()[v]).expect("label listed")).collect()
    };
    let (y_train, y_test) = (target(&train), target(&test));
    let x_train = g.features().gather_rows(&train)?;
    let x_test = g.features().gather_rows(&test)?;

    let d = g.feature_dim();
    let mut w = Tensor::zeros(&[classes.len(), d]);
    let mut b = Tensor::zeros(&[1, classes.len()]);
    let step = lr / train.len().max(1) as f64;
    for _ in 0..steps {
        let tape = Tape::new(Order::First);
        let (wv, bv) = (tape.param(w.clone()), tape.param(b.clone()));
        let loss = cross_entropy(tape.constant(x_train.clone()), wv, bv, &y_train)?;
        let grads = tape.gradients(loss, &[wv, bv])?;
        w = w.sub(&grads[0].scale(step))?;
        b = b.sub(&grads[1].scale(step))?;
    }
    let tape = Tape::new(Order::First);
    let scores = logits(tape.constant(x_test), tape.constant(w), tape.constant(b))?.value();
    let hits = scores.argmax_rows().iter().zip(&y_test).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / y_test.len().max(1) as f64)
}
