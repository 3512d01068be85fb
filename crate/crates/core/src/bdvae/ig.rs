use super::{BdvaeModel, ModelError, INPUT_LEAF};
use crate::ndmath::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IgTarget {
    Logit,
    /// Posterior mean of latent column k.
    Latent(usize),
}

/// Integrated gradients from `baseline` to each row of `xs`, midpoint rule:
/// `IG_j = (x_j − b_j) · mean_t ∂f/∂x_j (b + (t − ½)/steps · (x − b))`.
/// The model runs in deterministic mode (z = μ). Returns `[rows, X]`.
pub fn integrated_gradients(
    model: &BdvaeModel,
    xs: &Tensor,
    baseline: &[f64],
    target: IgTarget,
    steps: usize,
) -> Result<Tensor, ModelError> {
    if steps < 8 {
        return Err(ModelError::TooFewSteps(steps));
    }
    let x_dim = model.arch.n_features;
    if xs.cols() != x_dim || baseline.len() != x_dim {
        return Err(ModelError::InputWidth {
            got: xs.cols().min(baseline.len()),
            expected: x_dim,
        });
    }
    let mut g = Graph::new();
    let nodes = model.arch.build_forward(&mut g, false);
    let per_row = match target {
        IgTarget::Logit => nodes.logit,
        IgTarget::Latent(k) => {
            if k >= model.arch.k() {
                return Err(ModelError::LatentIndex(k));
            }
            g.gather(nodes.mu, vec![k])
        }
    };
    // Rows are independent, so the gradient of the row sum is every row's own
    // gradient.
    let total = g.sum(per_row);
    g.set_output(total);

    let mut out = Vec::with_capacity(xs.rows() * x_dim);
    let mut path = vec![0.0; steps * x_dim];
    for r in 0..xs.rows() {
        let x = xs.row(r);
        for t in 0..steps {
            let alpha = (t as f64 + 0.5) / steps as f64;
            for j in 0..x_dim {
                path[t * x_dim + j] = baseline[j] + alpha * (x[j] - baseline[j]);
            }
        }
        let path_t = Tensor::matrix(steps, x_dim, path.clone())?;
        let mut b = model.bindings();
        b.set_ref(INPUT_LEAF, &path_t);
        let grads = g.gradient(&b, &[INPUT_LEAF])?;
        let gx = &grads[INPUT_LEAF];
        for j in 0..x_dim {
            let avg = (0..steps).map(|t| gx.get2(t, j)).sum::<f64>() / steps as f64;
            out.push((x[j] - baseline[j]) * avg);
        }
    }
    Ok(Tensor::matrix(xs.rows(), x_dim, out)?)
}
