use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{glorot_with, ParamGroup};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Adds the layers of an MLP with widths `dims[0] → … → dims[n]` to `group`.
///
/// Layer `i` is stored as `{prefix}w{i}` (`[in, out]`, Glorot) and
/// `{prefix}b{i}` (`[1, out]`, zero).
pub fn push_mlp(group: &mut ParamGroup, prefix: &str, dims: &[usize], rng: &mut impl Rng) {
    for (i, pair) in dims.windows(2).enumerate() {
        group.push(format!("{prefix}w{i}"), glorot_with(&[pair[0], pair[1]], rng));
        group.push(format!("{prefix}b{i}"), Tensor::zeros(&[1, pair[1]]));
    }
}

/// Number of layers stored under `prefix`.
pub fn mlp_depth(group: &ParamGroup, prefix: &str) -> usize {
    (0..)
        .take_while(|i| group.index_of(&format!("{prefix}w{i}")).is_some())
        .count()
}

/// Batched forward pass on the tape: rows of `input` are samples.
///
/// Hidden layers use ReLU; `final_activation` applies to the last layer.
pub fn mlp_forward_graph(
    g: &mut Graph,
    input: Var,
    group: &ParamGroup,
    prefix: &str,
    final_activation: Activation,
) -> Result<Var> {
    let depth = mlp_depth(group, prefix);
    if depth == 0 {
        return Err(dim_err(format!("group `{}` has no layers under `{prefix}`", group.name())));
    }
    let mut x = input;
    for i in 0..depth {
        let w_name = format!("{prefix}w{i}");
        let b_name = format!("{prefix}b{i}");
        let w_shape = group.get(&w_name)?.dims2();
        let b_shape = group.get(&b_name)?.dims2();
        let in_cols = g.value(x).cols();
        if in_cols != w_shape.0 || b_shape != (1, w_shape.1) {
            return Err(dim_err(format!(
                "layer {i} of `{}{prefix}`: input width {in_cols}, weight {}×{}, bias {}×{}",
                group.name(),
                w_shape.0,
                w_shape.1,
                b_shape.0,
                b_shape.1
            )));
        }
        let w = g.param_named(group, &w_name)?;
        let b = g.param_named(group, &b_name)?;
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let last = i + 1 == depth;
        x = match (last, final_activation) {
            (false, _) | (true, Activation::Relu) => g.relu(z),
            (true, Activation::Identity) => z,
        };
    }
    Ok(x)
}

/// Forward pass without recording gradients. A 1-D input is treated as a single row.
pub fn mlp_forward(
    input: &Tensor,
    group: &ParamGroup,
    prefix: &str,
    final_activation: Activation,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (r, c) = input.dims2();
    let x = g.constant(input.reshape(&[r, c])?);
    let y = mlp_forward_graph(&mut g, x, group, prefix, final_activation)?;
    let out = g.value(y).clone();
    if input.shape().len() == 1 {
        return out.reshape(&[out.numel()]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input() {
        let mut group = ParamGroup::new("m");
        group.push("w0", Tensor::identity(3));
        group.push("b0", Tensor::zeros(&[1, 3]));
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let y = mlp_forward(&x, &group, "", Activation::Identity).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_pass_bias() {
        let mut group = ParamGroup::new("m");
        group.push("w0", Tensor::zeros(&[4, 1]));
        group.push("b0", Tensor::matrix(1, 1, vec![0.7]).unwrap());
        let x = Tensor::vector(vec![9.0, -3.0, 2.0, 1.0]);
        let y = mlp_forward(&x, &group, "", Activation::Identity).unwrap();
        assert_eq!(y.data(), &[0.7]);
    }

    #[test]
    fn two_layer_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut group = ParamGroup::new("m");
        push_mlp(&mut group, "", &[5, 4, 2], &mut rng);
        group.set("b0", Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.05]).unwrap()).unwrap();
        group.set("b1", Tensor::matrix(1, 2, vec![-0.4, 0.25]).unwrap()).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0, -0.5];
        let y = mlp_forward(&Tensor::vector(x.to_vec()), &group, "", Activation::Identity).unwrap();

        let w0 = group.get("w0").unwrap();
        let b0 = group.get("b0").unwrap();
        let w1 = group.get("w1").unwrap();
        let b1 = group.get("b1").unwrap();
        let mut h = [0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b0.data()[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w0.get2(i, j);
            }
            *hj = acc.max(0.0);
        }
        for k in 0..2 {
            let mut acc = b1.data()[k];
            for (j, hj) in h.iter().enumerate() {
                acc += hj * w1.get2(j, k);
            }
            assert!((y.data()[k] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut group = ParamGroup::new("m");
        push_mlp(&mut group, "", &[3, 4, 2], &mut rng);
        group.set("b1", Tensor::zeros(&[1, 2])).unwrap();
        let err = mlp_forward(&Tensor::vector(vec![1.0; 5]), &group, "", Activation::Relu).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
