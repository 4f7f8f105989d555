//! Hypernetwork-generated, low-rank, target-specific filters.
//!
//! For every filter layer `l` a small MLP `h_l` maps a target indicator to a
//! flat vector of `K² + 2dK + K` numbers, read in order as `U` (`d × K`), `W`
//! (`K × K`) and `V` (`K × (d+1)`), all row-major. The layer's parameters are
//! `Θ = U·W·V`, a `d × (d+1)` matrix read as `[weight | bias]`. A post with
//! several targets is filtered with the mean of its targets' `Θ` matrices.
//!
//! Training uses the factored form directly: since a layer is linear in `Θ`,
//! `mean_t(Θ_t)·[x; 1] = mean_t(U_t·W_t·(V_t·[x; 1]))`, which never
//! materializes the `d × (d+1)` matrices for a batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::TargetIndicator;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{mlp_forward_graph, push_mlp, Activation, Graph, ParamGroup, Tensor, Var};

pub const HYPER_GROUP: &str = "hyper";

/// Generated entries per filter layer: `K² + 2dK + K`.
pub fn factor_arity(d: usize, rank: usize) -> usize {
    rank * rank + 2 * d * rank + rank
}

/// Entries of an unfactored `d × (d+1)` layer.
pub fn dense_arity(d: usize) -> usize {
    d * d + d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperShape {
    pub indicator_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub rank: usize,
    pub layers: usize,
}

/// Per-layer generators `h_l`, each a two-layer ReLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetwork {
    pub group: ParamGroup,
    shape: HyperShape,
}

fn layer_prefix(l: usize) -> String {
    format!("h{l}.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub u: Tensor,
    pub w: Tensor,
    pub v: Tensor,
}

/// Assembled per-layer filter parameters, each `d × (d+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub layers: Vec<Tensor>,
}

/// Factor handles for one target and layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    pub u: Var,
    pub w: Var,
    pub v: Var,
}

/// Output-layer bias of a generator, a filter common to every target.
///
/// Glorot output weights alone give factors near 1e-2, so `U·W·V` would
/// start near zero and the filter would pass almost nothing through. The
/// bias blocks are scaled (`U` ~ 1, `W` ~ 1/√K, `V` ~ 1/√(d+1)) so a fresh
/// filter has roughly unit gain.
fn shared_filter_bias(d: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let uniform = |scale: f64, n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        let bound = scale * 3f64.sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let mut out = uniform(1.0, d * k, rng);
    out.extend(uniform(1.0 / (k as f64).sqrt(), k * k, rng));
    out.extend(uniform(1.0 / ((d + 1) as f64).sqrt(), k * (d + 1), rng));
    out
}

impl HyperNetwork {
    pub fn new(shape: HyperShape, rng: &mut impl Rng) -> Result<Self> {
        if shape.rank == 0 || shape.layers == 0 || shape.d == 0 || shape.hidden == 0 {
            return Err(Error::Config(format!("invalid hypernetwork shape {shape:?}")));
        }
        let mut group = ParamGroup::new(HYPER_GROUP);
        let out = factor_arity(shape.d, shape.rank);
        for l in 0..shape.layers {
            let prefix = layer_prefix(l);
            push_mlp(&mut group, &prefix, &[shape.indicator_dim, shape.hidden, out], rng);
            let bias = shared_filter_bias(shape.d, shape.rank, rng);
            group.set(&format!("{prefix}b1"), Tensor::matrix(1, out, bias)?)?;
        }
        Ok(Self { group, shape })
    }

    pub(crate) fn from_group(group: ParamGroup, shape: HyperShape) -> Result<Self> {
        for l in 0..shape.layers {
            let w1 = group.get(&format!("{}w1", layer_prefix(l)))?;
            if w1.cols() != factor_arity(shape.d, shape.rank) {
                return Err(dim_err(format!(
                    "hypernetwork layer {l} emits {} values, shape {shape:?} needs {}",
                    w1.cols(),
                    factor_arity(shape.d, shape.rank)
                )));
            }
        }
        Ok(Self { group, shape })
    }

    pub fn shape(&self) -> HyperShape {
        self.shape
    }

    /// Total generated entries across all layers.
    pub fn generated_entries(&self) -> usize {
        self.shape.layers * factor_arity(self.shape.d, self.shape.rank)
    }

    /// Flat `h_l` output for each indicator row, `[n, K² + 2dK + K]`.
    pub fn flat_graph(&self, g: &mut Graph, indicators: Var, layer: usize) -> Result<Var> {
        if layer >= self.shape.layers {
            return Err(dim_err(format!("filter layer {layer} of {}", self.shape.layers)));
        }
        mlp_forward_graph(g, indicators, &self.group, &layer_prefix(layer), Activation::Identity)
    }

    /// Reshapes row `row` of a flat output into `(U, W, V)`.
    pub fn split_graph(&self, g: &mut Graph, flat: Var, row: usize) -> Result<FactorVars> {
        let HyperShape { d, rank: k, .. } = self.shape;
        let r = g.slice_rows(flat, row, row + 1)?;
        let u = g.slice_cols(r, 0, d * k)?;
        let u = g.reshape(u, &[d, k])?;
        let w = g.slice_cols(r, d * k, d * k + k * k)?;
        let w = g.reshape(w, &[k, k])?;
        let v = g.slice_cols(r, d * k + k * k, factor_arity(d, k))?;
        let v = g.reshape(v, &[k, d + 1])?;
        Ok(FactorVars { u, w, v })
    }

    /// Factors for every indicator row and every layer: `out[layer][row]`.
    pub fn factors_graph(&self, g: &mut Graph, indicators: Var) -> Result<Vec<Vec<FactorVars>>> {
        let n = g.value(indicators).rows();
        (0..self.shape.layers)
            .map(|l| {
                let flat = self.flat_graph(g, indicators, l)?;
                (0..n).map(|i| self.split_graph(g, flat, i)).collect()
            })
            .collect()
    }

    pub fn generate_factors(&self, indicator: &TargetIndicator, layer: usize) -> Result<LowRankFactors> {
        if indicator.vector.len() != self.shape.indicator_dim {
            return Err(dim_err(format!(
                "indicator `{}` has {} dims, hypernetwork expects {}",
                indicator.name,
                indicator.vector.len(),
                self.shape.indicator_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, indicator.vector.len(), indicator.vector.clone())?);
        let flat = self.flat_graph(&mut g, x, layer)?;
        let f = self.split_graph(&mut g, flat, 0)?;
        Ok(LowRankFactors {
            u: g.value(f.u).clone(),
            w: g.value(f.w).clone(),
            v: g.value(f.v).clone(),
        })
    }

    /// `Θ_t^{(l)}` for every layer.
    pub fn target_params(&self, indicator: &TargetIndicator) -> Result<FilterParams> {
        let layers = (0..self.shape.layers)
            .map(|l| assemble_theta(&self.generate_factors(indicator, l)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterParams { layers })
    }

    /// Mean of the targets' assembled parameters, layer by layer.
    pub fn ensemble_params(&self, indicators: &[&TargetIndicator]) -> Result<FilterParams> {
        let per_target = indicators
            .iter()
            .map(|ind| self.target_params(ind))
            .collect::<Result<Vec<_>>>()?;
        ensemble(&per_target)
    }
}

/// `Θ = U·W·V`.
pub fn assemble_theta(f: &LowRankFactors) -> Result<Tensor> {
    let (d, k) = f.u.dims2();
    if f.w.dims2() != (k, k) || f.v.dims2() != (k, d + 1) {
        return Err(dim_err(format!(
            "factors U {:?}, W {:?}, V {:?}",
            f.u.shape(),
            f.w.shape(),
            f.v.shape()
        )));
    }
    f.u.matmul(&f.w)?.matmul(&f.v)
}

/// Elementwise mean of several targets' filter parameters.
pub fn ensemble(per_target: &[FilterParams]) -> Result<FilterParams> {
    let Some(first) = per_target.first() else {
        return Err(Error::Contract("parameter ensemble over an empty target set".into()));
    };
    let n = per_target.len() as f64;
    let mut layers = first.layers.clone();
    for p in &per_target[1..] {
        if p.layers.len() != layers.len() {
            return Err(dim_err("ensemble over filters of different depth"));
        }
        for (acc, t) in layers.iter_mut().zip(&p.layers) {
            acc.add_assign(t)?;
        }
    }
    for t in &mut layers {
        *t = t.scale(1.0 / n);
    }
    Ok(FilterParams { layers })
}

/// `s̃ = f(s | Θ)`: affine layers with ReLU between them and none after the last.
pub fn apply_filter(s: &Tensor, params: &FilterParams) -> Result<Tensor> {
    let mut x = s.data().to_vec();
    let n_layers = params.layers.len();
    for (l, theta) in params.layers.iter().enumerate() {
        let (d, c) = theta.dims2();
        if c != d + 1 || x.len() != d {
            return Err(dim_err(format!(
                "filter layer {l} is {d}×{c}, input has {} values",
                x.len()
            )));
        }
        let mut y = vec![0.0; d];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = theta.row(i);
            let mut acc = row[d];
            for (w, xv) in row[..d].iter().zip(&x) {
                acc += w * xv;
            }
            *yi = if l + 1 < n_layers { acc.max(0.0) } else { acc };
        }
        x = y;
    }
    Ok(Tensor::vector(x))
}

/// Per-post mixing weights: `weights[t][i] = 1/|T_i|` if post `i` mentions target `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMixing {
    pub weights: Vec<Vec<f64>>,
}

impl TargetMixing {
    /// `memberships[i]` lists indices (into the indicator table) of post `i`'s targets.
    pub fn new(memberships: &[Vec<usize>], n_targets: usize) -> Result<Self> {
        let mut weights = vec![vec![0.0; memberships.len()]; n_targets];
        for (i, m) in memberships.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Contract(format!("post {i} has no targets")));
            }
            let w = 1.0 / m.len() as f64;
            for &t in m {
                if t >= n_targets {
                    return Err(dim_err(format!("target index {t} of {n_targets}")));
                }
                weights[t][i] += w;
            }
        }
        Ok(Self { weights })
    }
}

/// Filters a batch `[B, d]` on the tape using the factored ensemble.
///
/// `factors[l][t]` are the factors of target `t` at layer `l`.
pub fn filter_batch_graph(
    g: &mut Graph,
    s: Var,
    mixing: &TargetMixing,
    factors: &[Vec<FactorVars>],
) -> Result<Var> {
    let b = g.value(s).rows();
    let ones = g.constant(Tensor::full(&[b, 1], 1.0));
    let mut x = s;
    for (l, layer) in factors.iter().enumerate() {
        if layer.len() != mixing.weights.len() {
            return Err(dim_err(format!(
                "{} targets with factors, {} in the mixing table",
                layer.len(),
                mixing.weights.len()
            )));
        }
        let x_aug = g.concat_cols(x, ones)?;
        let mut acc: Option<Var> = None;
        for (f, w) in layer.iter().zip(&mixing.weights) {
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            let vt = g.transpose(f.v);
            let wt = g.transpose(f.w);
            let ut = g.transpose(f.u);
            let y = g.matmul(x_aug, vt)?;
            let y = g.matmul(y, wt)?;
            let y = g.matmul(y, ut)?;
            let wv = g.constant(Tensor::matrix(b, 1, w.clone())?);
            let y = g.scale_rows(y, wv)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let z = acc.ok_or_else(|| Error::Contract("batch with no targets".into()))?;
        x = if l + 1 < factors.len() { g.relu(z) } else { z };
    }
    Ok(x)
}

/// `Θ_t` for one target and layer on the tape, `d × (d+1)`.
pub fn theta_graph(g: &mut Graph, f: &FactorVars) -> Result<Var> {
    let uw = g.matmul(f.u, f.w)?;
    g.matmul(uw, f.v)
}

/// JSON export of indicators and generated filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterExport {
    pub d: usize,
    pub rank: usize,
    pub layers: usize,
    pub targets: Vec<ExportedTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedTarget {
    pub name: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    pub indicator: Vec<f64>,
    /// Row-major flattened `Θ` per layer, each `d·(d+1)` values.
    pub theta: Vec<Vec<f64>>,
}

pub fn export_filters(hyper: &HyperNetwork, indicators: &[TargetIndicator]) -> Result<FilterExport> {
    let targets = indicators
        .iter()
        .map(|ind| {
            let params = hyper.target_params(ind)?;
            Ok(ExportedTarget {
                name: ind.name.clone(),
                tokens: ind.tokens.clone(),
                skipped: ind.skipped.clone(),
                indicator: ind.vector.clone(),
                theta: params.layers.into_iter().map(Tensor::into_data).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s = hyper.shape();
    Ok(FilterExport {
        d: s.d,
        rank: s.rank,
        layers: s.layers,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn indicator(name: &str, seed: u64, dim: usize) -> TargetIndicator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TargetIndicator {
            name: name.into(),
            tokens: vec![name.into()],
            skipped: vec![],
            vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn hyper(d: usize, rank: usize, layers: usize) -> HyperNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let shape = HyperShape {
            indicator_dim: 12,
            hidden: 16,
            d,
            rank,
            layers,
        };
        let mut h = HyperNetwork::new(shape, &mut rng).unwrap();
        // Non-zero output biases so the tests exercise every slot.
        for l in 0..layers {
            let name = format!("h{l}.b1");
            let n = h.group.get(&name).unwrap().numel();
            let vals = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            h.group.set(&name, Tensor::matrix(1, n, vals).unwrap()).unwrap();
        }
        h
    }

    #[test]
    fn arity_counts_factor_entries() {
        assert_eq!(factor_arity(256, 1), 514);
        assert_eq!(factor_arity(4, 2), 22);
        assert_eq!(dense_arity(256), 65_792);
        let f = hyper(4, 2, 1).generate_factors(&indicator("a", 1, 12), 0).unwrap();
        assert_eq!(f.u.shape(), &[4, 2]);
        assert_eq!(f.w.shape(), &[2, 2]);
        assert_eq!(f.v.shape(), &[2, 5]);
    }

    #[test]
    fn fresh_filters_have_near_unit_gain() {
        let shape = HyperShape {
            indicator_dim: 300,
            hidden: 128,
            d: 64,
            rank: 1,
            layers: 1,
        };
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = HyperNetwork::new(shape, &mut rng).unwrap();
            let a = h.target_params(&indicator("a", 10 + seed, 300)).unwrap();

            let mut gain = 0.0;
            for _ in 0..20 {
                let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.7..1.7)).collect();
                let y = apply_filter(&Tensor::matrix(1, 64, x.clone()).unwrap(), &a).unwrap();
                let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
                gain += norm(y.data()) / norm(&x) / 20.0;
            }
            assert!((0.05..20.0).contains(&gain), "seed {seed}: gain {gain}");
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let d = 3;
        let mut u = Tensor::zeros(&[d, 1]);
        u.data_mut()[0] = 1.0;
        let w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let mut v = Tensor::zeros(&[1, d + 1]);
        v.data_mut()[0] = 1.0;
        let theta = assemble_theta(&LowRankFactors { u, w, v }).unwrap();
        let nonzero: Vec<usize> = (0..theta.numel()).filter(|&i| theta.data()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![0]);
        assert_eq!(theta.data()[0], 2.0);
    }

    #[test]
    fn assembled_theta_matches_triple_loop() {
        let h = hyper(5, 2, 1);
        let f = h.generate_factors(&indicator("x", 3, 12), 0).unwrap();
        let theta = assemble_theta(&f).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += f.u.get2(i, a) * f.w.get2(a, b) * f.v.get2(b, j);
                    }
                }
                assert!((theta.get2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function() {
        let h = hyper(6, 2, 2);
        let t = indicator("x", 3, 12);
        assert_eq!(h.generate_factors(&t, 1).unwrap(), h.generate_factors(&t, 1).unwrap());
    }

    #[test]
    fn identity_and_constant_filters() {
        let d = 3;
        let mut theta = Tensor::zeros(&[d, d + 1]);
        for i in 0..d {
            theta.data_mut()[i * (d + 1) + i] = 1.0;
        }
        let s = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let p = FilterParams { layers: vec![theta] };
        assert_eq!(apply_filter(&s, &p).unwrap(), s);

        let mut constant = Tensor::zeros(&[d, d + 1]);
        for i in 0..d {
            constant.data_mut()[i * (d + 1) + d] = i as f64 + 0.25;
        }
        let p = FilterParams { layers: vec![constant] };
        assert_eq!(apply_filter(&s, &p).unwrap().data(), &[0.25, 1.25, 2.25]);
    }

    #[test]
    fn two_layer_filter_is_composition() {
        let h = hyper(4, 2, 2);
        let p = h.target_params(&indicator("x", 8, 12)).unwrap();
        let s = Tensor::vector(vec![0.3, -0.2, 1.1, 0.4]);
        let first = apply_filter(&s, &FilterParams { layers: vec![p.layers[0].clone()] }).unwrap();
        let hidden = first.map(|v| v.max(0.0));
        let second = apply_filter(&hidden, &FilterParams { layers: vec![p.layers[1].clone()] }).unwrap();
        assert_eq!(apply_filter(&s, &p).unwrap(), second);
    }

    #[test]
    fn ensemble_laws() {
        let h = hyper(4, 2, 2);
        let t1 = indicator("a", 1, 12);
        let t2 = indicator("b", 2, 12);
        let single = h.target_params(&t1).unwrap();
        assert_eq!(h.ensemble_params(&[&t1]).unwrap(), single);
        assert_eq!(h.ensemble_params(&[&t1, &t1]).unwrap(), single);
        let ab = h.ensemble_params(&[&t1, &t2]).unwrap();
        let ba = h.ensemble_params(&[&t2, &t1]).unwrap();
        let other = h.target_params(&t2).unwrap();
        for l in 0..2 {
            assert!(ab.layers[l].max_abs_diff(&ba.layers[l]) <= 1e-15);
            let mean = single.layers[l].add(&other.layers[l]).unwrap().scale(0.5);
            assert!(ab.layers[l].max_abs_diff(&mean) <= 1e-15);
        }
        assert!(matches!(h.ensemble_params(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn factored_batch_matches_dense_ensemble() {
        let (d, layers) = (5, 2);
        let h = hyper(d, 2, layers);
        let inds: Vec<TargetIndicator> = (0..3).map(|i| indicator(&format!("t{i}"), 10 + i, 12)).collect();
        let memberships = vec![vec![0], vec![1, 2], vec![0, 1, 2], vec![2]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let mut g = Graph::new();
        let ind_rows: Vec<Vec<f64>> = inds.iter().map(|i| i.vector.clone()).collect();
        let iv = g.constant(Tensor::from_rows(&ind_rows).unwrap());
        let factors = h.factors_graph(&mut g, iv).unwrap();
        let s = g.constant(Tensor::from_rows(&rows).unwrap());
        let mixing = TargetMixing::new(&memberships, 3).unwrap();
        let out = filter_batch_graph(&mut g, s, &mixing, &factors).unwrap();

        for (i, m) in memberships.iter().enumerate() {
            let refs: Vec<&TargetIndicator> = m.iter().map(|&t| &inds[t]).collect();
            let params = h.ensemble_params(&refs).unwrap();
            let dense = apply_filter(&Tensor::vector(rows[i].clone()), &params).unwrap();
            for (a, b) in dense.data().iter().zip(g.value(out).row(i)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
