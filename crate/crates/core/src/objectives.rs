//! Loss terms of the filter/discriminator game and their synergic combination.
//!
//! Each term has a tape version used in training and a plain version that
//! evaluates it on given values. Batch terms are means over posts; the
//! semantic-gap term is a sum over unordered target pairs and layers.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::heads::PROB_FLOOR;
use crate::hyperfilter::FactorVars;
use crate::numerics::{Graph, Tensor, Var};

/// Coefficients of the synergic loss `L_hate + μ·L_reg + γ·L_imi − λ·L_dis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            gamma: 3.0,
            mu: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss coefficient {name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Values of all four terms on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_hate: f64,
    pub l_dis: f64,
    pub l_reg: f64,
    pub l_imi: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_hate, self.l_dis, self.l_reg, self.l_imi].iter().all(|v| v.is_finite())
    }
}

pub fn synergic(bundle: &LossBundle, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(bundle.l_hate + weights.mu * bundle.l_reg + weights.gamma * bundle.l_imi - weights.lambda * bundle.l_dis)
}

fn clamped_log_pair(g: &mut Graph, p: Var) -> Result<(Var, Var)> {
    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let log_p = g.log(pc)?;
    let q = g.one_minus(pc);
    let log_q = g.log(q)?;
    Ok((log_p, log_q))
}

/// Mean over rows of `−Σ_k [t log p + (1−t) log(1−p)]`.
fn bce_rows(g: &mut Graph, probs: Var, truth: &Tensor) -> Result<Var> {
    if g.value(probs).shape() != truth.shape() {
        return Err(dim_err(format!(
            "predictions {:?} vs labels {:?}",
            g.value(probs).shape(),
            truth.shape()
        )));
    }
    let rows = truth.rows() as f64;
    let (log_p, log_q) = clamped_log_pair(g, probs)?;
    let t = g.constant(truth.clone());
    let not_t = g.constant(truth.map(|v| 1.0 - v));
    let a = g.mul(t, log_p)?;
    let b = g.mul(not_t, log_q)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    Ok(g.scale(total, -1.0 / rows))
}

/// Discriminator log loss: `p̂` and multi-hot `p` are `[B, |T_train|]`.
pub fn loss_dis_graph(g: &mut Graph, p_hat: Var, p: &Tensor) -> Result<Var> {
    if g.value(p_hat).cols() != p.cols() {
        return Err(dim_err(format!(
            "discriminator emits {} targets, labels carry {}",
            g.value(p_hat).cols(),
            p.cols()
        )));
    }
    bce_rows(g, p_hat, p)
}

/// Binary cross-entropy of `ŷ` `[B, 1]` against labels `y` `[B, 1]`.
pub fn loss_hate_graph(g: &mut Graph, y_hat: Var, y: &Tensor) -> Result<Var> {
    bce_rows(g, y_hat, y)
}

/// [`loss_dis_graph`] from pre-sigmoid scores; the training route.
pub fn loss_dis_logits_graph(g: &mut Graph, logits: Var, p: &Tensor) -> Result<Var> {
    if g.value(logits).cols() != p.cols() {
        return Err(dim_err(format!(
            "discriminator emits {} targets, labels carry {}",
            g.value(logits).cols(),
            p.cols()
        )));
    }
    let total = g.bce_logits(logits, p, PROB_FLOOR)?;
    Ok(g.scale(total, 1.0 / p.rows() as f64))
}

/// [`loss_hate_graph`] from the pre-sigmoid score.
pub fn loss_hate_logits_graph(g: &mut Graph, logit: Var, y: &Tensor) -> Result<Var> {
    let total = g.bce_logits(logit, y, PROB_FLOOR)?;
    Ok(g.scale(total, 1.0 / y.rows() as f64))
}

/// Mean `KL([ŷ, 1−ŷ] ‖ [ŷ′, 1−ŷ′])` with `ŷ` from the filtered embedding.
pub fn loss_imi_graph(g: &mut Graph, y_filtered: Var, y_raw: Var) -> Result<Var> {
    let (lf, lfq) = clamped_log_pair(g, y_filtered)?;
    let (lr, lrq) = clamped_log_pair(g, y_raw)?;
    let yc = g.clamp(y_filtered, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let qc = g.one_minus(yc);
    let d1 = g.sub(lf, lr)?;
    let d2 = g.sub(lfq, lrq)?;
    let a = g.mul(yc, d1)?;
    let b = g.mul(qc, d2)?;
    let kl = g.add(a, b)?;
    Ok(g.mean(kl))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err(format!("cosine of {} and {} values", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateCosine("zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Pairwise indicator cosines, `out[i][j]` for `i < j`.
pub fn indicator_cosines(indicators: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = indicators.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            out[i][j] = cosine(&indicators[i], &indicators[j])
                .map_err(|_| Error::DegenerateCosine(format!("indicator {i} or {j} has zero norm")))?;
        }
    }
    Ok(out)
}

/// Semantic-gap alignment: `Σ_l Σ_{t<t′} (cos(t, t′) − cos(Θ̄_t, Θ̄_t′))²`.
///
/// `thetas[l][t]` is target `t`'s assembled layer-`l` matrix on the tape. Each
/// layer is evaluated as one normalized Gram matrix rather than pair by pair.
pub fn loss_reg_graph(g: &mut Graph, indicator_cos: &[Vec<f64>], thetas: &[Vec<Var>]) -> Result<Var> {
    let n = indicator_cos.len();
    if n < 2 {
        return Err(Error::Contract("semantic-gap loss needs at least two targets".into()));
    }
    let (target, upper) = pair_tables(indicator_cos)?;
    let mut total: Option<Var> = None;
    for layer in thetas {
        if layer.len() != n {
            return Err(dim_err(format!("{} filters for {n} targets", layer.len())));
        }
        let m = g.stack_rows(layer)?;
        let m_t = g.transpose(m);
        let gram = g.matmul(m, m_t)?;
        let term = gram_cosine_loss(g, gram, &target, &upper)?;
        total = Some(add_opt(g, total, term)?);
    }
    total.ok_or_else(|| Error::Contract("semantic-gap loss over zero layers".into()))
}

/// [`loss_reg_graph`] evaluated from low-rank factors without assembling `Θ`.
///
/// With `Θ_t = U_t·P_t` and `P_t = W_t·V_t`, `⟨Θ_t, Θ_t′⟩ = Σ (U_tᵀU_t′) ∘ (P_t P_t′ᵀ)`,
/// so every inner product needs only `K × K` blocks.
pub fn loss_reg_factored_graph(g: &mut Graph, indicator_cos: &[Vec<f64>], factors: &[Vec<FactorVars>]) -> Result<Var> {
    let n = indicator_cos.len();
    if n < 2 {
        return Err(Error::Contract("semantic-gap loss needs at least two targets".into()));
    }
    let (target, upper) = pair_tables(indicator_cos)?;
    let mut total: Option<Var> = None;
    for layer in factors {
        if layer.len() != n {
            return Err(dim_err(format!("{} filters for {n} targets", layer.len())));
        }
        let k = g.value(layer[0].w).rows();
        let mut u_cat = layer[0].u;
        let mut p_cat = None;
        for (i, f) in layer.iter().enumerate() {
            if i > 0 {
                u_cat = g.concat_cols(u_cat, f.u)?;
            }
            let p = g.matmul(f.w, f.v)?;
            let pt = g.transpose(p);
            p_cat = Some(match p_cat {
                Some(acc) => g.concat_cols(acc, pt)?,
                None => pt,
            });
        }
        let p_cat = p_cat.expect("at least two targets");
        let u_t = g.transpose(u_cat);
        let uu = g.matmul(u_t, u_cat)?;
        let p_t = g.transpose(p_cat);
        let pp = g.matmul(p_t, p_cat)?;
        let h = g.mul(uu, pp)?;
        // Sum each K × K block: G = Sᵀ·H·S with S the block indicator.
        let mut sel = vec![0.0; n * k * n];
        for t in 0..n {
            for a in 0..k {
                sel[(t * k + a) * n + t] = 1.0;
            }
        }
        let sel = Tensor::matrix(n * k, n, sel)?;
        let s_t = g.constant(sel.transpose());
        let s = g.constant(sel);
        let hs = g.matmul(h, s)?;
        let gram = g.matmul(s_t, hs)?;
        let term = gram_cosine_loss(g, gram, &target, &upper)?;
        total = Some(add_opt(g, total, term)?);
    }
    total.ok_or_else(|| Error::Contract("semantic-gap loss over zero layers".into()))
}

fn pair_tables(indicator_cos: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
    let n = indicator_cos.len();
    let mut target = vec![0.0; n * n];
    let mut upper = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            target[i * n + j] = indicator_cos[i][j];
            upper[i * n + j] = 1.0;
        }
    }
    Ok((Tensor::matrix(n, n, target)?, Tensor::matrix(n, n, upper)?))
}

fn add_opt(g: &mut Graph, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => g.add(a, v),
        None => Ok(v),
    }
}

/// `Σ_{i<j} (target_ij − G_ij / sqrt(G_ii·G_jj))²` for an inner-product matrix `G`.
fn gram_cosine_loss(g: &mut Graph, gram: Var, target: &Tensor, upper: &Tensor) -> Result<Var> {
    let n = target.rows();
    let diag = g.constant(Tensor::identity(n));
    let on_diag = g.mul(gram, diag)?;
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let sq_norms = g.matmul(on_diag, ones)?;
    if let Some(t) = g.value(sq_norms).data().iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateCosine(format!("filter parameters of target {t} vanished")));
    }
    let norms = g.sqrt(sq_norms)?;
    let inv = g.div(ones, norms)?;
    let rows = g.scale_rows(gram, inv)?;
    let rows_t = g.transpose(rows);
    let both = g.scale_rows(rows_t, inv)?;
    let c = g.constant(target.clone());
    let diff = g.sub(c, both)?;
    let d2 = g.mul(diff, diff)?;
    let mask = g.constant(upper.clone());
    let kept = g.mul(d2, mask)?;
    Ok(g.sum(kept))
}

/// `l_hate + μ·l_reg + γ·l_imi − λ·l_dis` on the tape.
pub fn synergic_graph(
    g: &mut Graph,
    l_hate: Var,
    l_reg: Option<Var>,
    l_imi: Var,
    l_dis: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = l_hate;
    if let Some(r) = l_reg {
        let r = g.scale(r, w.mu);
        total = g.add(total, r)?;
    }
    let imi = g.scale(l_imi, w.gamma);
    total = g.add(total, imi)?;
    let dis = g.scale(l_dis, -w.lambda);
    g.add(total, dis)
}

pub fn loss_dis(p_hat: &Tensor, p: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let ph = g.constant(p_hat.clone());
    let l = loss_dis_graph(&mut g, ph, p)?;
    Ok(g.value(l).item())
}

pub fn loss_hate(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let yh = g.constant(Tensor::matrix(y_hat.len(), 1, y_hat.to_vec())?);
    let l = loss_hate_graph(&mut g, yh, &Tensor::matrix(y.len(), 1, y.to_vec())?)?;
    Ok(g.value(l).item())
}

pub fn loss_imi(y_filtered: &[f64], y_raw: &[f64]) -> Result<f64> {
    if y_filtered.len() != y_raw.len() {
        return Err(dim_err("imitation loss on batches of different size"));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(y_filtered.len(), 1, y_filtered.to_vec())?);
    let b = g.constant(Tensor::matrix(y_raw.len(), 1, y_raw.to_vec())?);
    let l = loss_imi_graph(&mut g, a, b)?;
    Ok(g.value(l).item())
}

/// Plain semantic-gap loss; `thetas[l][t]` are flattened parameter vectors.
pub fn loss_reg(indicators: &[Vec<f64>], thetas: &[Vec<Vec<f64>>]) -> Result<f64> {
    let cos = indicator_cosines(indicators)?;
    let mut g = Graph::new();
    let vars: Vec<Vec<Var>> = thetas
        .iter()
        .map(|layer| layer.iter().map(|t| g.constant(Tensor::vector(t.clone()))).collect())
        .collect();
    let l = loss_reg_graph(&mut g, &cos, &vars)?;
    Ok(g.value(l).item())
}
