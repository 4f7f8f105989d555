//! Target discriminator and hate-speech classifier heads.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{mlp_forward_graph, push_mlp, Activation, Graph, ParamGroup, Tensor, Var};

pub const DISCRIMINATOR_GROUP: &str = "dis";
pub const CLASSIFIER_GROUP: &str = "hate";

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-7;

fn head_dims(input: usize, hidden: usize, output: usize) -> [usize; 4] {
    [input, hidden, hidden, output]
}

fn check_input(g: &Graph, s: Var, group: &ParamGroup) -> Result<()> {
    let expect = group.get("w0")?.rows();
    let got = g.value(s).cols();
    if got != expect {
        return Err(dim_err(format!(
            "`{}` head expects {expect}-dim input, got {got}",
            group.name()
        )));
    }
    Ok(())
}

/// Multi-label target discriminator: one independent sigmoid per seen target.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHead {
    pub group: ParamGroup,
    targets: Vec<String>,
}

impl DiscriminatorHead {
    pub fn new(input: usize, hidden: usize, targets: Vec<String>, rng: &mut impl Rng) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("discriminator needs at least one target".into()));
        }
        let mut group = ParamGroup::new(DISCRIMINATOR_GROUP);
        push_mlp(&mut group, "", &head_dims(input, hidden, targets.len()), rng);
        Ok(Self { group, targets })
    }

    pub(crate) fn from_group(group: ParamGroup, targets: Vec<String>) -> Result<Self> {
        let out = group.get("b2")?.cols();
        if out != targets.len() {
            return Err(dim_err(format!(
                "discriminator has {out} outputs for {} targets",
                targets.len()
            )));
        }
        Ok(Self { group, targets })
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    /// Pre-sigmoid scores `[B, |targets|]` for a batch `[B, d]`.
    pub fn logits_graph(&self, g: &mut Graph, s: Var) -> Result<Var> {
        check_input(g, s, &self.group)?;
        mlp_forward_graph(g, s, &self.group, "", Activation::Identity)
    }

    /// `p̂ = sigmoid(MLP(s̃))` for a batch `[B, d]`, giving `[B, |targets|]`.
    pub fn forward_graph(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let logits = self.logits_graph(g, s)?;
        Ok(g.sigmoid(logits))
    }

    /// Per-target probabilities for one filtered embedding.
    pub fn discriminate(&self, s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(s.reshape(&[1, s.numel()])?);
        let p = self.forward_graph(&mut g, x)?;
        g.value(p).reshape(&[self.targets.len()])
    }
}

/// Binary hate-speech classifier, shared between filtered and unfiltered inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub group: ParamGroup,
}

impl ClassifierHead {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new(CLASSIFIER_GROUP);
        push_mlp(&mut group, "", &head_dims(input, hidden, 1), rng);
        Self { group }
    }

    pub(crate) fn from_group(group: ParamGroup) -> Result<Self> {
        if group.get("b2")?.cols() != 1 {
            return Err(dim_err("classifier head must have one output"));
        }
        Ok(Self { group })
    }

    pub fn logits_graph(&self, g: &mut Graph, s: Var) -> Result<Var> {
        check_input(g, s, &self.group)?;
        mlp_forward_graph(g, s, &self.group, "", Activation::Identity)
    }

    /// `ŷ` for a batch `[B, d]`, giving `[B, 1]`.
    pub fn forward_graph(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let logit = self.logits_graph(g, s)?;
        Ok(g.sigmoid(logit))
    }

    pub fn classify(&self, s: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(s.reshape(&[1, s.numel()])?);
        let y = self.forward_graph(&mut g, x)?;
        Ok(g.value(y).item())
    }
}

/// Hard label at `threshold`: scores at or above it are hateful.
pub fn decide(score: f64, threshold: f64) -> u8 {
    u8::from(score >= threshold)
}
