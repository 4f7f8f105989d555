use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::data::PostRecord;
use crate::embeddings::{record_input, EncoderAdapter, TargetIndicator, INDICATOR_DIM};
use crate::error::{dim_err, Error, Result};
use crate::heads::{ClassifierHead, DiscriminatorHead};
use crate::hyperfilter::{filter_batch_graph, FactorVars, HyperNetwork, HyperShape, TargetMixing};
use crate::numerics::{Graph, ParamGroup, Tensor, Var};
use crate::objectives::{
    indicator_cosines, loss_dis_logits_graph, loss_hate_logits_graph, loss_imi_graph, loss_reg_factored_graph, synergic_graph,
    LossBundle, LossWeights,
};

/// Indicators of a fixed, ordered target list.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    pub names: Vec<String>,
    /// `[|targets|, INDICATOR_DIM]`.
    pub indicators: Tensor,
    /// Pairwise indicator cosines; empty with fewer than two targets.
    pub cosines: Vec<Vec<f64>>,
}

impl TargetTable {
    pub fn new(indicators: &[TargetIndicator]) -> Result<Self> {
        if indicators.is_empty() {
            return Err(Error::Contract("target table needs at least one target".into()));
        }
        let vectors: Vec<Vec<f64>> = indicators.iter().map(|i| i.vector.clone()).collect();
        let cosines = if vectors.len() >= 2 {
            indicator_cosines(&vectors)?
        } else {
            Vec::new()
        };
        Ok(Self {
            names: indicators.iter().map(|i| i.name.clone()).collect(),
            indicators: Tensor::from_rows(&vectors)?,
            cosines,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Encoded training records, ready to be cut into minibatches.
#[derive(Debug, Clone)]
pub struct TrainData {
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
    memberships: Vec<Vec<usize>>,
    n_targets: usize,
}

impl TrainData {
    /// Every record may only mention targets of `table`.
    pub fn new(records: &[PostRecord], table: &TargetTable, input_dim: usize, text_fallback: bool) -> Result<Self> {
        let mut inputs = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        let mut memberships = Vec::with_capacity(records.len());
        for r in records {
            inputs.push(record_input(r, input_dim, text_fallback)?);
            labels.push(f64::from(r.label));
            let m = r
                .targets
                .iter()
                .map(|t| {
                    table.index(t).ok_or_else(|| {
                        Error::Data(format!("record `{}` mentions `{t}`, which is not a training target", r.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            memberships.push(m);
        }
        Ok(Self {
            inputs,
            labels,
            memberships,
            n_targets: table.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let members: Vec<Vec<usize>> = indices.iter().map(|&i| self.memberships[i].clone()).collect();
        let mut hot = vec![0.0; indices.len() * self.n_targets];
        for (row, m) in members.iter().enumerate() {
            for &t in m {
                hot[row * self.n_targets + t] = 1.0;
            }
        }
        Ok(Batch {
            inputs: Tensor::from_rows(&rows)?,
            labels: Tensor::matrix(indices.len(), 1, labels)?,
            multi_hot: Tensor::matrix(indices.len(), self.n_targets, hot)?,
            mixing: TargetMixing::new(&members, self.n_targets)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Tensor,
    pub multi_hot: Tensor,
    pub mixing: TargetMixing,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles of one batch's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub s: Var,
    pub s_filtered: Var,
    pub l_hate: Var,
    pub l_dis: Var,
    pub l_imi: Var,
    pub l_reg: Option<Var>,
    pub synergic: Var,
}

impl LossVars {
    pub fn bundle(&self, g: &Graph) -> LossBundle {
        LossBundle {
            l_hate: g.value(self.l_hate).item(),
            l_dis: g.value(self.l_dis).item(),
            l_reg: self.l_reg.map_or(0.0, |v| g.value(v).item()),
            l_imi: g.value(self.l_imi).item(),
        }
    }
}

/// The four trainable parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub adapter: EncoderAdapter,
    pub hyper: HyperNetwork,
    pub dis: DiscriminatorHead,
    pub hate: ClassifierHead,
    pub text_fallback: bool,
}

impl ModelState {
    /// Fresh parameters; groups are drawn in a fixed order from one seeded stream.
    pub fn init(config: &TrainConfig, input_dim: usize, seen_targets: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adapter = EncoderAdapter::new(input_dim, config.d, config.adapter_depth, &mut rng);
        let hyper = HyperNetwork::new(
            HyperShape {
                indicator_dim: INDICATOR_DIM,
                hidden: config.hyper_hidden,
                d: config.d,
                rank: config.rank,
                layers: config.layers,
            },
            &mut rng,
        )?;
        let dis = DiscriminatorHead::new(config.d, config.head_hidden, seen_targets, &mut rng)?;
        let hate = ClassifierHead::new(config.d, config.head_hidden, &mut rng);
        Ok(Self {
            adapter,
            hyper,
            dis,
            hate,
            text_fallback: config.text_fallback,
        })
    }

    pub fn groups(&self) -> [&ParamGroup; 4] {
        [&self.adapter.group, &self.hyper.group, &self.dis.group, &self.hate.group]
    }

    pub fn groups_mut(&mut self) -> [&mut ParamGroup; 4] {
        [
            &mut self.adapter.group,
            &mut self.hyper.group,
            &mut self.dis.group,
            &mut self.hate.group,
        ]
    }

    pub fn seen_targets(&self) -> &[String] {
        self.dis.targets()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hyper.shape().d
    }

    pub fn unfreeze_all(&mut self) {
        for g in self.groups_mut() {
            g.unfreeze();
        }
    }

    /// Errors when the architecture differs from what `config` would build.
    pub fn check_config(&self, config: &TrainConfig) -> Result<()> {
        let shape = self.hyper.shape();
        let head_hidden = self.hate.group.get("w0")?.cols();
        let checks = [
            ("d", shape.d, config.d),
            ("rank", shape.rank, config.rank),
            ("layers", shape.layers, config.layers),
            ("hyper_hidden", shape.hidden, config.hyper_hidden),
            ("head_hidden", head_hidden, config.head_hidden),
        ];
        for (name, have, want) in checks {
            if have != want {
                return Err(dim_err(format!("checkpoint has {name} = {have}, configuration asks for {want}")));
            }
        }
        Ok(())
    }

    /// Filtered embeddings `s̃` for a batch, on the tape; returns `(s, s̃)`.
    pub fn filter_graph(&self, g: &mut Graph, inputs: &Tensor, mixing: &TargetMixing, table: &Tensor) -> Result<(Var, Var)> {
        let (s, s_filtered, _) = self.forward_filter(g, inputs, mixing, table)?;
        Ok((s, s_filtered))
    }

    fn forward_filter(
        &self,
        g: &mut Graph,
        inputs: &Tensor,
        mixing: &TargetMixing,
        table: &Tensor,
    ) -> Result<(Var, Var, Vec<Vec<FactorVars>>)> {
        let x = g.constant(inputs.clone());
        let s = self.adapter.forward_graph(g, x)?;
        let ind = g.constant(table.clone());
        let factors = self.hyper.factors_graph(g, ind)?;
        let s_filtered = filter_batch_graph(g, s, mixing, &factors)?;
        Ok((s, s_filtered, factors))
    }

    /// Builds every loss term for `batch` against the seen-target `table`.
    pub fn loss_graph(&self, g: &mut Graph, batch: &Batch, table: &TargetTable, weights: &LossWeights) -> Result<LossVars> {
        let (s, s_filtered, factors) = self.forward_filter(g, &batch.inputs, &batch.mixing, &table.indicators)?;

        let dis_logits = self.dis.logits_graph(g, s_filtered)?;
        let l_dis = loss_dis_logits_graph(g, dis_logits, &batch.multi_hot)?;
        let hate_logit = self.hate.logits_graph(g, s_filtered)?;
        let l_hate = loss_hate_logits_graph(g, hate_logit, &batch.labels)?;
        let y_hat = g.sigmoid(hate_logit);
        let y_raw = self.hate.forward_graph(g, s)?;
        let l_imi = loss_imi_graph(g, y_hat, y_raw)?;
        let l_reg = if table.len() >= 2 {
            Some(loss_reg_factored_graph(g, &table.cosines, &factors)?)
        } else {
            None
        };
        let synergic = synergic_graph(g, l_hate, l_reg, l_imi, l_dis, weights)?;
        Ok(LossVars {
            s,
            s_filtered,
            l_hate,
            l_dis,
            l_imi,
            l_reg,
            synergic,
        })
    }
}
