use std::collections::BTreeMap;

use super::model::{ModelState, TargetTable};
use crate::data::PostRecord;
use crate::embeddings::{build_indicator, record_input, TargetIndicator, WordVectorStore};
use crate::error::Result;
use crate::hyperfilter::TargetMixing;
use crate::metrics::{ExcludedRecord, Prediction};
use crate::numerics::{Graph, Tensor};

/// Records are scored in fixed-size chunks so results never depend on the caller.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub predictions: Vec<Prediction>,
    pub excluded: Vec<ExcludedRecord>,
}

/// Scores records, generating a filter for every target they name.
///
/// Targets never seen in training go through the same indicator path as seen
/// ones. A record naming a target without word vectors is excluded and listed.
pub fn predict(model: &ModelState, records: &[PostRecord], store: &WordVectorStore) -> Result<PredictOutcome> {
    let mut resolved: BTreeMap<&str, std::result::Result<TargetIndicator, String>> = BTreeMap::new();
    for r in records {
        for t in &r.targets {
            resolved
                .entry(t.as_str())
                .or_insert_with(|| build_indicator(t, store).map_err(|e| e.to_string()));
        }
    }

    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for r in records {
        match r.targets.iter().find_map(|t| resolved[t.as_str()].as_ref().err()) {
            Some(reason) => excluded.push(ExcludedRecord {
                id: r.id.clone(),
                reason: reason.clone(),
            }),
            None => kept.push(r),
        }
    }
    for e in &excluded {
        log::debug!("record `{}` excluded: {}", e.id, e.reason);
    }

    let mut predictions = Vec::with_capacity(kept.len());
    if kept.is_empty() {
        return Ok(PredictOutcome { predictions, excluded });
    }
    let indicators: Vec<TargetIndicator> = resolved.into_values().filter_map(|r| r.ok()).collect();
    let table = TargetTable::new(&indicators)?;
    let input_dim = model.adapter.input_dim();

    for chunk in kept.chunks(CHUNK) {
        let rows = chunk
            .iter()
            .map(|r| record_input(r, input_dim, model.text_fallback))
            .collect::<Result<Vec<_>>>()?;
        let members: Vec<Vec<usize>> = chunk
            .iter()
            .map(|r| r.targets.iter().filter_map(|t| table.index(t)).collect())
            .collect();
        let mixing = TargetMixing::new(&members, table.len())?;
        let mut g = Graph::new();
        let (_, s_filtered) = model.filter_graph(&mut g, &Tensor::from_rows(&rows)?, &mixing, &table.indicators)?;
        let y = model.hate.forward_graph(&mut g, s_filtered)?;
        for (r, &score) in chunk.iter().zip(g.value(y).data()) {
            predictions.push(Prediction {
                id: r.id.clone(),
                score,
                label: r.label,
            });
        }
    }
    Ok(PredictOutcome { predictions, excluded })
}
