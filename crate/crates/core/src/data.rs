//! Labeled posts, seen/unseen target splits and the synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{tokenize_target, WordVectorStore, INDICATOR_DIM};
use crate::error::{Error, Result};

/// One labeled post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub targets: Vec<String>,
    pub label: u8,
}

impl PostRecord {
    /// Checks record invariants and removes duplicate target names.
    pub fn validate(&mut self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Data(format!("record `{}` has an empty target set", self.id)));
        }
        if self.label > 1 {
            return Err(Error::Data(format!(
                "record `{}` has label {}, expected 0 or 1",
                self.id, self.label
            )));
        }
        if self.text.is_none() && self.embedding.is_none() {
            return Err(Error::Data(format!(
                "record `{}` has neither text nor embedding",
                self.id
            )));
        }
        if let Some(e) = &self.embedding {
            if e.is_empty() || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "record `{}` has an empty or non-finite embedding",
                    self.id
                )));
            }
        }
        let mut seen = HashSet::new();
        self.targets.retain(|t| seen.insert(t.clone()));
        Ok(())
    }

    pub fn mentions(&self, target: &str) -> bool {
        self.targets.iter().any(|t| t == target)
    }

    pub fn is_hateful(&self) -> bool {
        self.label == 1
    }
}

/// Parses a JSONL corpus. Any bad line fails the whole load.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<PostRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: PostRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: lineno,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Format {
            line: lineno,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Format {
                line: lineno,
                message: format!("duplicate record id `{}`", rec.id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PostRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_jsonl(records: &[PostRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Which targets are held out, and how evaluation pools are formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_targets: Vec<String>,
    pub unseen_targets: Vec<String>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_true")]
    pub balance_eval: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_validation_fraction() -> f64 {
    0.15
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seen_targets.is_empty() {
            return Err(Error::Config("no seen targets declared".into()));
        }
        if self.unseen_targets.is_empty() {
            return Err(Error::Config("no unseen targets declared".into()));
        }
        let seen: HashSet<&String> = self.seen_targets.iter().collect();
        if let Some(t) = self.unseen_targets.iter().find(|t| seen.contains(t)) {
            return Err(Error::Config(format!("target `{t}` is declared both seen and unseen")));
        }
        if seen.len() != self.seen_targets.len() {
            return Err(Error::Config("duplicate seen target".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<PostRecord>,
    pub validation: Vec<PostRecord>,
    pub test: Vec<PostRecord>,
}

impl CorpusSplit {
    pub fn manifest(&self, spec: &SplitSpec) -> SplitManifest {
        let ids = |v: &[PostRecord]| v.iter().map(|r| r.id.clone()).collect();
        SplitManifest {
            spec: spec.clone(),
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[PostRecord]> {
        match name {
            "train" => Ok(&self.train),
            "validation" | "val" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Record ids per split, written alongside a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Rebuilds the split from a corpus containing every listed id.
    pub fn apply(&self, records: &[PostRecord]) -> Result<CorpusSplit> {
        let by_id: HashMap<&str, &PostRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let pick = |ids: &[String]| -> Result<Vec<PostRecord>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|r| (*r).clone())
                        .ok_or_else(|| Error::Data(format!("split manifest lists unknown record `{id}`")))
                })
                .collect()
        };
        Ok(CorpusSplit {
            train: pick(&self.train)?,
            validation: pick(&self.validation)?,
            test: pick(&self.test)?,
        })
    }
}

/// Seen/unseen split: any record mentioning an unseen target goes to test; the
/// rest is divided into train and validation. With `balance_eval`, validation
/// and test keep equal class counts by discarding surplus majority-class
/// records at random.
pub fn make_split(records: &[PostRecord], spec: &SplitSpec) -> Result<CorpusSplit> {
    spec.validate()?;
    let unseen: HashSet<&str> = spec.unseen_targets.iter().map(String::as_str).collect();
    let declared: HashSet<&str> = spec
        .seen_targets
        .iter()
        .chain(&spec.unseen_targets)
        .map(String::as_str)
        .collect();

    for r in records {
        if let Some(t) = r.targets.iter().find(|t| !declared.contains(t.as_str())) {
            return Err(Error::Config(format!(
                "record `{}` mentions target `{t}`, which is neither seen nor unseen",
                r.id
            )));
        }
    }
    for t in &spec.unseen_targets {
        if !records.iter().any(|r| r.mentions(t)) {
            return Err(Error::Config(format!("unseen target `{t}` does not occur in the corpus")));
        }
    }

    let (test_pool, mut pool): (Vec<usize>, Vec<usize>) = (0..records.len())
        .partition(|&i| records[i].targets.iter().any(|t| unseen.contains(t.as_str())));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    let n_val = (pool.len() as f64 * spec.validation_fraction).round() as usize;
    let mut val_idx = pool[..n_val].to_vec();
    let mut train_idx = pool[n_val..].to_vec();
    let mut test_idx = test_pool;

    if spec.balance_eval {
        val_idx = balance_classes(records, &val_idx, &mut rng);
        test_idx = balance_classes(records, &test_idx, &mut rng);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(CorpusSplit {
        train: take(&train_idx),
        validation: take(&val_idx),
        test: take(&test_idx),
    })
}

/// Downsamples the majority class to the minority count.
fn balance_classes(records: &[PostRecord], idx: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| records[i].is_hateful());
    let keep = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(keep);
    neg.truncate(keep);
    pos.extend(neg);
    pos
}

/// Parameters of the planted-bias synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_posts: usize,
    pub target_names: Vec<String>,
    /// Per-target hateful rate, aligned with `target_names`.
    pub label_rates: Vec<f64>,
    /// Scale `a` of the target-independent label direction.
    pub signal: f64,
    /// Coupling `β` between target directions and the label.
    pub bias: f64,
    /// Isotropic noise standard deviation `σ`.
    pub noise: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_names.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one target".into()));
        }
        if self.label_rates.len() != self.target_names.len() {
            return Err(Error::Config(format!(
                "{} label rates for {} targets",
                self.label_rates.len(),
                self.target_names.len()
            )));
        }
        if let Some(r) = self.label_rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::Config(format!("label rate {r} outside (0, 1)")));
        }
        let unique: HashSet<&String> = self.target_names.iter().collect();
        if unique.len() != self.target_names.len() {
            return Err(Error::Config("duplicate synthetic target name".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let shape_ok = self.signal > 0.0 && self.bias >= 0.0 && self.noise >= 0.0;
        if !shape_ok {
            return Err(Error::Config("need signal > 0, bias >= 0, noise >= 0".into()));
        }
        Ok(())
    }
}

/// Direction vectors behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDirections {
    /// Label direction `u`.
    pub label: Vec<f64>,
    /// One unit direction `m_t` per target, in `target_names` order.
    pub targets: Vec<Vec<f64>>,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn synth_directions(spec: &SyntheticSpec) -> SyntheticDirections {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let label = unit_vector(spec.embedding_dim, &mut rng);
    let targets = spec
        .target_names
        .iter()
        .map(|_| unit_vector(spec.embedding_dim, &mut rng))
        .collect();
    SyntheticDirections { label, targets }
}

/// Generates `n_posts` records.
///
/// Each post mentions 1–3 distinct targets, gets label
/// `y ~ Bernoulli(mean rate of its targets)` and embedding
/// `a·y·u + (1/|T|)·Σ_t (1 + β·(2y − 1))·m_t + ε` with `ε ~ N(0, σ²I)`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<PostRecord>> {
    spec.validate()?;
    let dirs = synth_directions(spec);
    // Separate stream so the directions do not depend on n_posts.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0fc0_4b05);
    let n_targets = spec.target_names.len();
    let all: Vec<usize> = (0..n_targets).collect();
    let dim = spec.embedding_dim;
    let width = spec.n_posts.max(1).to_string().len().max(5);

    let mut records = Vec::with_capacity(spec.n_posts);
    for i in 0..spec.n_posts {
        let k = rng.random_range(1..=3usize).min(n_targets);
        let chosen: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
        let rate = chosen.iter().map(|&t| spec.label_rates[t]).sum::<f64>() / k as f64;
        let y = u8::from(rng.random::<f64>() < rate);
        let yf = f64::from(y);
        let coef = (1.0 + spec.bias * (2.0 * yf - 1.0)) / k as f64;
        let mut x: Vec<f64> = dirs.label.iter().map(|u| spec.signal * yf * u).collect();
        for &t in &chosen {
            for (xi, mi) in x.iter_mut().zip(&dirs.targets[t]) {
                *xi += coef * mi;
            }
        }
        if spec.noise > 0.0 {
            for xi in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *xi += spec.noise * e;
            }
        }
        debug_assert_eq!(x.len(), dim);
        records.push(PostRecord {
            id: format!("s{i:0width$}"),
            text: None,
            embedding: Some(x),
            targets: chosen.iter().map(|&t| spec.target_names[t].clone()).collect(),
            label: y,
        });
    }
    Ok(records)
}

/// Word vectors for the tokens of the synthetic target names.
///
/// Every vector mixes a shared "identity group" direction with a token-specific
/// one, so indicators have moderate positive cosine with each other, as real
/// identity terms do.
pub fn synth_word_vectors(names: &[String], seed: u64) -> Result<WordVectorStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x770e_5dec_7075);
    let shared = unit_vector(INDICATOR_DIM, &mut rng);
    let tokens: BTreeSet<String> = names.iter().flat_map(|n| tokenize_target(n)).collect();
    let mut store = WordVectorStore::new(INDICATOR_DIM, true);
    for tok in tokens {
        let own = unit_vector(INDICATOR_DIM, &mut rng);
        let v = shared
            .iter()
            .zip(&own)
            .map(|(s, o)| 3.0 * (0.6 * s + 0.8 * o))
            .collect();
        store.insert(&tok, v)?;
    }
    Ok(store)
}

/// Counts of hateful / non-hateful records per target.
pub fn target_label_counts(records: &[PostRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        for t in &r.targets {
            let e = out.entry(t.clone()).or_default();
            if r.is_hateful() {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn rec(id: &str, targets: &[&str], label: u8) -> PostRecord {
        PostRecord {
            id: id.into(),
            text: None,
            embedding: Some(vec![0.0, 1.0]),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            label,
        }
    }

    #[test]
    fn parses_a_line() {
        let text = r#"{"id":"a","embedding":[0.1,0.2],"targets":["muslim"],"label":1}"#;
        let recs = read_jsonl(Cursor::new(text)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].embedding.as_deref(), Some(&[0.1, 0.2][..]));
        assert_eq!(recs[0].targets, vec!["muslim"]);
        assert_eq!(recs[0].label, 1);
    }

    #[test]
    fn rejects_empty_targets_citing_id() {
        let text = r#"{"id":"zz","embedding":[0.1],"targets":[],"label":0}"#;
        let err = read_jsonl(Cursor::new(text)).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn bad_line_fails_whole_file() {
        let text = concat!(
            r#"{"id":"a","embedding":[0.1],"targets":["x"],"label":0}"#,
            "\n",
            r#"{"id":"b","embedding":[0.1],"targets":["x"],"label":"#,
            "\n",
            r#"{"id":"c","embedding":[0.1],"targets":["x"],"label":1}"#,
            "\n"
        );
        let err = read_jsonl(Cursor::new(text)).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_labels() {
        let dup = concat!(
            r#"{"id":"a","embedding":[0.1],"targets":["x"],"label":0}"#,
            "\n",
            r#"{"id":"a","embedding":[0.1],"targets":["x"],"label":1}"#
        );
        assert!(read_jsonl(Cursor::new(dup)).is_err());
        let bad = r#"{"id":"a","embedding":[0.1],"targets":["x"],"label":2}"#;
        assert!(read_jsonl(Cursor::new(bad)).is_err());
        let neither = r#"{"id":"a","targets":["x"],"label":1}"#;
        assert!(read_jsonl(Cursor::new(neither)).is_err());
    }

    #[test]
    fn unseen_posts_go_to_test_only() {
        let records = vec![
            rec("p1", &["muslim"], 1),
            rec("p2", &["male"], 0),
            rec("p3", &["male", "white"], 1),
        ];
        let spec = SplitSpec {
            seen_targets: vec!["male".into()],
            unseen_targets: vec!["muslim".into(), "white".into()],
            validation_fraction: 0.5,
            balance_eval: false,
            seed: 1,
        };
        let split = make_split(&records, &spec).unwrap();
        let ids = |v: &[PostRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&split.test), vec!["p1", "p3"]);
        let mut rest = ids(&split.train);
        rest.extend(ids(&split.validation));
        assert_eq!(rest, vec!["p2"]);
    }

    #[test]
    fn missing_unseen_target_is_config_error() {
        let records = vec![rec("p1", &["male"], 1)];
        let spec = SplitSpec {
            seen_targets: vec!["male".into()],
            unseen_targets: vec!["white".into()],
            validation_fraction: 0.5,
            balance_eval: false,
            seed: 0,
        };
        let err = make_split(&records, &spec).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("white")));
    }

    #[test]
    fn balancing_trims_majority() {
        let mut records = Vec::new();
        for i in 0..7 {
            records.push(rec(&format!("h{i}"), &["u"], 1));
        }
        for i in 0..13 {
            records.push(rec(&format!("n{i}"), &["u"], 0));
        }
        records.push(rec("s0", &["s"], 0));
        records.push(rec("s1", &["s"], 1));
        let spec = SplitSpec {
            seen_targets: vec!["s".into()],
            unseen_targets: vec!["u".into()],
            validation_fraction: 0.5,
            balance_eval: true,
            seed: 3,
        };
        let split = make_split(&records, &spec).unwrap();
        let pos = split.test.iter().filter(|r| r.label == 1).count();
        let neg = split.test.len() - pos;
        assert_eq!((pos, neg), (7, 7));
    }

    #[test]
    fn noiseless_single_target_has_two_embeddings() {
        let spec = SyntheticSpec {
            n_posts: 200,
            target_names: vec!["only".into()],
            label_rates: vec![0.5],
            signal: 1.0,
            bias: 0.0,
            noise: 0.0,
            embedding_dim: 4,
            seed: 9,
        };
        let recs = synth_generate(&spec).unwrap();
        let mut distinct: Vec<(u8, Vec<u64>)> = recs
            .iter()
            .map(|r| (r.label, r.embedding.as_ref().unwrap().iter().map(|v| v.to_bits()).collect()))
            .collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        assert_ne!(distinct[0].0, distinct[1].0);
        // Projection on u separates the classes: a·y.
        let dirs = synth_directions(&spec);
        for r in &recs {
            let e = r.embedding.as_ref().unwrap();
            let m = &dirs.targets[0];
            let proj: f64 = e.iter().zip(&dirs.label).map(|(a, b)| a * b).sum::<f64>()
                - m.iter().zip(&dirs.label).map(|(a, b)| a * b).sum::<f64>();
            assert!((proj - f64::from(r.label)).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_posts: 50,
            target_names: vec!["a".into(), "b".into(), "c".into()],
            label_rates: vec![0.2, 0.5, 0.8],
            signal: 2.0,
            bias: 1.0,
            noise: 0.5,
            embedding_dim: 8,
            seed: 4,
        };
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a, synth_generate(&spec).unwrap());
        assert!(a.iter().all(|r| (1..=3).contains(&r.targets.len())));
    }
}
