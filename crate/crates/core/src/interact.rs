//! Interaction prediction: concatenated user ⊕ item embeddings labelled 1
//! for observed pairs and 0 for sampled unobserved ones.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SplitBundle;
use crate::embedsvc::EmbeddingPair;
use crate::evalmetrics::{classification_metrics, ClassificationMetrics, MetricsError};
use crate::neuralcore::{bce_loss, train_epochs, Dataset, NetError, Network, NetworkSpec, OptimizerConfig, Tensor};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum InteractError {
    #[error("missing embeddings for {0:?}")]
    CoverageGap(Vec<String>),
    #[error("no training pairs")]
    Empty,
    #[error("feature length {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown classifier {0:?} (expected linear, mlp or cnn)")]
    UnknownKind(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user_id: String,
    pub item_id: String,
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSets {
    pub train: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    /// Positives left without a negative because the user has seen every item.
    pub skipped_negatives: usize,
    pub warnings: Vec<String>,
}

impl PairSets {
    pub fn feature_len(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(|p| p.features.len())
    }
}

/// One positive per training interaction and per test entry, each followed
/// by one negative drawn uniformly from the items the user never touched in
/// the full store.
pub fn build_pairs(splits: &SplitBundle, emb: &EmbeddingPair, seed: u64) -> Result<PairSets, InteractError> {
    let catalog: Vec<&str> = splits.items().collect();
    let mut missing: Vec<String> = splits.users().filter(|u| emb.users.get(u).is_none()).map(|u| format!("user:{u}")).collect();
    missing.extend(catalog.iter().filter(|i| emb.items.get(i).is_none()).map(|i| format!("item:{i}")));
    if !missing.is_empty() {
        return Err(InteractError::CoverageGap(missing));
    }
    let features = |u: &str, i: &str| -> Vec<f64> {
        let mut f = emb.users.get(u).unwrap().to_vec();
        f.extend_from_slice(emb.items.get(i).unwrap());
        f
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PairSets::default();
    for (user, rows) in &splits.user_train {
        let seen = seen_items(splits, user);
        let pool: Vec<&str> = catalog.iter().copied().filter(|i| !seen.contains(*i)).collect();
        let positives = rows.iter().map(|r| (r.item_id.as_str(), false)).chain(splits.test.get(user).map(|i| (i.as_str(), true)));
        for (item, is_test) in positives {
            let target = if is_test { &mut out.test } else { &mut out.train };
            target.push(LabeledPair { user_id: user.clone(), item_id: item.to_string(), features: features(user, item), label: 1 });
            if pool.is_empty() {
                out.skipped_negatives += 1;
                continue;
            }
            let neg = pool[rng.gen_range(0..pool.len())];
            target.push(LabeledPair { user_id: user.clone(), item_id: neg.to_string(), features: features(user, neg), label: 0 });
        }
        if pool.is_empty() {
            let msg = format!("user {user} interacted with every catalog item; no negatives");
            log::warn!("{msg}");
            out.warnings.push(msg);
        }
    }
    if out.train.is_empty() {
        return Err(InteractError::Empty);
    }
    Ok(out)
}

/// Full-store history when present, else everything the splits show.
pub(crate) fn seen_items<'a>(splits: &'a SplitBundle, user: &str) -> BTreeSet<&'a str> {
    match splits.history.get(user) {
        Some(h) => h.iter().map(String::as_str).collect(),
        None => splits.user_train[user]
            .iter()
            .map(|r| r.item_id.as_str())
            .chain(splits.validation.get(user).map(String::as_str))
            .chain(splits.test.get(user).map(String::as_str))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Linear,
    Mlp,
    Cnn,
}

impl ClassifierKind {
    pub fn spec(self, input: usize, seed: u64) -> Result<NetworkSpec, NetError> {
        match self {
            ClassifierKind::Linear => Ok(NetworkSpec::linear(input, seed)),
            ClassifierKind::Mlp => Ok(NetworkSpec::mlp(input, seed)),
            ClassifierKind::Cnn => NetworkSpec::cnn(input, seed),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Linear => "linear",
            ClassifierKind::Mlp => "mlp",
            ClassifierKind::Cnn => "cnn",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = InteractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ClassifierKind::Linear),
            "mlp" => Ok(ClassifierKind::Mlp),
            "cnn" => Ok(ClassifierKind::Cnn),
            other => Err(InteractError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResult {
    pub metrics: ClassificationMetrics,
    pub epoch_losses: Vec<f64>,
    /// Set when training stopped on a non-finite or runaway loss, or ended
    /// with a training loss above the base-rate loss. Metrics are then
    /// those of the network as it stood.
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
}

fn dataset(pairs: &[LabeledPair]) -> Result<Dataset, NetError> {
    let f = pairs.first().map_or(0, |p| p.features.len());
    let mut values = Vec::with_capacity(pairs.len() * f);
    for p in pairs {
        if p.features.len() != f {
            return Err(NetError::ShapeMismatch { expected: f, got: p.features.len() });
        }
        values.extend_from_slice(&p.features);
    }
    Dataset::new(Tensor::matrix(pairs.len(), f, values)?, pairs.iter().map(|p| p.label as f64).collect())
}

/// Binary entropy of the label mean: the loss of always predicting the
/// base rate.
pub fn base_rate_loss(labels: &[f64]) -> f64 {
    let p = labels.iter().sum::<f64>() / labels.len() as f64;
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

/// A trained network that fits its own training set worse than the
/// constant base-rate predictor has not converged.
fn worse_than_base_rate(net: &Network, train: &Dataset) -> Result<Option<String>, NetError> {
    let floor = base_rate_loss(&train.y);
    if floor == 0.0 {
        return Ok(None);
    }
    let (loss, _) = bce_loss(&net.predict(&train.x)?.values, &train.y)?;
    if loss > floor {
        log::warn!("classifier did not converge: training loss {loss} above base-rate loss {floor}");
        return Ok(Some(format!("not converged: training loss {loss} above base-rate loss {floor}")));
    }
    Ok(None)
}

/// Predicts 1 iff the output exceeds [`THRESHOLD`].
pub fn predict_labels(net: &Network, pairs: &[LabeledPair]) -> Result<Vec<u8>, NetError> {
    let data = dataset(pairs)?;
    Ok(net.predict(&data.x)?.values.iter().map(|&p| (p > THRESHOLD) as u8).collect())
}

/// Trains a fresh network of `kind` (initialised from `cfg.seed`) on the
/// training pairs and scores it on the test pairs.
pub fn train_eval_classifier(kind: ClassifierKind, pairs: &PairSets, cfg: &OptimizerConfig) -> Result<ClassifierResult, InteractError> {
    let dim = pairs.feature_len().ok_or(InteractError::Empty)?;
    let spec = kind.spec(dim, cfg.seed)?;
    train_eval_network(Network::new(spec)?, pairs, cfg)
}

pub fn train_eval_network(mut net: Network, pairs: &PairSets, cfg: &OptimizerConfig) -> Result<ClassifierResult, InteractError> {
    if pairs.train.is_empty() || pairs.test.is_empty() {
        return Err(InteractError::Empty);
    }
    for p in pairs.train.iter().chain(&pairs.test) {
        if p.features.len() != net.input_dim() {
            return Err(InteractError::DimensionMismatch { expected: net.input_dim(), got: p.features.len() });
        }
    }
    let train = dataset(&pairs.train)?;
    let (epoch_losses, divergence) = match train_epochs(&mut net, &train, cfg) {
        Ok(trace) => (trace, None),
        Err(NetError::Diverged { epoch, loss, trace }) => {
            log::warn!("classifier diverged at epoch {epoch} (loss {loss})");
            (trace, Some(format!("epoch {epoch}: loss {loss}")))
        }
        Err(e) => return Err(e.into()),
    };
    let divergence = match divergence {
        Some(d) => Some(d),
        None => worse_than_base_rate(&net, &train)?,
    };
    let preds = predict_labels(&net, &pairs.test)?;
    let labels: Vec<u8> = pairs.test.iter().map(|p| p.label).collect();
    Ok(ClassifierResult { metrics: classification_metrics(&preds, &labels)?, epoch_losses, diverged: divergence.is_some(), divergence })
}
