//! Direct recommendation: BPR-MF and NCF towers over user/item tables that
//! start either random or from injected embeddings, frozen or trainable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SplitBundle;
use crate::embedsvc::EmbeddingPair;
use crate::evalmetrics::{ranking_metrics, MetricsError, RankingMetrics};
use crate::interact::seen_items;
use crate::neuralcore::{
    bce_logit_grad, sigmoid, LayerSpec, Mode, NetError, Network, NetworkSpec, Optimizer, OptimizerConfig, OptimizerKind, Tensor,
};

/// Every observed interaction counts the same, whatever its rating.
pub const UNIFORM_RATING: f64 = 1.0;
pub const RANDOM_INIT_BOUND: f64 = 0.01;
const SCORE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("missing embeddings for {0:?}")]
    CoverageGap(Vec<String>),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("ground truth {item} missing from the candidates of {user}")]
    GroundTruthMissing { user: String, item: String },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64, trace: Vec<f64> },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RankerKind {
    #[serde(rename = "bpr-mf")]
    BprMf,
    #[serde(rename = "ncf-linear")]
    NcfLinear,
    #[serde(rename = "ncf-mlp")]
    NcfMlp,
    #[serde(rename = "ncf-cnn")]
    NcfCnn,
}

impl RankerKind {
    pub const ALL: [RankerKind; 4] = [RankerKind::BprMf, RankerKind::NcfLinear, RankerKind::NcfMlp, RankerKind::NcfCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            RankerKind::BprMf => "bpr-mf",
            RankerKind::NcfLinear => "ncf-linear",
            RankerKind::NcfMlp => "ncf-mlp",
            RankerKind::NcfCnn => "ncf-cnn",
        }
    }

    /// Tower over the concatenated pair; `None` for BPR.
    pub fn tower_spec(self, dim: usize, seed: u64) -> Result<Option<NetworkSpec>, NetError> {
        Ok(match self {
            RankerKind::BprMf => None,
            RankerKind::NcfLinear => Some(NetworkSpec::linear(2 * dim, seed)),
            RankerKind::NcfMlp => Some(NetworkSpec::mlp(2 * dim, seed)),
            RankerKind::NcfCnn => Some(NetworkSpec::cnn(2 * dim, seed)?),
        })
    }
}

impl fmt::Display for RankerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RankerKind {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RankerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RankError::InvalidConfig(format!("unknown ranking model {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Random,
    Injected,
}

/// `random` (trainable), `fixed` (injected, frozen) or `fine-tuned`
/// (injected, trainable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InjectionMode {
    pub source: EmbeddingSource,
    pub trainable: bool,
}

impl InjectionMode {
    pub const RANDOM: InjectionMode = InjectionMode { source: EmbeddingSource::Random, trainable: true };
    pub const FIXED: InjectionMode = InjectionMode { source: EmbeddingSource::Injected, trainable: false };
    pub const FINE_TUNED: InjectionMode = InjectionMode { source: EmbeddingSource::Injected, trainable: true };

    pub fn name(self) -> &'static str {
        match (self.source, self.trainable) {
            (EmbeddingSource::Random, _) => "random",
            (EmbeddingSource::Injected, false) => "fixed",
            (EmbeddingSource::Injected, true) => "fine-tuned",
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(InjectionMode::RANDOM),
            "fixed" => Ok(InjectionMode::FIXED),
            "fine-tuned" | "finetuned" => Ok(InjectionMode::FINE_TUNED),
            other => Err(format!("unknown mode {other:?} (expected random, fixed or fine-tuned)")),
        }
    }
}

impl TryFrom<String> for InjectionMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InjectionMode> for String {
    fn from(m: InjectionMode) -> String {
        m.name().to_string()
    }
}

/// Row-major `n × dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Table {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    fn random(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Table {
        Table { dim, values: (0..n * dim).map(|_| rng.gen_range(-RANDOM_INIT_BOUND..RANDOM_INIT_BOUND)).collect() }
    }
}

pub enum Init<'a> {
    Random { dim: usize, seed: u64 },
    Injected(&'a EmbeddingPair),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    pub optimizer: OptimizerConfig,
    /// L2 weight in the BPR objective.
    pub bpr_lambda: f64,
    /// Sampled negatives per positive for NCF, redrawn every epoch.
    pub neg_per_pos: usize,
    /// Trainable per-item bias for BPR, so that frozen tables still leave
    /// something to learn. A per-user bias would cancel in the pairwise
    /// difference.
    pub item_bias: bool,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig { optimizer: OptimizerConfig::default(), bpr_lambda: 0.01, neg_per_pos: 4, item_bias: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    pub kind: RankerKind,
    pub mode: InjectionMode,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    pub users: Table,
    pub items: Table,
    pub item_bias: Option<Vec<f64>>,
    pub tower: Option<Network>,
}

/// Builds tables for the cohort users and the item catalog. `seed` drives
/// random tables (when `init` carries none) and the tower initialisation.
pub fn init_model(
    kind: RankerKind,
    splits: &SplitBundle,
    init: Init<'_>,
    mode: InjectionMode,
    cfg: &RankConfig,
    seed: u64,
) -> Result<RankingModel, RankError> {
    let user_ids: Vec<String> = splits.users().map(str::to_string).collect();
    let item_ids: Vec<String> = splits.items().map(str::to_string).collect();
    let (users, items) = match (init, mode.source) {
        (Init::Random { dim, seed }, EmbeddingSource::Random) => {
            if !mode.trainable {
                return Err(RankError::InvalidConfig("random tables must be trainable".into()));
            }
            if dim == 0 {
                return Err(RankError::InvalidConfig("random table dimension is 0".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Table::random(user_ids.len(), dim, &mut rng);
            (u, Table::random(item_ids.len(), dim, &mut rng))
        }
        (Init::Injected(emb), EmbeddingSource::Injected) => {
            let mut missing: Vec<String> = user_ids.iter().filter(|u| emb.users.get(u).is_none()).map(|u| format!("user:{u}")).collect();
            missing.extend(item_ids.iter().filter(|i| emb.items.get(i).is_none()).map(|i| format!("item:{i}")));
            if !missing.is_empty() {
                return Err(RankError::CoverageGap(missing));
            }
            if emb.users.dim != emb.items.dim {
                return Err(RankError::InvalidConfig("user and item embeddings differ in dimension".into()));
            }
            let copy = |ids: &[String], set: &crate::embedsvc::EmbeddingSet| Table {
                dim: set.dim,
                values: ids.iter().flat_map(|id| set.get(id).unwrap().iter().copied()).collect(),
            };
            (copy(&user_ids, &emb.users), copy(&item_ids, &emb.items))
        }
        _ => return Err(RankError::InvalidConfig(format!("initialisation does not match mode {mode}"))),
    };
    let tower = kind.tower_spec(users.dim, seed)?.map(Network::new).transpose()?;
    let item_bias = (kind == RankerKind::BprMf && cfg.item_bias).then(|| vec![0.0; item_ids.len()]);
    Ok(RankingModel {
        kind,
        mode,
        user_index: user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect(),
        item_index: item_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect(),
        user_ids,
        item_ids,
        users,
        items,
        item_bias,
        tower,
    })
}

impl RankingModel {
    pub fn dim(&self) -> usize {
        self.users.dim
    }

    pub fn user(&self, id: &str) -> Result<usize, RankError> {
        self.user_index.get(id).copied().ok_or_else(|| RankError::UnknownUser(id.to_string()))
    }

    pub fn item(&self, id: &str) -> Result<usize, RankError> {
        self.item_index.get(id).copied().ok_or_else(|| RankError::UnknownItem(id.to_string()))
    }

    /// Scores for one user over the given item indices.
    pub fn scores(&self, user: usize, items: &[usize]) -> Result<Vec<f64>, RankError> {
        self.scores_with(user, items, None)
    }

    /// Width of the tower's first dense layer when it reads the raw pair.
    fn split_width(&self) -> Option<usize> {
        let net = self.tower.as_ref()?;
        match net.spec.layers.first() {
            Some(LayerSpec::Dense { input, output }) if *input == 2 * self.dim() => Some(*output),
            _ => None,
        }
    }

    /// Item half of the first dense layer, `Σ_k q_i[k] W[d + k, :]`.
    fn project_item(&self, width: usize, item: usize) -> Vec<f64> {
        let w = &self.tower.as_ref().unwrap().params[0].w;
        let d = self.dim();
        let mut out = vec![0.0; width];
        for (k, &x) in self.items.row(item).iter().enumerate() {
            if x != 0.0 {
                axpy(&mut out, x, &w[(d + k) * width..(d + k + 1) * width]);
            }
        }
        out
    }

    /// First-layer projections of every item, reusable across users.
    pub fn item_projection(&self) -> Option<ItemProjection> {
        let width = self.split_width()?;
        let values = (0..self.item_ids.len()).flat_map(|i| self.project_item(width, i)).collect();
        Some(ItemProjection { width, values })
    }

    /// A tower whose first layer is dense over `[p_u; q_i]` is evaluated as
    /// `(b + W_u p_u) + W_i q_i`, with the item half computed once per item.
    pub fn scores_with(&self, user: usize, items: &[usize], cached: Option<&ItemProjection>) -> Result<Vec<f64>, RankError> {
        let pu = self.users.row(user);
        let Some(net) = &self.tower else {
            return Ok(items
                .iter()
                .map(|&i| {
                    let bias = self.item_bias.as_ref().map_or(0.0, |b| b[i]);
                    dot(pu, self.items.row(i)) + bias
                })
                .collect());
        };
        let d = self.dim();
        let mut out = Vec::with_capacity(items.len());
        match self.split_width() {
            Some(width) => {
                let p = &net.params[0];
                let mut base = p.b.clone();
                for (k, &x) in pu.iter().enumerate() {
                    if x != 0.0 {
                        axpy(&mut base, x, &p.w[k * width..(k + 1) * width]);
                    }
                }
                for chunk in items.chunks(SCORE_CHUNK) {
                    let mut h = Vec::with_capacity(chunk.len() * width);
                    for &i in chunk {
                        let proj = match cached {
                            Some(c) => std::borrow::Cow::Borrowed(c.row(i)),
                            None => std::borrow::Cow::Owned(self.project_item(width, i)),
                        };
                        h.extend(base.iter().zip(proj.iter()).map(|(a, b)| a + b));
                    }
                    out.extend(net.predict_from(1, &Tensor::matrix(chunk.len(), width, h)?)?.values);
                }
            }
            None => {
                for chunk in items.chunks(SCORE_CHUNK) {
                    let mut x = Vec::with_capacity(chunk.len() * 2 * d);
                    for &i in chunk {
                        x.extend_from_slice(pu);
                        x.extend_from_slice(self.items.row(i));
                    }
                    out.extend(net.predict(&Tensor::matrix(chunk.len(), 2 * d, x)?)?.values);
                }
            }
        }
        Ok(out)
    }
}

pub struct ItemProjection {
    width: usize,
    values: Vec<f64>,
}

impl ItemProjection {
    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

/// Descending score, ties by item id.
pub fn rank(model: &RankingModel, user_id: &str, candidates: &[&str]) -> Result<RankedList, RankError> {
    rank_with(model, user_id, candidates, None)
}

fn rank_with(model: &RankingModel, user_id: &str, candidates: &[&str], cached: Option<&ItemProjection>) -> Result<RankedList, RankError> {
    let u = model.user(user_id)?;
    let idx: Vec<usize> = candidates.iter().map(|c| model.item(c)).collect::<Result<_, _>>()?;
    let scores = model.scores_with(u, &idx, cached)?;
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| candidates[a].cmp(candidates[b])));
    Ok(RankedList {
        user_id: user_id.to_string(),
        items: order.iter().map(|&k| candidates[k].to_string()).collect(),
        scores: order.iter().map(|&k| scores[k]).collect(),
    })
}

/// Loss and gradients of one BPR triple:
/// `−ln σ(x) + λ/2 (‖p_u‖² + ‖q_i‖² + ‖q_j‖² + b_i² + b_j²)` with
/// `x = ⟨p_u, q_i − q_j⟩ + b_i − b_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleGrad {
    pub loss: f64,
    pub x: f64,
    pub d_pu: Vec<f64>,
    pub d_qi: Vec<f64>,
    pub d_qj: Vec<f64>,
    pub d_bi: f64,
    pub d_bj: f64,
}

pub fn bpr_triple_loss(pu: &[f64], qi: &[f64], qj: &[f64], bi: f64, bj: f64, lambda: f64) -> TripleGrad {
    let x = pu.iter().zip(qi.iter().zip(qj)).map(|(p, (a, b))| p * (a - b)).sum::<f64>() + bi - bj;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let log_sig = if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
    let loss = -log_sig + 0.5 * lambda * (sq(pu) + sq(qi) + sq(qj) + bi * bi + bj * bj);
    // dL/dx
    let g = -sigmoid(-x);
    TripleGrad {
        loss,
        x,
        d_pu: pu.iter().zip(qi.iter().zip(qj)).map(|(p, (a, b))| g * (a - b) + lambda * p).collect(),
        d_qi: pu.iter().zip(qi).map(|(p, a)| g * p + lambda * a).collect(),
        d_qj: pu.iter().zip(qj).map(|(p, b)| -g * p + lambda * b).collect(),
        d_bi: g + lambda * bi,
        d_bj: -g + lambda * bj,
    }
}

/// Observed training pairs as indices, plus each user's sorted train items.
struct TrainIndex {
    pairs: Vec<(usize, usize)>,
    seen: Vec<Vec<usize>>,
}

fn train_index(model: &RankingModel, splits: &SplitBundle) -> Result<TrainIndex, RankError> {
    let mut pairs = Vec::new();
    let mut seen = vec![Vec::new(); model.user_ids.len()];
    for (user, rows) in &splits.user_train {
        let u = model.user(user)?;
        for r in rows {
            let i = model.item(&r.item_id)?;
            pairs.push((u, i));
            seen[u].push(i);
        }
    }
    for s in &mut seen {
        s.sort_unstable();
        s.dedup();
    }
    Ok(TrainIndex { pairs, seen })
}

/// Uniform draw from the items outside `seen`; `None` if there are none.
fn sample_negative(rng: &mut ChaCha8Rng, n_items: usize, seen: &[usize]) -> Option<usize> {
    if seen.len() >= n_items {
        return None;
    }
    loop {
        let j = rng.gen_range(0..n_items);
        if seen.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

fn check_epoch(epoch: usize, loss: f64, trace: &mut Vec<f64>, ceiling: Option<f64>, params_ok: bool) -> Result<(), RankError> {
    trace.push(loss);
    if !loss.is_finite() || !params_ok || ceiling.is_some_and(|c| loss > c) {
        return Err(RankError::Diverged { epoch, loss, trace: std::mem::take(trace) });
    }
    Ok(())
}

/// Trains with the objective that matches the model kind.
pub fn train(model: &mut RankingModel, splits: &SplitBundle, cfg: &RankConfig) -> Result<Vec<f64>, RankError> {
    match model.kind {
        RankerKind::BprMf => bpr_train(model, splits, cfg),
        _ => ncf_train(model, splits, cfg),
    }
}

/// Plain SGD over (u, i⁺, j⁻) triples; one shuffled pass over the observed
/// pairs per epoch. Returns the mean triple loss of every epoch.
pub fn bpr_train(model: &mut RankingModel, splits: &SplitBundle, cfg: &RankConfig) -> Result<Vec<f64>, RankError> {
    if model.kind != RankerKind::BprMf {
        return Err(RankError::InvalidConfig(format!("bpr_train on {}", model.kind)));
    }
    let opt = &cfg.optimizer;
    opt.validate()?;
    let idx = train_index(model, splits)?;
    if idx.pairs.is_empty() {
        return Err(RankError::InvalidConfig("no training interactions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..idx.pairs.len()).collect();
    let lr = opt.learning_rate * UNIFORM_RATING;
    let n_items = model.item_ids.len();
    let mut trace = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for &k in &order {
            let (u, i) = idx.pairs[k];
            let Some(j) = sample_negative(&mut rng, n_items, &idx.seen[u]) else { continue };
            let (bi, bj) = model.item_bias.as_ref().map_or((0.0, 0.0), |b| (b[i], b[j]));
            let g = bpr_triple_loss(model.users.row(u), model.items.row(i), model.items.row(j), bi, bj, cfg.bpr_lambda);
            total += g.loss * UNIFORM_RATING;
            count += 1;
            if model.mode.trainable {
                axpy(model.users.row_mut(u), -lr, &g.d_pu);
                axpy(model.items.row_mut(i), -lr, &g.d_qi);
                axpy(model.items.row_mut(j), -lr, &g.d_qj);
            }
            if let Some(b) = model.item_bias.as_mut() {
                b[i] -= lr * g.d_bi;
                b[j] -= lr * g.d_bj;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ok = model.users.values.iter().chain(&model.items.values).all(|v| v.is_finite());
        check_epoch(epoch, loss, &mut trace, opt.loss_ceiling, ok)?;
    }
    Ok(trace)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Pointwise BCE on the tower. Each epoch pairs every observed interaction
/// (label 1) with `neg_per_pos` fresh negatives (label 0). Trainable tables
/// follow the same optimizer as the tower, applied row-sparsely.
pub fn ncf_train(model: &mut RankingModel, splits: &SplitBundle, cfg: &RankConfig) -> Result<Vec<f64>, RankError> {
    let opt = &cfg.optimizer;
    opt.validate()?;
    let idx = train_index(model, splits)?;
    if idx.pairs.is_empty() {
        return Err(RankError::InvalidConfig("no training interactions".into()));
    }
    let mut tower = model.tower.take().ok_or_else(|| RankError::InvalidConfig(format!("ncf_train on {}", model.kind)))?;
    let result = ncf_epochs(model, &mut tower, &idx, cfg);
    model.tower = Some(tower);
    result
}

/// Row-sparse version of the tower optimizer for embedding tables. Rows not
/// touched by a batch are caught up in closed form when next touched (or at
/// the end), which equals stepping every row with a zero gradient. Weight
/// decay is not applied to tables.
struct TableOptimizer {
    kind: OptimizerKind,
    lr: f64,
    mu: f64,
    dim: usize,
    velocity: Vec<f64>,
    last: Vec<u64>,
    step: u64,
}

impl TableOptimizer {
    fn new(cfg: &OptimizerConfig, table: &Table) -> Self {
        let rows = table.rows();
        TableOptimizer {
            kind: cfg.kind,
            lr: cfg.learning_rate,
            mu: cfg.momentum,
            dim: table.dim,
            velocity: if cfg.kind == OptimizerKind::Momentum { vec![0.0; rows * table.dim] } else { Vec::new() },
            last: vec![0; rows],
            step: 0,
        }
    }

    fn catch_up(&mut self, table: &mut Table, row: usize, upto: u64) {
        let idle = upto - self.last[row];
        if self.kind == OptimizerKind::Momentum && idle > 0 {
            let v = &mut self.velocity[row * self.dim..(row + 1) * self.dim];
            let decay = self.mu.powi(idle as i32);
            let drift = if self.mu == 0.0 { 0.0 } else { self.mu * (1.0 - decay) / (1.0 - self.mu) };
            for (x, vx) in table.row_mut(row).iter_mut().zip(v.iter_mut()) {
                *x += drift * *vx;
                *vx *= decay;
            }
        }
        self.last[row] = upto;
    }

    /// One optimizer step given summed gradients for the touched rows.
    fn apply(&mut self, table: &mut Table, grads: &BTreeMap<usize, Vec<f64>>) {
        self.step += 1;
        for (&row, g) in grads {
            self.catch_up(table, row, self.step - 1);
            match self.kind {
                OptimizerKind::Sgd => axpy(table.row_mut(row), -self.lr, g),
                OptimizerKind::Momentum => {
                    let v = &mut self.velocity[row * self.dim..(row + 1) * self.dim];
                    for ((x, vx), gx) in table.row_mut(row).iter_mut().zip(v.iter_mut()).zip(g) {
                        *vx = self.mu * *vx - self.lr * gx;
                        *x += *vx;
                    }
                }
            }
            self.last[row] = self.step;
        }
    }

    fn finish(&mut self, table: &mut Table) {
        for row in 0..self.last.len() {
            self.catch_up(table, row, self.step);
        }
    }
}

fn accumulate(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, g: &[f64]) {
    match map.get_mut(&row) {
        Some(acc) => axpy(acc, 1.0, g),
        None => {
            map.insert(row, g.to_vec());
        }
    }
}

fn ncf_epochs(model: &mut RankingModel, tower: &mut Network, idx: &TrainIndex, cfg: &RankConfig) -> Result<Vec<f64>, RankError> {
    let opt = &cfg.optimizer;
    let d = model.dim();
    let n_items = model.item_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut optimizer = Optimizer::new(opt, &tower.params);
    let mut user_opt = TableOptimizer::new(opt, &model.users);
    let mut item_opt = TableOptimizer::new(opt, &model.items);
    let mut trace = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let mut samples: Vec<(usize, usize, f64)> = Vec::with_capacity(idx.pairs.len() * (1 + cfg.neg_per_pos));
        for &(u, i) in &idx.pairs {
            samples.push((u, i, UNIFORM_RATING));
            for _ in 0..cfg.neg_per_pos {
                if let Some(j) = sample_negative(&mut rng, n_items, &idx.seen[u]) {
                    samples.push((u, j, 0.0));
                }
            }
        }
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(opt.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * 2 * d);
            for &(u, i, _) in batch {
                x.extend_from_slice(model.users.row(u));
                x.extend_from_slice(model.items.row(i));
            }
            let y: Vec<f64> = batch.iter().map(|s| s.2).collect();
            let cache = tower.forward(&Tensor::matrix(batch.len(), 2 * d, x)?, Mode::Train(&mut rng))?;
            let (loss, grad) = bce_logit_grad(&cache.output().values, &y)?;
            total += loss * batch.len() as f64;
            let grad = Tensor::matrix(batch.len(), 1, grad)?;
            let grads =
                if model.mode.trainable { tower.backward_logits(&cache, &grad)? } else { tower.backward_logits_params(&cache, &grad)? };
            optimizer.step(&mut tower.params, &grads.params);
            if let Some(input) = &grads.input {
                let (mut gu, mut gi) = (BTreeMap::new(), BTreeMap::new());
                for (k, &(u, i, _)) in batch.iter().enumerate() {
                    let g = &input.values[k * 2 * d..(k + 1) * 2 * d];
                    accumulate(&mut gu, u, &g[..d]);
                    accumulate(&mut gi, i, &g[d..]);
                }
                user_opt.apply(&mut model.users, &gu);
                item_opt.apply(&mut model.items, &gi);
            }
        }
        if model.mode.trainable {
            user_opt.finish(&mut model.users);
            item_opt.finish(&mut model.items);
        }
        let loss = total / samples.len() as f64;
        let ok = tower.all_finite() && model.users.values.iter().chain(&model.items.values).all(|v| v.is_finite());
        check_epoch(epoch, loss, &mut trace, opt.loss_ceiling, ok)?;
    }
    Ok(trace)
}

/// Which items are ranked for each test user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum CandidatePolicy {
    /// The whole catalog minus the user's training items.
    #[default]
    Full,
    /// The ground truth plus N items the user never interacted with.
    Sampled(usize),
}

impl FromStr for CandidatePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(CandidatePolicy::Full);
        }
        s.strip_prefix("sampled:")
            .and_then(|n| n.parse().ok())
            .filter(|&n| n > 0)
            .map(CandidatePolicy::Sampled)
            .ok_or_else(|| format!("bad candidate policy {s:?} (expected full or sampled:N)"))
    }
}

impl fmt::Display for CandidatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidatePolicy::Full => f.write_str("full"),
            CandidatePolicy::Sampled(n) => write!(f, "sampled:{n}"),
        }
    }
}

impl TryFrom<String> for CandidatePolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CandidatePolicy> for String {
    fn from(p: CandidatePolicy) -> String {
        p.to_string()
    }
}

/// Candidate lists per test user. The ground truth is always included.
pub fn candidates(splits: &SplitBundle, policy: CandidatePolicy, seed: u64) -> Result<BTreeMap<String, Vec<String>>, RankError> {
    let catalog: Vec<&str> = splits.items().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (user, truth) in &splits.test {
        let train: BTreeSet<&str> = splits.user_train.get(user).map(|r| r.iter().map(|x| x.item_id.as_str()).collect()).unwrap_or_default();
        let list: Vec<String> = match policy {
            CandidatePolicy::Full => {
                catalog.iter().filter(|i| **i == truth.as_str() || !train.contains(*i)).map(|i| i.to_string()).collect()
            }
            CandidatePolicy::Sampled(n) => {
                let seen = if splits.user_train.contains_key(user) { seen_items(splits, user) } else { train.clone() };
                let pool: Vec<&str> =
                    catalog.iter().copied().filter(|i| *i != truth.as_str() && !seen.contains(i) && !train.contains(i)).collect();
                let take = n.min(pool.len());
                let mut picked: Vec<String> = index::sample(&mut rng, pool.len(), take).into_iter().map(|k| pool[k].to_string()).collect();
                picked.push(truth.clone());
                picked.sort();
                picked
            }
        };
        if !list.iter().any(|i| i == truth) {
            return Err(RankError::GroundTruthMissing { user: user.clone(), item: truth.clone() });
        }
        out.insert(user.clone(), list);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: RankingMetrics,
    pub ranks: BTreeMap<String, usize>,
    pub candidates: CandidatePolicy,
}

/// Ranks every test user's candidates and scores the held-out item.
pub fn evaluate(
    model: &RankingModel,
    splits: &SplitBundle,
    policy: CandidatePolicy,
    ks: &[usize],
    seed: u64,
) -> Result<Evaluation, RankError> {
    let lists = candidates(splits, policy, seed)?;
    let cached = model.item_projection();
    let mut ranks = BTreeMap::new();
    for (user, list) in &lists {
        let truth = &splits.test[user];
        let refs: Vec<&str> = list.iter().map(String::as_str).collect();
        let ranked = rank_with(model, user, &refs, cached.as_ref())?;
        let pos = ranked.items.iter().position(|i| i == truth).expect("ground truth is a candidate");
        ranks.insert(user.clone(), pos + 1);
    }
    let values: Vec<usize> = ranks.values().copied().collect();
    Ok(Evaluation { metrics: ranking_metrics(&values, ks)?, ranks, candidates: policy })
}
