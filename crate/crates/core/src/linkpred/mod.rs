//! Dynamic link prediction with a recurrent graph network trained in the
//! live-update regime, scored by AUPRC.

pub mod model;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netbuild::NetworkSnapshot;

pub use model::{
    backward, forward, forward_with_states, pair_loss, parameter_count, score_rows, Checkpoint, Embeddings,
    GraphInput, Mat, NodeStateBank, TgnnModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TgnnConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub early_stop: f64,
    pub optimizer: Optimizer,
    /// Draw fresh negatives every epoch; otherwise one draw per snapshot.
    pub resample_negatives: bool,
}

impl Default for TgnnConfig {
    fn default() -> Self {
        TgnnConfig {
            epochs: 50,
            learning_rate: 0.01,
            early_stop: 1e-4,
            optimizer: Optimizer::Sgd,
            resample_negatives: true,
        }
    }
}

impl TgnnConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TgnnConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if self.early_stop.is_nan() {
            return Err(Error::Config("early_stop must be a number".into()));
        }
        Ok(())
    }
}

/// Stepwise AUPRC: one precision/recall step per distinct score, so tied
/// scores enter together.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter("scores and labels differ in length".into()));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        area += tp as f64 / seen as f64 * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Date of the snapshot whose links were predicted.
    pub date: NaiveDate,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auprc: Option<f64>,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "date", "n_nodes", "n_edges", "n_pos", "n_neg", "auprc", "epochs", "final_loss", "note",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                r.n_nodes.to_string(),
                r.n_edges.to_string(),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
                opt(r.auprc),
                r.epochs.to_string(),
                opt(r.final_loss),
                r.note.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unordered node pairs linked in `snapshot`, as indices into `ids`.
fn positive_pairs(snapshot: &NetworkSnapshot, ids: &[String]) -> Vec<(usize, usize)> {
    let pos = |id: &str| ids.binary_search_by(|x| x.as_str().cmp(id)).ok();
    let set: BTreeSet<(usize, usize)> = snapshot
        .links
        .iter()
        .filter_map(|l| {
            let (a, b) = (pos(&l.source)?, pos(&l.target)?);
            (a != b).then(|| (a.min(b), a.max(b)))
        })
        .collect();
    set.into_iter().collect()
}

/// Up to `k` distinct unordered non-edges drawn uniformly.
fn sample_negatives(n: usize, positives: &[(usize, usize)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let edges: HashSet<(usize, usize)> = positives.iter().copied().collect();
    let total = n * n.saturating_sub(1) / 2;
    let available = total - edges.len();
    if available <= k {
        let mut all = Vec::with_capacity(available);
        for a in 0..n {
            for b in a + 1..n {
                if !edges.contains(&(a, b)) {
                    all.push((a, b));
                }
            }
        }
        return all;
    }
    let mut chosen = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while chosen.len() < k {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if !edges.contains(&pair) && seen.insert(pair) {
            chosen.push(pair);
        }
    }
    chosen
}

fn labelled(pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    pos.iter()
        .map(|&(a, b)| (a, b, 1.0))
        .chain(neg.iter().map(|&(a, b)| (a, b, 0.0)))
        .collect()
}

struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_gradient(model: &mut TgnnModel, grad: &TgnnModel, config: &TgnnConfig, adam: &mut Option<AdamState>) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, (_, g)) in model.tensors_mut().into_iter().zip(grad.tensors()) {
                *p -= g * lr;
            }
        }
        Optimizer::Adam => {
            let state = adam.get_or_insert_with(|| AdamState {
                m: grad.tensors().iter().map(|(_, g)| Mat::zeros(g.nrows(), g.ncols())).collect(),
                v: grad.tensors().iter().map(|(_, g)| Mat::zeros(g.nrows(), g.ncols())).collect(),
                t: 0,
            });
            state.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(state.t);
            let c2 = 1.0 - ADAM_BETA2.powi(state.t);
            for (k, (p, (_, g))) in model.tensors_mut().into_iter().zip(grad.tensors()).enumerate() {
                state.m[k] = &state.m[k] * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
                state.v[k] = &state.v[k] * ADAM_BETA2 + g.map(|x| x * x) * (1.0 - ADAM_BETA2);
                let step = state.m[k].zip_map(&state.v[k], |m, v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
                *p -= step * lr;
            }
        }
    }
}

/// Loss and parameter gradients for labelled pairs scored on embeddings
/// of `input` computed from fixed previous states.
pub fn loss_and_gradient(
    model: &TgnnModel,
    input: &GraphInput,
    prev1: &Mat,
    prev2: &Mat,
    pairs: &[(usize, usize, f64)],
) -> (f64, TgnnModel) {
    let out = forward_with_states(model, input, prev1, prev2);
    let (loss, d_emb) = pair_loss(&out.embeddings, pairs);
    (loss, backward(model, input, &out.cache, &d_emb))
}

/// Live update: at each step the model embeds snapshot `τ`, is scored on
/// the links of `τ+1`, then trains on them; node states are committed
/// with the updated weights before moving on.
pub fn train_live(
    model: &mut TgnnModel,
    bank: &mut NodeStateBank,
    snapshots: &[NetworkSnapshot],
    config: &TgnnConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    if snapshots.len() < 2 {
        return Err(Error::Parameter("live training needs at least two snapshots".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = None;
    let mut rows = Vec::with_capacity(snapshots.len() - 1);
    for w in snapshots.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        let mut ids: Vec<String> = cur
            .nodes
            .iter()
            .map(|n| n.id.clone())
            .chain(next.nodes.iter().map(|n| n.id.clone()))
            .chain(cur.links.iter().chain(&next.links).flat_map(|l| [l.source.clone(), l.target.clone()]))
            .collect();
        ids.sort();
        ids.dedup();
        let input = GraphInput::new(cur, &ids);
        let (prev1, prev2) = model::gather_states(bank, &input.ids);
        let positives = positive_pairs(next, &input.ids);
        let mut row = EvalRow {
            date: next.date,
            n_nodes: next.nodes.len(),
            n_edges: next.links.len(),
            n_pos: positives.len(),
            n_neg: 0,
            auprc: None,
            epochs: 0,
            final_loss: None,
            note: None,
        };
        if positives.is_empty() {
            row.note = Some("no links to predict".into());
            let out = forward_with_states(model, &input, &prev1, &prev2);
            model::commit_states(bank, &input.ids, &out.h1, &out.embeddings);
            rows.push(row);
            continue;
        }

        let eval_neg = sample_negatives(input.n(), &positives, positives.len(), &mut rng);
        row.n_neg = eval_neg.len();
        let out = forward_with_states(model, &input, &prev1, &prev2);
        let pairs = labelled(&positives, &eval_neg);
        let scores: Vec<f64> = pairs.iter().map(|&(a, b, _)| score_rows(&out.embeddings, a, b)).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.2 > 0.5).collect();
        row.auprc = Some(auprc(&scores, &labels)?);

        let mut train_neg = sample_negatives(input.n(), &positives, positives.len(), &mut rng);
        let mut prev_loss: Option<f64> = None;
        for epoch in 0..config.epochs {
            if epoch > 0 && config.resample_negatives {
                train_neg = sample_negatives(input.n(), &positives, positives.len(), &mut rng);
            }
            let pairs = labelled(&positives, &train_neg);
            let (loss, grad) = loss_and_gradient(model, &input, &prev1, &prev2, &pairs);
            if let Some(p) = prev_loss {
                if p - loss < config.early_stop {
                    row.final_loss = Some(loss);
                    break;
                }
            }
            apply_gradient(model, &grad, config, &mut adam);
            row.epochs = epoch + 1;
            row.final_loss = Some(loss);
            prev_loss = Some(loss);
        }

        let out = forward_with_states(model, &input, &prev1, &prev2);
        model::commit_states(bank, &input.ids, &out.h1, &out.embeddings);
        rows.push(row);
    }
    Ok(EvalReport { rows })
}
