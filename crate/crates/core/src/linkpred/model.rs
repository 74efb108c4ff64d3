//! The temporal graph network: two dense layers, then two graph
//! convolutions each followed by a GRU cell whose state persists per node.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::cluster::features::zscore;
use crate::error::{Error, Result};
use crate::netbuild::NetworkSnapshot;
use rust_decimal::prelude::ToPrimitive;

pub const FEATURE_DIM: usize = 1;
pub const MLP1_WIDTH: usize = 256;
pub const MLP2_WIDTH: usize = 128;
pub const GCN1_WIDTH: usize = 64;
pub const GCN2_WIDTH: usize = 32;

pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Mat,
    /// Row vector.
    pub b: Mat,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Mat::zeros(input, output),
            b: Mat::zeros(1, output),
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: glorot(input, output, rng),
            b: Mat::zeros(1, output),
        }
    }

    fn apply(&self, x: &Mat) -> Mat {
        add_row(x * &self.w, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub wz: Mat,
    pub wr: Mat,
    pub wn: Mat,
    pub uz: Mat,
    pub ur: Mat,
    pub un: Mat,
    pub bz: Mat,
    pub br: Mat,
    pub bn: Mat,
}

impl GruCell {
    fn zeros(input: usize, state: usize) -> Self {
        GruCell {
            wz: Mat::zeros(input, state),
            wr: Mat::zeros(input, state),
            wn: Mat::zeros(input, state),
            uz: Mat::zeros(state, state),
            ur: Mat::zeros(state, state),
            un: Mat::zeros(state, state),
            bz: Mat::zeros(1, state),
            br: Mat::zeros(1, state),
            bn: Mat::zeros(1, state),
        }
    }

    fn glorot(input: usize, state: usize, rng: &mut ChaCha8Rng) -> Self {
        GruCell {
            wz: glorot(input, state, rng),
            wr: glorot(input, state, rng),
            wn: glorot(input, state, rng),
            uz: glorot(state, state, rng),
            ur: glorot(state, state, rng),
            un: glorot(state, state, rng),
            bz: Mat::zeros(1, state),
            br: Mat::zeros(1, state),
            bn: Mat::zeros(1, state),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TgnnModel {
    pub mlp1: Dense,
    pub mlp2: Dense,
    pub gcn1: Dense,
    pub gcn2: Dense,
    pub gru1: GruCell,
    pub gru2: GruCell,
}

fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Mat {
    let limit = (6.0 / (input + output) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid bounds");
    Mat::from_fn(input, output, |_, _| dist.sample(rng))
}

fn add_row(mut m: Mat, row: &Mat) -> Mat {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(row[(0, j)]);
    }
    m
}

fn col_sums(m: &Mat) -> Mat {
    Mat::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter count for the fixed layer widths.
pub const fn parameter_count() -> usize {
    const fn dense(i: usize, o: usize) -> usize {
        i * o + o
    }
    const fn gru(i: usize, s: usize) -> usize {
        3 * (i * s + s * s + s)
    }
    dense(FEATURE_DIM, MLP1_WIDTH)
        + dense(MLP1_WIDTH, MLP2_WIDTH)
        + dense(MLP2_WIDTH, GCN1_WIDTH)
        + dense(GCN1_WIDTH, GCN2_WIDTH)
        + gru(GCN1_WIDTH, GCN1_WIDTH)
        + gru(GCN2_WIDTH, GCN2_WIDTH)
}

impl TgnnModel {
    pub fn zeros() -> Self {
        TgnnModel {
            mlp1: Dense::zeros(FEATURE_DIM, MLP1_WIDTH),
            mlp2: Dense::zeros(MLP1_WIDTH, MLP2_WIDTH),
            gcn1: Dense::zeros(MLP2_WIDTH, GCN1_WIDTH),
            gcn2: Dense::zeros(GCN1_WIDTH, GCN2_WIDTH),
            gru1: GruCell::zeros(GCN1_WIDTH, GCN1_WIDTH),
            gru2: GruCell::zeros(GCN2_WIDTH, GCN2_WIDTH),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TgnnModel {
            mlp1: Dense::glorot(FEATURE_DIM, MLP1_WIDTH, &mut rng),
            mlp2: Dense::glorot(MLP1_WIDTH, MLP2_WIDTH, &mut rng),
            gcn1: Dense::glorot(MLP2_WIDTH, GCN1_WIDTH, &mut rng),
            gcn2: Dense::glorot(GCN1_WIDTH, GCN2_WIDTH, &mut rng),
            gru1: GruCell::glorot(GCN1_WIDTH, GCN1_WIDTH, &mut rng),
            gru2: GruCell::glorot(GCN2_WIDTH, GCN2_WIDTH, &mut rng),
        };
        assert_eq!(model.num_parameters(), parameter_count());
        model
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        let g1 = &self.gru1;
        let g2 = &self.gru2;
        vec![
            ("mlp1.w", &self.mlp1.w),
            ("mlp1.b", &self.mlp1.b),
            ("mlp2.w", &self.mlp2.w),
            ("mlp2.b", &self.mlp2.b),
            ("gcn1.w", &self.gcn1.w),
            ("gcn1.b", &self.gcn1.b),
            ("gcn2.w", &self.gcn2.w),
            ("gcn2.b", &self.gcn2.b),
            ("gru1.wz", &g1.wz),
            ("gru1.wr", &g1.wr),
            ("gru1.wn", &g1.wn),
            ("gru1.uz", &g1.uz),
            ("gru1.ur", &g1.ur),
            ("gru1.un", &g1.un),
            ("gru1.bz", &g1.bz),
            ("gru1.br", &g1.br),
            ("gru1.bn", &g1.bn),
            ("gru2.wz", &g2.wz),
            ("gru2.wr", &g2.wr),
            ("gru2.wn", &g2.wn),
            ("gru2.uz", &g2.uz),
            ("gru2.ur", &g2.ur),
            ("gru2.un", &g2.un),
            ("gru2.bz", &g2.bz),
            ("gru2.br", &g2.br),
            ("gru2.bn", &g2.bn),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let g1 = &mut self.gru1;
        let g2 = &mut self.gru2;
        vec![
            &mut self.mlp1.w,
            &mut self.mlp1.b,
            &mut self.mlp2.w,
            &mut self.mlp2.b,
            &mut self.gcn1.w,
            &mut self.gcn1.b,
            &mut self.gcn2.w,
            &mut self.gcn2.b,
            &mut g1.wz,
            &mut g1.wr,
            &mut g1.wn,
            &mut g1.uz,
            &mut g1.ur,
            &mut g1.un,
            &mut g1.bz,
            &mut g1.br,
            &mut g1.bn,
            &mut g2.wz,
            &mut g2.wr,
            &mut g2.wn,
            &mut g2.uz,
            &mut g2.ur,
            &mut g2.un,
            &mut g2.bz,
            &mut g2.br,
            &mut g2.bn,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Hidden states per node for both recurrent levels. Nodes never seen
/// before start from zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStateBank {
    pub states: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl NodeStateBank {
    pub fn get(&self, id: &str) -> (Vec<f64>, Vec<f64>) {
        self.states
            .get(id)
            .cloned()
            .unwrap_or_else(|| (vec![0.0; GCN1_WIDTH], vec![0.0; GCN2_WIDTH]))
    }

    fn gather(&self, ids: &[String]) -> (Mat, Mat) {
        let mut h1 = Mat::zeros(ids.len(), GCN1_WIDTH);
        let mut h2 = Mat::zeros(ids.len(), GCN2_WIDTH);
        for (i, id) in ids.iter().enumerate() {
            if let Some((a, b)) = self.states.get(id) {
                assert_eq!(a.len(), GCN1_WIDTH);
                assert_eq!(b.len(), GCN2_WIDTH);
                for k in 0..GCN1_WIDTH {
                    h1[(i, k)] = a[k];
                }
                for k in 0..GCN2_WIDTH {
                    h2[(i, k)] = b[k];
                }
            }
        }
        (h1, h2)
    }

    fn commit(&mut self, ids: &[String], h1: &Mat, h2: &Mat) {
        for (i, id) in ids.iter().enumerate() {
            let a = h1.row(i).iter().copied().collect();
            let b = h2.row(i).iter().copied().collect();
            self.states.insert(id.clone(), (a, b));
        }
    }
}

/// One snapshot prepared for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub ids: Vec<String>,
    /// `D^-1/2 (A + I) D^-1/2` on the undirected projection.
    pub adjacency: Mat,
    /// Node sizes, log1p-scaled then z-scored; one column.
    pub features: Mat,
}

impl GraphInput {
    /// Uses `nodes` as the node set (sorted, deduplicated) and the links of
    /// `snapshot` among them. Nodes absent from the snapshot have size 0.
    pub fn new(snapshot: &NetworkSnapshot, nodes: &[String]) -> Self {
        let mut ids = nodes.to_vec();
        ids.sort();
        ids.dedup();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let n = ids.len();
        let mut a = Mat::identity(n, n);
        for l in &snapshot.links {
            if let (Some(&s), Some(&t)) = (index.get(l.source.as_str()), index.get(l.target.as_str())) {
                if s != t {
                    a[(s, t)] = 1.0;
                    a[(t, s)] = 1.0;
                }
            }
        }
        let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).sum().sqrt()).collect();
        let adjacency = Mat::from_fn(n, n, |i, j| a[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let mut x: Vec<f64> = ids
            .iter()
            .map(|id| {
                snapshot
                    .node(id)
                    .and_then(|nd| nd.size.to_f64())
                    .unwrap_or(0.0)
                    .max(0.0)
                    .ln_1p()
            })
            .collect();
        zscore(&mut x);
        GraphInput {
            ids,
            adjacency,
            features: Mat::from_column_slice(n, 1, &x),
        }
    }

    pub fn from_snapshot(snapshot: &NetworkSnapshot) -> Self {
        let mut ids: Vec<String> = snapshot.nodes.iter().map(|n| n.id.clone()).collect();
        for l in &snapshot.links {
            ids.push(l.source.clone());
            ids.push(l.target.clone());
        }
        Self::new(snapshot, &ids)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }
}

struct GruCache {
    x: Mat,
    h_prev: Mat,
    z: Mat,
    r: Mat,
    cand: Mat,
}

fn gru_forward(cell: &GruCell, x: &Mat, h_prev: &Mat) -> (Mat, GruCache) {
    let z = add_row(x * &cell.wz + h_prev * &cell.uz, &cell.bz).map(sigmoid);
    let r = add_row(x * &cell.wr + h_prev * &cell.ur, &cell.br).map(sigmoid);
    let cand = add_row(x * &cell.wn + r.component_mul(h_prev) * &cell.un, &cell.bn).map(f64::tanh);
    let h = cand.zip_map(&z, |c, zz| (1.0 - zz) * c) + z.component_mul(h_prev);
    (
        h,
        GruCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            cand,
        },
    )
}

/// Accumulates parameter gradients into `grad` and returns the gradient
/// with respect to the cell input. The previous state is a constant.
fn gru_backward(cell: &GruCell, cache: &GruCache, dh: &Mat, grad: &mut GruCell) -> Mat {
    let GruCache { x, h_prev, z, r, cand } = cache;
    let d_cand = dh.zip_map(z, |d, zz| d * (1.0 - zz));
    let dz = dh.component_mul(&(h_prev - cand));
    let da_n = d_cand.zip_map(cand, |d, c| d * (1.0 - c * c));
    let rh = r.component_mul(h_prev);
    grad.wn += x.transpose() * &da_n;
    grad.un += rh.transpose() * &da_n;
    grad.bn += col_sums(&da_n);
    let d_rh = &da_n * cell.un.transpose();
    let dr = d_rh.component_mul(h_prev);
    let da_z = dz.zip_map(z, |d, zz| d * zz * (1.0 - zz));
    let da_r = dr.zip_map(r, |d, rr| d * rr * (1.0 - rr));
    grad.wz += x.transpose() * &da_z;
    grad.uz += h_prev.transpose() * &da_z;
    grad.bz += col_sums(&da_z);
    grad.wr += x.transpose() * &da_r;
    grad.ur += h_prev.transpose() * &da_r;
    grad.br += col_sums(&da_r);
    &da_n * cell.wn.transpose() + &da_z * cell.wz.transpose() + &da_r * cell.wr.transpose()
}

pub struct ForwardCache {
    pre1: Mat,
    act1: Mat,
    agg1: Mat,
    pre_gcn1: Mat,
    gru1: GruCache,
    agg2: Mat,
    gru2: GruCache,
}

/// Embeddings (rows follow `input.ids`) plus both GRU outputs.
pub struct ForwardOutput {
    pub embeddings: Mat,
    pub h1: Mat,
    pub cache: ForwardCache,
}

pub fn forward_with_states(model: &TgnnModel, input: &GraphInput, prev1: &Mat, prev2: &Mat) -> ForwardOutput {
    let n = input.n();
    assert_eq!(input.features.shape(), (n, FEATURE_DIM));
    assert_eq!(prev1.shape(), (n, GCN1_WIDTH));
    assert_eq!(prev2.shape(), (n, GCN2_WIDTH));
    let pre1 = model.mlp1.apply(&input.features);
    let act1 = pre1.map(|v| v.max(0.0));
    let mixed = model.mlp2.apply(&act1);
    let agg1 = &input.adjacency * &mixed;
    let pre_gcn1 = model.gcn1.apply(&agg1);
    let x1 = pre_gcn1.map(|v| v.max(0.0));
    let (h1, gru1) = gru_forward(&model.gru1, &x1, prev1);
    let agg2 = &input.adjacency * &h1;
    let x2 = model.gcn2.apply(&agg2);
    let (h2, gru2) = gru_forward(&model.gru2, &x2, prev2);
    ForwardOutput {
        embeddings: h2,
        h1,
        cache: ForwardCache {
            pre1,
            act1,
            agg1,
            pre_gcn1,
            gru1,
            agg2,
            gru2,
        },
    }
}

/// Parameter gradients given the gradient of the loss with respect to the
/// embeddings.
pub fn backward(model: &TgnnModel, input: &GraphInput, cache: &ForwardCache, d_emb: &Mat) -> TgnnModel {
    let mut grad = TgnnModel::zeros();
    let adj_t = input.adjacency.transpose();
    let dx2 = gru_backward(&model.gru2, &cache.gru2, d_emb, &mut grad.gru2);
    grad.gcn2.w += cache.agg2.transpose() * &dx2;
    grad.gcn2.b += col_sums(&dx2);
    let dh1 = &adj_t * (&dx2 * model.gcn2.w.transpose());
    let dx1 = gru_backward(&model.gru1, &cache.gru1, &dh1, &mut grad.gru1);
    let d_pre_gcn1 = dx1.zip_map(&cache.pre_gcn1, |d, p| if p > 0.0 { d } else { 0.0 });
    grad.gcn1.w += cache.agg1.transpose() * &d_pre_gcn1;
    grad.gcn1.b += col_sums(&d_pre_gcn1);
    let d_mixed = &adj_t * (&d_pre_gcn1 * model.gcn1.w.transpose());
    grad.mlp2.w += cache.act1.transpose() * &d_mixed;
    grad.mlp2.b += col_sums(&d_mixed);
    let d_act1 = &d_mixed * model.mlp2.w.transpose();
    let d_pre1 = d_act1.zip_map(&cache.pre1, |d, p| if p > 0.0 { d } else { 0.0 });
    grad.mlp1.w += input.features.transpose() * &d_pre1;
    grad.mlp1.b += col_sums(&d_pre1);
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub h: Mat,
}

impl Embeddings {
    fn row(&self, id: &str) -> Result<usize> {
        self.ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .map_err(|_| Error::UnknownNode(id.to_owned()))
    }

    /// `σ(h_p · h_q)`.
    pub fn score(&self, p: &str, q: &str) -> Result<f64> {
        let (i, j) = (self.row(p)?, self.row(q)?);
        Ok(score_rows(&self.h, i, j))
    }
}

pub fn score_rows(h: &Mat, i: usize, j: usize) -> f64 {
    sigmoid(h.row(i).dot(&h.row(j)))
}

/// Embeds `input` against the bank's states and writes the new states back.
pub fn forward(model: &TgnnModel, bank: &mut NodeStateBank, input: &GraphInput) -> Embeddings {
    let (p1, p2) = bank.gather(&input.ids);
    let out = forward_with_states(model, input, &p1, &p2);
    bank.commit(&input.ids, &out.h1, &out.embeddings);
    Embeddings {
        ids: input.ids.clone(),
        h: out.embeddings,
    }
}

pub(crate) fn gather_states(bank: &NodeStateBank, ids: &[String]) -> (Mat, Mat) {
    bank.gather(ids)
}

pub(crate) fn commit_states(bank: &mut NodeStateBank, ids: &[String], h1: &Mat, h2: &Mat) {
    bank.commit(ids, h1, h2)
}

/// Mean binary cross-entropy of `σ(h_i · h_j)` over labelled pairs, and its
/// gradient with respect to the embeddings.
pub fn pair_loss(h: &Mat, pairs: &[(usize, usize, f64)]) -> (f64, Mat) {
    let mut grad = Mat::zeros(h.nrows(), h.ncols());
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for &(i, j, y) in pairs {
        let logit = h.row(i).dot(&h.row(j));
        // log(1 + e^x) - y x, stable for large |x|.
        loss += logit.max(0.0) + (-logit.abs()).exp().ln_1p() - y * logit;
        let g = (sigmoid(logit) - y) * scale;
        let (hi, hj) = (h.row(i).clone_owned(), h.row(j).clone_owned());
        let mut ri = grad.row_mut(i);
        ri += hj * g;
        let mut rj = grad.row_mut(j);
        rj += hi * g;
    }
    (loss * scale, grad)
}

/// Versioned JSON with shape headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<CheckpointTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: (usize, usize),
    /// Row-major.
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl TgnnModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, m)| CheckpointTensor {
                    name: name.to_owned(),
                    shape: m.shape(),
                    data: m.transpose().iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut model = TgnnModel::zeros();
        let names: Vec<&str> = model.tensors().iter().map(|(n, _)| *n).collect();
        if ck.tensors.len() != names.len() {
            return Err(Error::Format("checkpoint has the wrong number of tensors".into()));
        }
        for ((slot, name), t) in model.tensors_mut().into_iter().zip(names).zip(&ck.tensors) {
            if t.name != name || t.shape != slot.shape() || t.data.len() != slot.len() {
                return Err(Error::Format(format!("checkpoint tensor {} does not match {name}", t.name)));
            }
            *slot = Mat::from_row_slice(t.shape.0, t.shape.1, &t.data);
        }
        Ok(model)
    }
}
