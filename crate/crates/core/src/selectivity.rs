//! Autoregressive density model over the categorical columns and the
//! progressive-sampling selectivity estimator built on it.
//!
//! The network is a masked autoencoder with residual blocks: inputs are the
//! one-hot encodings of the columns laid out in model order, and the output
//! block of the column at position `p` only sees inputs at positions `< p`.
//! Connectivity is enforced by fixed binary masks on every weight matrix.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ColumnKind, Table};
use crate::neural::{
    log_softmax, relu_backward_in_place, relu_in_place, sample_categorical, Activation, Adam, AdamConfig, ByteReader,
    Dense, DenseNet, Matrix, NeuralError,
};
use crate::rng::stream;
use crate::transform::{CategoryDictionary, LabelEncoder};

/// Largest number of completions [`ArModel::exact_selectivity`] enumerates.
pub const MAX_ENUMERATION: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum SelectivityError {
    #[error("table is empty")]
    EmptyTable,
    #[error("the schema has no categorical columns")]
    NoCategoricalColumns,
    #[error("column {0} is not modelled by the selectivity estimator")]
    UnknownColumn(usize),
    #[error("enumeration exceeds the limit of {0} completions")]
    TooManyCompletions(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training produced a non-finite loss")]
    NonFiniteLoss,
    #[error("corrupt selectivity model payload")]
    Corrupt,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// `selest.*` config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub orderings: usize,
    /// Number of residual blocks.
    pub depth: usize,
    pub hidden: usize,
    pub batch: usize,
    pub walks: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Steps of linear learning-rate warm-up (capped at a fifth of the run).
    pub warmup: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            orderings: 4,
            depth: 5,
            hidden: 256,
            batch: 512,
            walks: 512,
            epochs: 20,
            lr: 5e-4,
            warmup: 10_000,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivityEstimate {
    pub estimate: f64,
    pub walks: usize,
    pub std_error: f64,
    /// A predicate value never occurred in the training data.
    pub not_in_vocabulary: bool,
}

impl SelectivityEstimate {
    fn zero_oov() -> Self {
        SelectivityEstimate { estimate: 0.0, walks: 0, std_error: 0.0, not_in_vocabulary: true }
    }
}

/// Per-ordering training outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingTrial {
    pub ordering: Vec<usize>,
    pub train_nll: Vec<f64>,
    pub validation_nll: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArTrainReport {
    pub trials: Vec<OrderingTrial>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArMeta {
    columns: Vec<usize>,
    dictionaries: Vec<CategoryDictionary>,
    ordering: Vec<usize>,
    hidden: usize,
    depth: usize,
}

/// Masked autoregressive network. Layers: input, then `(W1, W2)` per
/// residual block, then output.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    meta: ArMeta,
    layers: Vec<Dense>,
    masks: Vec<Vec<f64>>,
    /// Offset of each position's one-hot block (positions in model order).
    offsets: Vec<usize>,
    label_index: Vec<HashMap<String, u32>>,
}

enum Resolved {
    Fixed(BTreeMap<usize, u32>),
    OutOfVocabulary,
    /// Two different values required of the same column.
    Contradiction,
}

struct ForwardCache {
    input: Matrix,
    /// Residual stream before each block and after the last one.
    stream: Vec<Matrix>,
    /// `relu(h)` fed into each block's first layer and into the output layer.
    relu_stream: Vec<Matrix>,
    /// Post-relu inner activation of each block.
    inner: Vec<Matrix>,
    logits: Matrix,
}

fn build_masks(vocab: &[usize], hidden: usize, depth: usize) -> Vec<Vec<f64>> {
    let k = vocab.len();
    let input_deg: Vec<usize> = vocab.iter().enumerate().flat_map(|(p, v)| std::iter::repeat_n(p + 1, *v)).collect();
    let span = k.saturating_sub(1).max(1);
    let hidden_deg: Vec<usize> = (0..hidden).map(|h| h % span + 1).collect();
    let dense = |ins: &[usize], outs: &[usize], connect: &dyn Fn(usize, usize) -> bool| -> Vec<f64> {
        let mut m = vec![0.0; ins.len() * outs.len()];
        for (i, di) in ins.iter().enumerate() {
            for (o, dout) in outs.iter().enumerate() {
                if connect(*di, *dout) {
                    m[i * outs.len() + o] = 1.0;
                }
            }
        }
        m
    };
    let mut masks = vec![dense(&input_deg, &hidden_deg, &|i, h| h >= i)];
    for _ in 0..2 * depth {
        masks.push(dense(&hidden_deg, &hidden_deg, &|i, h| h >= i));
    }
    masks.push(dense(&hidden_deg, &input_deg, &|h, p| p > h));
    masks
}

impl ArModel {
    fn new_random(meta: ArMeta, seed: u64) -> Self {
        let vocab: Vec<usize> = meta.ordering.iter().map(|&i| meta.dictionaries[i].len()).collect();
        let width: usize = vocab.iter().sum();
        let mut rng = stream(seed, "ar-init");
        let h = meta.hidden;
        let mut layers = vec![Dense::new(width, h, Activation::Relu, &mut rng)];
        for _ in 0..meta.depth {
            layers.push(Dense::new(h, h, Activation::Relu, &mut rng));
            let mut second = Dense::new(h, h, Activation::Identity, &mut rng);
            // Start each block close to the identity map.
            second.weights.as_mut_slice().iter_mut().for_each(|w| *w *= 0.1);
            layers.push(second);
        }
        layers.push(Dense::new(h, width, Activation::Identity, &mut rng));
        Self::assemble(meta, layers)
    }

    fn assemble(meta: ArMeta, mut layers: Vec<Dense>) -> Self {
        let vocab: Vec<usize> = meta.ordering.iter().map(|&i| meta.dictionaries[i].len()).collect();
        let masks = build_masks(&vocab, meta.hidden, meta.depth);
        for (layer, mask) in layers.iter_mut().zip(&masks) {
            for (w, m) in layer.weights.as_mut_slice().iter_mut().zip(mask) {
                *w *= m;
            }
        }
        let mut offsets = Vec::with_capacity(vocab.len());
        let mut acc = 0;
        for v in &vocab {
            offsets.push(acc);
            acc += v;
        }
        let label_index = meta
            .dictionaries
            .iter()
            .map(|d| d.values().iter().enumerate().map(|(i, v)| (v.clone(), i as u32)).collect())
            .collect();
        ArModel { meta, layers, masks, offsets, label_index }
    }

    /// Schema indices of the modelled columns.
    pub fn columns(&self) -> &[usize] {
        &self.meta.columns
    }

    /// Model order as indices into [`ArModel::columns`].
    pub fn ordering(&self) -> &[usize] {
        &self.meta.ordering
    }

    pub fn vocab_size(&self, local: usize) -> usize {
        self.meta.dictionaries[local].len()
    }

    fn width(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.vocab_size(*self.meta.ordering.last().unwrap()))
    }

    fn position_width(&self, p: usize) -> usize {
        self.vocab_size(self.meta.ordering[p])
    }

    fn local_column(&self, schema_column: usize) -> Option<usize> {
        self.meta.columns.iter().position(|c| *c == schema_column)
    }

    fn forward(&self, input: &Matrix) -> Result<ForwardCache, NeuralError> {
        let mut h = self.layers[0].forward(input)?;
        let mut stream = Vec::with_capacity(self.meta.depth + 1);
        let mut relu_stream = Vec::with_capacity(self.meta.depth + 1);
        let mut inner = Vec::with_capacity(self.meta.depth);
        for b in 0..self.meta.depth {
            let mut u = h.clone();
            relu_in_place(&mut u);
            let t = self.layers[1 + 2 * b].forward(&u)?;
            let v = self.layers[2 + 2 * b].linear(&t)?;
            let mut next = h.clone();
            for (x, y) in next.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *x += y;
            }
            stream.push(h);
            relu_stream.push(u);
            inner.push(t);
            h = next;
        }
        let mut u = h.clone();
        relu_in_place(&mut u);
        let logits = self.layers.last().expect("output layer").linear(&u)?;
        stream.push(h);
        relu_stream.push(u);
        Ok(ForwardCache { input: input.clone(), stream, relu_stream, inner, logits })
    }

    /// Gradients of the loss w.r.t. every layer, given `d_logits`.
    fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<Vec<(Matrix, Vec<f64>)>, NeuralError> {
        let depth = self.meta.depth;
        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let out_layer = self.layers.last().expect("output layer");
        let (dw, db, mut du) = out_layer.linear_backward(&cache.relu_stream[depth], d_logits)?;
        let mut tail = vec![(dw, db)];
        relu_backward_in_place(&mut du, &cache.relu_stream[depth]);
        let mut dh = du;
        for b in (0..depth).rev() {
            let second = &self.layers[2 + 2 * b];
            let (dw2, db2, mut dt) = second.linear_backward(&cache.inner[b], &dh)?;
            relu_backward_in_place(&mut dt, &cache.inner[b]);
            let first = &self.layers[1 + 2 * b];
            let (dw1, db1, mut du) = first.linear_backward(&cache.relu_stream[b], &dt)?;
            relu_backward_in_place(&mut du, &cache.relu_stream[b]);
            for (x, y) in dh.as_mut_slice().iter_mut().zip(du.as_slice()) {
                *x += y;
            }
            tail.push((dw2, db2));
            tail.push((dw1, db1));
        }
        // The input layer carries a relu: stream[0] is its activated output.
        relu_backward_in_place(&mut dh, &cache.stream[0]);
        let (dw0, db0, _) = self.layers[0].linear_backward(&cache.input, &dh)?;
        grads.push((dw0, db0));
        grads.extend(tail.into_iter().rev());
        for ((dw, _), mask) in grads.iter_mut().zip(&self.masks) {
            for (g, m) in dw.as_mut_slice().iter_mut().zip(mask) {
                *g *= m;
            }
        }
        Ok(grads)
    }

    /// One-hot input rows from label tuples given in local column order.
    fn encode(&self, rows: &[&[u32]]) -> Matrix {
        let mut x = Matrix::zeros(rows.len(), self.width());
        for (r, labels) in rows.iter().enumerate() {
            for (p, &local) in self.meta.ordering.iter().enumerate() {
                x.set(r, self.offsets[p] + labels[local] as usize, 1.0);
            }
        }
        x
    }

    /// Mean negative log-likelihood (nats) of label tuples; optionally the
    /// logits gradient.
    fn nll(&self, rows: &[&[u32]], grads: bool) -> Result<(f64, Option<Vec<(Matrix, Vec<f64>)>>), NeuralError> {
        let x = self.encode(rows);
        let cache = self.forward(&x)?;
        let b = rows.len();
        let scale = 1.0 / b as f64;
        let mut d_logits = Matrix::zeros(b, self.width());
        let mut total = 0.0;
        for (r, labels) in rows.iter().enumerate() {
            for (p, &local) in self.meta.ordering.iter().enumerate() {
                let (o, w) = (self.offsets[p], self.position_width(p));
                let target = labels[local] as usize;
                let lp = log_softmax(&cache.logits.row(r)[o..o + w]);
                total -= lp[target];
                let g = &mut d_logits.row_mut(r)[o..o + w];
                for (gi, l) in g.iter_mut().zip(&lp) {
                    *gi = scale * l.exp();
                }
                g[target] -= scale;
            }
        }
        let grads = if grads { Some(self.backward(&cache, &d_logits)?) } else { None };
        Ok((total * scale, grads))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Conditional distributions for every position given full label tuples
    /// (local column order). Returned as `[position][value]` probabilities.
    pub fn conditionals(&self, labels: &[u32]) -> Result<Vec<Vec<f64>>, NeuralError> {
        let cache = self.forward(&self.encode(&[labels]))?;
        Ok((0..self.meta.ordering.len())
            .map(|p| {
                let (o, w) = (self.offsets[p], self.position_width(p));
                log_softmax(&cache.logits.row(0)[o..o + w]).into_iter().map(f64::exp).collect()
            })
            .collect())
    }

    /// Model probability of a complete label tuple (local column order).
    pub fn joint_probability(&self, labels: &[u32]) -> Result<f64, NeuralError> {
        let cond = self.conditionals(labels)?;
        Ok(self.meta.ordering.iter().enumerate().map(|(p, &local)| cond[p][labels[local] as usize]).product())
    }

    fn resolve(&self, predicates: &[(usize, String)]) -> Result<Resolved, SelectivityError> {
        let mut fixed = BTreeMap::new();
        let mut contradiction = false;
        for (column, value) in predicates {
            let local = self.local_column(*column).ok_or(SelectivityError::UnknownColumn(*column))?;
            let Some(label) = self.label_index[local].get(value) else {
                return Ok(Resolved::OutOfVocabulary);
            };
            if fixed.insert(local, *label).is_some_and(|prev| prev != *label) {
                contradiction = true;
            }
        }
        Ok(if contradiction { Resolved::Contradiction } else { Resolved::Fixed(fixed) })
    }

    /// Exact model selectivity of an equality conjunction by enumerating every
    /// completion of the unpredicated columns.
    pub fn exact_selectivity(&self, predicates: &[(usize, String)]) -> Result<f64, SelectivityError> {
        let Resolved::Fixed(fixed) = self.resolve(predicates)? else {
            return Ok(0.0);
        };
        let k = self.meta.columns.len();
        let free: Vec<usize> = (0..k).filter(|c| !fixed.contains_key(c)).collect();
        let total = free.iter().try_fold(1usize, |acc, c| acc.checked_mul(self.vocab_size(*c)));
        let total = total.filter(|t| *t <= MAX_ENUMERATION).ok_or(SelectivityError::TooManyCompletions(MAX_ENUMERATION))?;
        let mut labels = vec![0u32; k];
        for (c, v) in &fixed {
            labels[*c] = *v;
        }
        let mut sum = 0.0;
        for mut idx in 0..total {
            for c in &free {
                let v = self.vocab_size(*c);
                labels[*c] = (idx % v) as u32;
                idx /= v;
            }
            sum += self.joint_probability(&labels)?;
        }
        Ok(sum)
    }

    /// Progressive-sampling estimate of the selectivity of an equality
    /// conjunction over categorical columns.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        predicates: &[(usize, String)],
        walks: usize,
        rng: &mut R,
    ) -> Result<SelectivityEstimate, SelectivityError> {
        let fixed = match self.resolve(predicates)? {
            Resolved::Fixed(fixed) => fixed,
            Resolved::OutOfVocabulary => return Ok(SelectivityEstimate::zero_oov()),
            Resolved::Contradiction => {
                return Ok(SelectivityEstimate { estimate: 0.0, walks: 0, std_error: 0.0, not_in_vocabulary: false })
            }
        };
        let order = &self.meta.ordering;
        let Some(last) = order.iter().rposition(|c| fixed.contains_key(c)) else {
            return Ok(SelectivityEstimate { estimate: 1.0, walks: 0, std_error: 0.0, not_in_vocabulary: false });
        };
        let deterministic = order[..=last].iter().all(|c| fixed.contains_key(c));
        let s = if deterministic { 1 } else { walks.max(1) };
        let mut x = Matrix::zeros(s, self.width());
        let mut weight = vec![1.0; s];
        for p in 0..=last {
            let cache = self.forward(&x)?;
            let (o, w) = (self.offsets[p], self.position_width(p));
            for r in 0..s {
                if weight[r] == 0.0 {
                    continue;
                }
                let probs: Vec<f64> = log_softmax(&cache.logits.row(r)[o..o + w]).into_iter().map(f64::exp).collect();
                let label = match fixed.get(&order[p]) {
                    Some(v) => {
                        weight[r] *= probs[*v as usize];
                        *v as usize
                    }
                    None => sample_categorical(&probs, rng),
                };
                x.set(r, o + label, 1.0);
            }
        }
        let n = s as f64;
        let mean = weight.iter().sum::<f64>() / n;
        let std_error = if s > 1 {
            let var = weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(SelectivityEstimate { estimate: mean.clamp(0.0, 1.0), walks: s, std_error, not_in_vocabulary: false })
    }

    /// `selectivity × row_count`.
    pub fn estimate_count<R: Rng + ?Sized>(
        &self,
        predicates: &[(usize, String)],
        row_count: usize,
        walks: usize,
        rng: &mut R,
    ) -> Result<f64, SelectivityError> {
        Ok(self.estimate(predicates, walks, rng)?.estimate * row_count as f64)
    }

    /// Appends the binary payload: a length-prefixed JSON header followed by
    /// the layers in the dense-network layout.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        let header = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        DenseNet::new(self.layers.clone()).expect("layers chain").write_le(out);
    }

    pub fn read_le(bytes: &[u8]) -> Result<ArModel, SelectivityError> {
        let mut reader = ByteReader::new(bytes);
        let len = reader.u32().ok_or(SelectivityError::Corrupt)? as usize;
        let meta: ArMeta =
            serde_json::from_slice(reader.take(len).ok_or(SelectivityError::Corrupt)?).map_err(|_| SelectivityError::Corrupt)?;
        let net = DenseNet::read_le(&mut reader).ok_or(SelectivityError::Corrupt)?;
        if !reader.is_empty() || net.layers().len() != 2 * meta.depth + 2 {
            return Err(SelectivityError::Corrupt);
        }
        let mut ordering = meta.ordering.clone();
        ordering.sort_unstable();
        if ordering != (0..meta.columns.len()).collect::<Vec<_>>() || meta.dictionaries.len() != meta.columns.len() {
            return Err(SelectivityError::Corrupt);
        }
        let model = Self::assemble(meta, net.layers().to_vec());
        if model.layers.iter().zip(&model.masks).any(|(l, m)| l.weights.as_slice().len() != m.len()) {
            return Err(SelectivityError::Corrupt);
        }
        Ok(model)
    }
}

/// Trains one model per random ordering and keeps the one with the best
/// validation negative log-likelihood.
pub fn train_ar(
    table: &Table,
    encoder: &LabelEncoder,
    config: &ArConfig,
) -> Result<(ArModel, ArTrainReport), SelectivityError> {
    if table.is_empty() {
        return Err(SelectivityError::EmptyTable);
    }
    if config.orderings == 0 || config.hidden == 0 || config.batch == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(SelectivityError::InvalidConfig("orderings, hidden, batch and lr must be positive".into()));
    }
    let columns: Vec<usize> = (0..table.schema().len())
        .filter(|c| table.schema().kind(*c) == ColumnKind::Categorical)
        .collect();
    if columns.is_empty() {
        return Err(SelectivityError::NoCategoricalColumns);
    }
    let dictionaries: Vec<CategoryDictionary> = columns
        .iter()
        .map(|c| encoder.dictionary(*c).cloned().ok_or(SelectivityError::UnknownColumn(*c)))
        .collect::<Result<_, _>>()?;
    let k = columns.len();
    let mut labels = vec![0u32; table.row_count() * k];
    for (r, row) in table.rows().iter().enumerate() {
        for (local, &c) in columns.iter().enumerate() {
            let value = row[c].as_cat().unwrap_or_default();
            labels[r * k + local] = dictionaries[local].label(value).ok_or(SelectivityError::UnknownColumn(c))?;
        }
    }

    let mut split_rng = stream(config.seed, "ar-split");
    let mut indices: Vec<usize> = (0..table.row_count()).collect();
    indices.shuffle(&mut split_rng);
    let n_val = ((table.row_count() as f64) * config.validation_fraction).round() as usize;
    let n_val = if table.row_count() > 1 { n_val.min(table.row_count() - 1) } else { 0 };
    let (validation, train): (Vec<usize>, Vec<usize>) = (indices[..n_val].to_vec(), indices[n_val..].to_vec());
    let validation = if validation.is_empty() { train.clone() } else { validation };

    let mut order_rng = stream(config.seed, "ar-orderings");
    let mut trials = Vec::with_capacity(config.orderings);
    let mut best: Option<(f64, ArModel)> = None;
    for trial in 0..config.orderings {
        let mut ordering: Vec<usize> = (0..k).collect();
        ordering.shuffle(&mut order_rng);
        let meta = ArMeta {
            columns: columns.clone(),
            dictionaries: dictionaries.clone(),
            ordering: ordering.clone(),
            hidden: config.hidden,
            depth: config.depth,
        };
        let trial_seed = crate::rng::derive_indexed_seed(config.seed, "ar-trial", trial as u64);
        let mut model = ArModel::new_random(meta, trial_seed);
        let train_nll = fit_ordering(&mut model, &labels, k, &train, config, trial_seed)?;
        let val_rows: Vec<&[u32]> = validation.iter().map(|&r| &labels[r * k..(r + 1) * k]).collect();
        let mut val = 0.0;
        for chunk in val_rows.chunks(config.batch) {
            val += model.nll(chunk, false)?.0 * chunk.len() as f64;
        }
        let validation_nll = val / val_rows.len() as f64;
        log::info!("ordering {ordering:?}: validation nll {validation_nll:.4}");
        trials.push(OrderingTrial { ordering, train_nll, validation_nll });
        if best.as_ref().is_none_or(|(b, _)| validation_nll < *b) {
            best = Some((validation_nll, model));
        }
    }
    let chosen = trials
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.validation_nll.total_cmp(&b.1.validation_nll))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (_, model) = best.expect("at least one ordering");
    Ok((model, ArTrainReport { trials, chosen }))
}

fn fit_ordering(
    model: &mut ArModel,
    labels: &[u32],
    k: usize,
    train: &[usize],
    config: &ArConfig,
    seed: u64,
) -> Result<Vec<f64>, SelectivityError> {
    let mut rng = stream(seed, "ar-batches");
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let steps_per_epoch = train.len().div_ceil(config.batch);
    let warmup = config.warmup.min(steps_per_epoch * config.epochs / 5).max(1);
    let mut order = train.to_vec();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let rows: Vec<&[u32]> = chunk.iter().map(|&r| &labels[r * k..(r + 1) * k]).collect();
            let (loss, grads) = model.nll(&rows, true)?;
            if !loss.is_finite() {
                return Err(SelectivityError::NonFiniteLoss);
            }
            step += 1;
            adam.set_lr(config.lr * (step as f64 / warmup as f64).min(1.0));
            let grads = grads.expect("gradients requested");
            let grad_slices: Vec<&[f64]> = grads.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect();
            adam.step(model.params_mut(), grad_slices)?;
            sum += loss * rows.len() as f64;
        }
        trace.push(sum / train.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Cell, Schema};
    use crate::rng::seeded;
    use crate::transform::fit_label_encoders;

    fn small() -> ArConfig {
        ArConfig { orderings: 1, depth: 1, hidden: 16, batch: 64, walks: 256, epochs: 1, lr: 1e-2, warmup: 1, ..ArConfig::default() }
    }

    fn table(columns: usize, rows: Vec<Vec<&str>>) -> Table {
        let schema =
            Schema::new((0..columns).map(|i| (format!("c{i}"), ColumnKind::Categorical)).collect::<Vec<_>>()).unwrap();
        Table::new(schema, rows.into_iter().map(|r| r.into_iter().map(|v| Cell::Cat(v.into())).collect()).collect())
            .unwrap()
    }

    fn random_model(vocab: &[usize], depth: usize, seed: u64) -> ArModel {
        let dictionaries = vocab
            .iter()
            .map(|v| CategoryDictionary::from((0..*v).map(|i| format!("v{i}")).collect::<Vec<_>>()))
            .collect();
        let mut ordering: Vec<usize> = (0..vocab.len()).collect();
        ordering.shuffle(&mut seeded(seed));
        let meta = ArMeta { columns: (0..vocab.len()).collect(), dictionaries, ordering, hidden: 12, depth };
        let mut m = ArModel::new_random(meta, seed);
        // Non-zero biases so every path carries signal.
        let mut rng = seeded(seed + 1);
        for l in &mut m.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        m
    }

    #[test]
    fn autoregressive_property_holds() {
        let model = random_model(&[3, 2, 4, 3], 2, 5);
        let k = 4;
        let mut rng = seeded(8);
        for _ in 0..50 {
            let base: Vec<u32> = (0..k).map(|c| rng.random_range(0..model.vocab_size(c) as u32)).collect();
            let cond = model.conditionals(&base).unwrap();
            for (j_pos, &j) in model.ordering().iter().enumerate() {
                for v in 0..model.vocab_size(j) as u32 {
                    let mut changed = base.clone();
                    changed[j] = v;
                    let other = model.conditionals(&changed).unwrap();
                    for p in 0..=j_pos {
                        assert_eq!(cond[p], other[p], "position {p} saw input at {j_pos}");
                    }
                }
            }
        }
    }

    #[test]
    fn conditionals_normalize_and_joint_sums_to_one() {
        let model = random_model(&[2, 3, 2], 1, 2);
        let first = &model.conditionals(&[0, 0, 0]).unwrap()[0];
        assert!((first.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((model.exact_selectivity(&[]).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = random_model(&[3, 2, 4], 2, 11);
        let rows: Vec<Vec<u32>> = vec![vec![0, 1, 3], vec![2, 0, 1], vec![1, 1, 0]];
        let views: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let (_, grads) = model.nll(&views, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-5;
        let mut checked = 0;
        let mut rng = seeded(4);
        while checked < 100 {
            let li = rng.random_range(0..model.layers.len());
            let wi = rng.random_range(0..model.layers[li].weights.as_slice().len());
            if model.masks[li][wi] == 0.0 {
                assert_eq!(grads[li].0.as_slice()[wi], 0.0);
                continue;
            }
            let orig = model.layers[li].weights.as_slice()[wi];
            model.layers[li].weights.as_mut_slice()[wi] = orig + h;
            let up = model.nll(&views, false).unwrap().0;
            model.layers[li].weights.as_mut_slice()[wi] = orig - h;
            let down = model.nll(&views, false).unwrap().0;
            model.layers[li].weights.as_mut_slice()[wi] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[li].0.as_slice()[wi];
            let denom = numeric.abs().max(analytic.abs());
            if denom > 1e-7 {
                assert!((numeric - analytic).abs() / denom < 1e-4, "layer {li} weight {wi}: {numeric} vs {analytic}");
            }
            checked += 1;
        }
    }

    #[test]
    fn learns_a_skewed_marginal() {
        let mut rows = vec![vec!["a"]; 700];
        rows.extend(vec![vec!["b"]; 300]);
        let t = table(1, rows);
        let enc = fit_label_encoders(&t).unwrap();
        let cfg = ArConfig { epochs: 40, ..small() };
        let (model, _) = train_ar(&t, &enc, &cfg).unwrap();
        let p = model.estimate(&[(0, "a".into())], 10, &mut seeded(1)).unwrap();
        assert!((p.estimate - 0.7).abs() < 0.02, "{}", p.estimate);
        assert_eq!(p.walks, 1);
        assert_eq!(p.std_error, 0.0);
    }

    #[test]
    fn special_predicates() {
        let model = random_model(&[2, 3], 1, 3);
        let mut rng = seeded(1);
        assert_eq!(model.estimate(&[], 10, &mut rng).unwrap().estimate, 1.0);
        let oov = model.estimate(&[(0, "nope".into())], 10, &mut rng).unwrap();
        assert!(oov.not_in_vocabulary && oov.estimate == 0.0);
        assert_eq!(model.estimate_count(&[(0, "nope".into())], 1000, 10, &mut rng).unwrap(), 0.0);
        let clash = model.estimate(&[(0, "v0".into()), (0, "v1".into())], 10, &mut rng).unwrap();
        assert_eq!(clash.estimate, 0.0);
        assert!(matches!(model.estimate(&[(7, "v0".into())], 10, &mut rng), Err(SelectivityError::UnknownColumn(7))));
    }

    #[test]
    fn full_predicate_estimate_is_exact_product() {
        let model = random_model(&[2, 3, 2], 2, 6);
        let preds = [(0, "v1".to_string()), (1, "v2".to_string()), (2, "v0".to_string())];
        let est = model.estimate(&preds, 100, &mut seeded(3)).unwrap();
        let exact = model.joint_probability(&[1, 2, 0]).unwrap();
        assert!((est.estimate - exact).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn progressive_sampling_tracks_enumeration() {
        let model = random_model(&[3, 4, 2], 1, 9);
        for (c, v) in [(0usize, "v2"), (1, "v1"), (2, "v1")] {
            let preds = [(c, v.to_string())];
            let exact = model.exact_selectivity(&preds).unwrap();
            let est = model.estimate(&preds, 2000, &mut seeded(c as u64)).unwrap();
            assert!((est.estimate - exact).abs() <= 3.0 * est.std_error + 1e-12, "{est:?} vs {exact}");
        }
    }

    #[test]
    fn payload_round_trip() {
        let model = random_model(&[2, 3, 4], 2, 1);
        let mut buf = Vec::new();
        model.write_le(&mut buf);
        let back = ArModel::read_le(&buf).unwrap();
        assert_eq!(back, model);
        assert!(ArModel::read_le(&buf[..buf.len() - 1]).is_err());
    }
}
