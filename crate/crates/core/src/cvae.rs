//! Conditional VAE over encoded rows.
//!
//! Three plain MLPs: the encoder sees `[a ⧺ m]`, the prior sees
//! `[a ∘ (1 − m) ⧺ m]`, both emitting a diagonal Gaussian over `z`; the
//! decoder maps `z` back to the encoded layout (logits for every one-hot
//! block, a mean for every residual). Training minimizes
//! `KL(q ‖ p) + reconstruction` with a single reparameterized draw; at query
//! time only the prior and decoder run.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{compute_strata, Cell, ColumnKind, Row, Table};
use crate::masking::{query_mask, MaskError, MaskKind, MaskPolicy};
use crate::neural::{
    kl_term, sample_categorical, softmax, softmax_cross_entropy, standard_normal_vec, unit_gaussian_nll, Adam,
    AdamConfig, DenseGrads, DenseNet, Matrix, NeuralError, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::rng::{stream, StreamRng};
use crate::transform::{Block, TransformError, Transformer};

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error("cannot train on an empty table")]
    EmptyTable,
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("condition on column {0} which is not categorical")]
    NotCategorical(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Architecture and optimization settings (`cvae.*` config keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub depth: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the numerical residual term in the reconstruction loss.
    pub numeric_weight: f64,
    /// Root of the training mask stream; `seed` when unset.
    pub mask_seed: Option<u64>,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            depth: 6,
            latent_dim: 64,
            hidden: 256,
            epochs: 20,
            batch: 256,
            lr: 1e-4,
            seed: 0,
            numeric_weight: 1.0,
            mask_seed: None,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<(), CvaeError> {
        if self.latent_dim == 0 || self.hidden == 0 || self.batch == 0 {
            return Err(CvaeError::InvalidConfig("latent_dim, hidden and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CvaeError::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.numeric_weight >= 0.0 && self.numeric_weight.is_finite()) {
            return Err(CvaeError::InvalidConfig("numeric_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kl: f64,
    pub reconstruction: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.kl + self.reconstruction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeGrads {
    pub encoder: DenseGrads,
    pub prior: DenseGrads,
    pub decoder: DenseGrads,
}

impl CvaeGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        out.extend(self.prior.slices());
        out.extend(self.decoder.slices());
        out
    }
}

/// Epoch-level training record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<LossParts>,
}

impl TrainTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(LossParts::total).collect()
    }
}

/// How categorical and mode blocks are decoded during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    #[default]
    Sample,
    Argmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub transformer: Transformer,
    pub config: CvaeConfig,
    pub encoder: DenseNet,
    pub prior: DenseNet,
    pub decoder: DenseNet,
}

/// Expands per-column masks (`b × K`) to the encoded width (`b × D`).
fn expand_masks(transformer: &Transformer, masks: &[&[u8]]) -> Matrix {
    let mut out = Matrix::zeros(masks.len(), transformer.width());
    for (r, m) in masks.iter().enumerate() {
        transformer.expand_mask(m, out.row_mut(r));
    }
    out
}

impl CvaeModel {
    /// Randomly initialized model.
    pub fn new(transformer: Transformer, config: CvaeConfig) -> Result<Self, CvaeError> {
        config.validate()?;
        let d = transformer.width();
        let l = config.latent_dim;
        let mut rng = stream(config.seed, "cvae-init");
        let encoder = DenseNet::mlp(2 * d, config.hidden, config.depth, 2 * l, &mut rng);
        let prior = DenseNet::mlp(2 * d, config.hidden, config.depth, 2 * l, &mut rng);
        let decoder = DenseNet::mlp(l, config.hidden, config.depth, d, &mut rng);
        Ok(CvaeModel { transformer, config, encoder, prior, decoder })
    }

    /// Reassembles a model from stored networks, checking their shapes.
    pub fn from_parts(
        transformer: Transformer,
        config: CvaeConfig,
        encoder: DenseNet,
        prior: DenseNet,
        decoder: DenseNet,
    ) -> Result<Self, CvaeError> {
        let d = transformer.width();
        let l = config.latent_dim;
        let ok = encoder.input_width() == 2 * d
            && encoder.output_width() == 2 * l
            && prior.input_width() == 2 * d
            && prior.output_width() == 2 * l
            && decoder.input_width() == l
            && decoder.output_width() == d;
        if !ok {
            return Err(NeuralError::ShapeMismatch("stored networks do not match the encoding layout".into()).into());
        }
        Ok(CvaeModel { transformer, config, encoder, prior, decoder })
    }

    pub fn width(&self) -> usize {
        self.transformer.width()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.prior.parameter_count() + self.decoder.parameter_count()
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite() && self.prior.all_finite() && self.decoder.all_finite()
    }

    /// Reconstruction loss of one decoder output row against its target,
    /// writing the gradient (scaled by `scale`) into `grad`.
    fn reconstruction(&self, out: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        for block in &self.transformer.layout.blocks {
            match *block {
                Block::Categorical { offset, width, .. } => {
                    let label = crate::neural::argmax(&target[offset..offset + width]);
                    loss += softmax_cross_entropy(
                        &out[offset..offset + width],
                        label,
                        scale,
                        &mut grad[offset..offset + width],
                    );
                }
                Block::Numerical { offset, modes, .. } => {
                    let mode = crate::neural::argmax(&target[offset..offset + modes]);
                    loss += softmax_cross_entropy(
                        &out[offset..offset + modes],
                        mode,
                        scale,
                        &mut grad[offset..offset + modes],
                    );
                    let w = self.config.numeric_weight;
                    let (l, g) = unit_gaussian_nll(out[offset + modes], target[offset + modes]);
                    loss += w * l;
                    grad[offset + modes] = scale * w * g;
                }
            }
        }
        loss
    }

    /// Negative ELBO averaged over the batch, with parameter gradients.
    /// `a` is `b × D`, `mask` the expanded `b × D` mask and `noise` `b × L`.
    pub fn loss_and_grads(
        &self,
        a: &Matrix,
        mask: &Matrix,
        noise: &Matrix,
    ) -> Result<(LossParts, CvaeGrads), CvaeError> {
        let (parts, grads) = self.evaluate(a, mask, noise, true)?;
        Ok((parts, grads.expect("gradients requested")))
    }

    /// Loss only.
    pub fn loss(&self, a: &Matrix, mask: &Matrix, noise: &Matrix) -> Result<LossParts, CvaeError> {
        Ok(self.evaluate(a, mask, noise, false)?.0)
    }

    fn evaluate(
        &self,
        a: &Matrix,
        mask: &Matrix,
        noise: &Matrix,
        want_grads: bool,
    ) -> Result<(LossParts, Option<CvaeGrads>), CvaeError> {
        let b = a.rows();
        let d = self.width();
        let l = self.latent_dim();
        if a.cols() != d || mask.cols() != d || mask.rows() != b || noise.rows() != b || noise.cols() != l {
            return Err(NeuralError::ShapeMismatch("batch, mask or noise shape".into()).into());
        }
        let mut observed = a.clone();
        for (v, m) in observed.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= 1.0 - m;
        }
        let enc_in = a.hconcat(mask)?;
        let pri_in = observed.hconcat(mask)?;
        let enc_tape = self.encoder.forward_cached(&enc_in)?;
        let pri_tape = self.prior.forward_cached(&pri_in)?;
        let q_head = enc_tape.output();
        let p_head = pri_tape.output();

        let scale = 1.0 / b as f64;
        let mut z = Matrix::zeros(b, l);
        let mut kl_total = 0.0;
        let mut d_q = Matrix::zeros(b, 2 * l);
        let mut d_p = Matrix::zeros(b, 2 * l);
        for r in 0..b {
            let (qh, ph) = (q_head.row(r), p_head.row(r));
            for i in 0..l {
                let lv_q = qh[l + i].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                let lv_p = ph[l + i].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                let (kl, g_mq, g_lq, g_mp, g_lp) = kl_term(qh[i], lv_q, ph[i], lv_p);
                kl_total += kl;
                z.set(r, i, qh[i] + (0.5 * lv_q).exp() * noise.get(r, i));
                d_q.set(r, i, scale * g_mq);
                d_q.set(r, l + i, scale * g_lq);
                d_p.set(r, i, scale * g_mp);
                d_p.set(r, l + i, scale * g_lp);
            }
        }

        let dec_tape = self.decoder.forward_cached(&z)?;
        let out = dec_tape.output();
        let mut d_out = Matrix::zeros(b, d);
        let mut recon_total = 0.0;
        for r in 0..b {
            recon_total += self.reconstruction(out.row(r), a.row(r), scale, d_out.row_mut(r));
        }
        let parts = LossParts { kl: kl_total * scale, reconstruction: recon_total * scale };
        if !want_grads {
            return Ok((parts, None));
        }

        let (decoder, d_z) = self.decoder.backward(&dec_tape, &d_out)?;
        for r in 0..b {
            let qh = q_head.row(r);
            for i in 0..l {
                let dz = d_z.get(r, i);
                let raw = qh[l + i];
                let lv_q = raw.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                let gm = d_q.get(r, i) + dz;
                d_q.set(r, i, gm);
                let gl = d_q.get(r, l + i) + dz * 0.5 * (0.5 * lv_q).exp() * noise.get(r, i);
                d_q.set(r, l + i, if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) { gl } else { 0.0 });
                let raw_p = p_head.get(r, l + i);
                if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw_p) {
                    d_p.set(r, l + i, 0.0);
                }
            }
        }
        let (encoder, _) = self.encoder.backward(&enc_tape, &d_q)?;
        let (prior, _) = self.prior.backward(&pri_tape, &d_p)?;
        Ok((parts, Some(CvaeGrads { encoder, prior, decoder })))
    }

    fn apply(&mut self, adam: &mut Adam, grads: &CvaeGrads) -> Result<(), CvaeError> {
        let mut params = self.encoder.params_mut();
        params.extend(self.prior.params_mut());
        params.extend(self.decoder.params_mut());
        adam.step(params, grads.slices())?;
        Ok(())
    }

    /// Trains on `table` (which must use the transformer's schema and
    /// vocabulary). Masks are drawn fresh for every batch.
    pub fn train(&mut self, table: &Table, policy: &MaskPolicy) -> Result<TrainTrace, CvaeError> {
        if table.is_empty() {
            return Err(CvaeError::EmptyTable);
        }
        let strata = match policy.kind {
            MaskKind::Stratified => {
                Some(compute_strata(table).map_err(|_| CvaeError::EmptyTable)?)
            }
            _ => None,
        };
        let encoded = self.transformer.encode_table(table)?;
        let d = self.width();
        let l = self.latent_dim();
        let seed = self.config.seed;
        let mut order_rng = stream(seed, "cvae-order");
        let mut mask_rng = stream(self.config.mask_seed.unwrap_or(seed), "cvae-mask");
        let mut noise_rng = stream(seed, "cvae-noise");
        let mut adam = Adam::new(AdamConfig { lr: self.config.lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..table.row_count()).collect();
        let mut trace = TrainTrace::default();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut order_rng);
            let mut sum = LossParts::default();
            let mut seen = 0usize;
            for (batch_idx, rows) in order.chunks(self.config.batch).enumerate() {
                let b = rows.len();
                let mut a = Matrix::zeros(b, d);
                for (r, &row) in rows.iter().enumerate() {
                    a.row_mut(r).copy_from_slice(&encoded[row * d..(row + 1) * d]);
                }
                let mask = policy.mask(table, rows, strata.as_ref(), &mut mask_rng)?;
                let views: Vec<&[u8]> = (0..b).map(|r| mask.row(r)).collect();
                let mask = expand_masks(&self.transformer, &views);
                let noise = Matrix::from_vec(b, l, standard_normal_vec(b * l, &mut noise_rng))?;
                let (parts, grads) = self.loss_and_grads(&a, &mask, &noise)?;
                if !parts.total().is_finite() {
                    return Err(CvaeError::NonFiniteLoss { epoch, batch: batch_idx });
                }
                self.apply(&mut adam, &grads)?;
                sum.kl += parts.kl * b as f64;
                sum.reconstruction += parts.reconstruction * b as f64;
                seen += b;
            }
            let mean = LossParts { kl: sum.kl / seen as f64, reconstruction: sum.reconstruction / seen as f64 };
            log::info!(
                "epoch {}/{}: loss {:.4} (kl {:.4}, recon {:.4})",
                epoch + 1,
                self.config.epochs,
                mean.total(),
                mean.kl,
                mean.reconstruction
            );
            trace.epochs.push(mean);
        }
        Ok(trace)
    }

    /// Encoded single-row conditioning input and its column mask.
    fn condition_inputs(&self, conditions: &[(usize, String)]) -> Result<(Vec<f64>, Vec<u8>), CvaeError> {
        let schema = &self.transformer.schema;
        let mut a = vec![0.0; self.width()];
        let mut columns = BTreeSet::new();
        for (c, value) in conditions {
            if schema.kind(*c) != ColumnKind::Categorical {
                return Err(CvaeError::NotCategorical(schema.name(*c).to_owned()));
            }
            let label = self.transformer.label(*c, value)?;
            let offset = self.transformer.layout.block(*c).offset();
            a[offset + label as usize] = 1.0;
            columns.insert(*c);
        }
        Ok((a, query_mask(schema, &columns)?))
    }

    /// Raw decoder outputs for `n` latent draws from the conditional prior.
    pub fn generate_encoded<R: Rng + ?Sized>(
        &self,
        conditions: &[(usize, String)],
        n: usize,
        rng: &mut R,
    ) -> Result<Matrix, CvaeError> {
        let (a, column_mask) = self.condition_inputs(conditions)?;
        let mut mask = vec![0.0; self.width()];
        self.transformer.expand_mask(&column_mask, &mut mask);
        let mut input = a;
        input.extend_from_slice(&mask);
        let head = self.prior.forward_vec(&input)?;
        let l = self.latent_dim();
        let std: Vec<f64> = head[l..].iter().map(|v| (0.5 * v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp()).collect();
        let mut z = Matrix::from_vec(n, l, standard_normal_vec(n * l, rng))?;
        for r in 0..n {
            for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                *v = head[i] + std[i] * *v;
            }
        }
        Ok(self.decoder.forward(&z)?)
    }

    /// Generates `n` complete rows conditioned on categorical equalities.
    /// Conditioned columns are generated like any other and may disagree with
    /// the condition.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        conditions: &[(usize, String)],
        n: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<Row>, CvaeError> {
        let out = self.generate_encoded(conditions, n, rng)?;
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let o = out.row(r);
            let mut row = Vec::with_capacity(self.transformer.schema.len());
            for block in &self.transformer.layout.blocks {
                let pick = |logits: &[f64], rng: &mut R| match decoding {
                    Decoding::Sample => sample_categorical(&softmax(logits), rng),
                    Decoding::Argmax => crate::neural::argmax(logits),
                };
                match *block {
                    Block::Categorical { column, offset, width } => {
                        let label = pick(&o[offset..offset + width], rng);
                        let dict = self.transformer.dictionary(column).expect("fitted dictionary");
                        row.push(Cell::Cat(dict.values()[label].clone()));
                    }
                    Block::Numerical { column, offset, modes } => {
                        let mode = pick(&o[offset..offset + modes], rng);
                        let norm = self.transformer.normalizer(column).expect("fitted normalizer");
                        row.push(Cell::Num(norm.denormalize(mode, o[offset + modes])));
                    }
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// Reconstruction loss of `rows` under the conditional prior: `z` is drawn
    /// from `p(z | a ∘ (1 − m), m)` instead of the encoder. Used to compare
    /// how well differently trained models fill in masked cells.
    pub fn conditional_nll(&self, table: &Table, rows: &[usize], masks: &[Vec<u8>], seed: u64) -> Result<f64, CvaeError> {
        let d = self.width();
        let l = self.latent_dim();
        let mut rng: StreamRng = stream(seed, "cvae-conditional-nll");
        let mut total = 0.0;
        let mut grad = vec![0.0; d];
        for (&row, m) in rows.iter().zip(masks) {
            let a = self.transformer.encode_row(table.row(row))?;
            let mut md = vec![0.0; d];
            self.transformer.expand_mask(m, &mut md);
            let mut input: Vec<f64> = a.iter().zip(&md).map(|(v, m)| v * (1.0 - m)).collect();
            input.extend_from_slice(&md);
            let head = self.prior.forward_vec(&input)?;
            let noise = standard_normal_vec(l, &mut rng);
            let z: Vec<f64> =
                (0..l).map(|i| head[i] + (0.5 * head[l + i].clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * noise[i]).collect();
            let out = self.decoder.forward_vec(&z)?;
            total += self.reconstruction(&out, &a, 1.0, &mut grad);
        }
        Ok(total / rows.len().max(1) as f64)
    }
}

/// Per-column comparison of generated vs empirical marginals.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Total-variation distance per categorical column.
    pub categorical_tv: BTreeMap<String, f64>,
    /// `(generated mean, table mean, generated std, table std)` per numerical column.
    pub numerical: BTreeMap<String, (f64, f64, f64, f64)>,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Compares `n` unconditionally generated rows with the table's marginals.
pub fn marginal_fidelity_report<R: Rng + ?Sized>(
    model: &CvaeModel,
    table: &Table,
    n: usize,
    rng: &mut R,
) -> Result<FidelityReport, CvaeError> {
    let generated = model.generate(&[], n, Decoding::Sample, rng)?;
    let schema = table.schema();
    let mut report = FidelityReport::default();
    for c in 0..schema.len() {
        let name = schema.name(c).to_owned();
        match schema.kind(c) {
            ColumnKind::Categorical => {
                let mut freq: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
                for row in table.rows() {
                    freq.entry(row[c].as_cat().unwrap_or_default()).or_default().0 += 1.0 / table.row_count() as f64;
                }
                for row in &generated {
                    freq.entry(row[c].as_cat().unwrap_or_default()).or_default().1 += 1.0 / n as f64;
                }
                let tv = 0.5 * freq.values().map(|(p, q)| (p - q).abs()).sum::<f64>();
                report.categorical_tv.insert(name, tv);
            }
            ColumnKind::Numerical => {
                let gen: Vec<f64> = generated.iter().filter_map(|r| r[c].as_num()).collect();
                let (gm, gs) = moments(&gen);
                let (tm, ts) = moments(&table.numeric_column(c));
                report.numerical.insert(name, (gm, tm, gs, ts));
            }
        }
    }
    Ok(report)
}
