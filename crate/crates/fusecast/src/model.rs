//! End-to-end forecaster: window encoder, text fusion, linear decoder,
//! training loop with early stopping, and binary checkpoints.
//!
//! Text embeddings are produced by the frozen hashing encoder and enter
//! here as plain matrices; the only learnable text-side piece is a linear
//! projection to the model width. Event mode Disabled swaps the raw text
//! embeddings for zeros, which is the no-event baseline.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionKind};
use crate::numerics::{xavier_init, Adam, Matrix, NodeId, ParamId, ParamSet, RngState, Tape};
use crate::stenc::{STEncoderConfig, StEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventMode {
    Enabled,
    /// Feed all-zero text embeddings regardless of retrieved events.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub st: STEncoderConfig,
    pub fusion_kind: FusionKind,
    pub heads: usize,
    pub ffn_layers: usize,
    /// Width of the frozen hashed text embeddings.
    pub d_text: usize,
    pub h_in: usize,
    pub h_out: usize,
    pub event_mode: EventMode,
}

impl ModelConfig {
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig { hidden: self.st.hidden, heads: self.heads, ffn_layers: self.ffn_layers }
    }

    pub fn validate(&self) -> Result<()> {
        self.st.validate()?;
        self.fusion_config().validate()?;
        if self.d_text == 0 {
            return Err(Error::config("d_text must be positive"));
        }
        if self.h_in < self.st.temporal_kernel {
            return Err(Error::config("h_in shorter than the temporal kernel"));
        }
        if self.h_out == 0 {
            return Err(Error::config("h_out must be positive"));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub stats: NormStats,
    pub a_hat: Matrix,
    /// Seed the parameter set was initialized from; checkpoints carry it
    /// so loading can rebuild an identical parameter layout.
    pub seed: u64,
    encoder: StEncoder,
    fusion: Fusion,
    text_w: ParamId,
    text_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Shared forward pass. Free function so training can hold disjoint
/// borrows of the model's fields while the tape owns the parameter set.
#[allow(clippy::too_many_arguments)]
fn forward_nodes(
    tape: &mut Tape,
    encoder: &StEncoder,
    fusion: &Fusion,
    text_w: ParamId,
    text_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    config: &ModelConfig,
    a_hat: &Matrix,
    x: &Matrix,
    text_raw: &Matrix,
    dropout: Option<&mut RngState>,
) -> Result<NodeId> {
    let n = a_hat.rows();
    if x.shape() != (n, config.h_in) {
        return Err(Error::config(format!(
            "window is {:?}, expected ({n}, {})",
            x.shape(),
            config.h_in
        )));
    }
    if text_raw.shape() != (n, config.d_text) {
        return Err(Error::config(format!(
            "text embeddings are {:?}, expected ({n}, {})",
            text_raw.shape(),
            config.d_text
        )));
    }
    let e_st = encoder.encode(tape, x, a_hat, dropout)?;
    let raw = match config.event_mode {
        EventMode::Enabled => text_raw.clone(),
        EventMode::Disabled => Matrix::zeros(n, config.d_text),
    };
    let raw_node = tape.constant(raw);
    let proj = tape.param(text_w);
    let bias = tape.param(text_b);
    let lifted = tape.matmul(raw_node, proj)?;
    let e_text = tape.add_row_broadcast(lifted, bias)?;
    let fused = fusion.fuse(tape, e_st, e_text)?;
    let w = tape.param(dec_w);
    let b = tape.param(dec_b);
    let lin = tape.matmul(fused, w)?;
    tape.add_row_broadcast(lin, b)
}

impl Model {
    pub fn new(config: ModelConfig, a_hat: Matrix, stats: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if a_hat.rows() != a_hat.cols() {
            return Err(Error::invalid("adjacency must be square"));
        }
        let d = config.st.hidden;
        let rng = RngState::new(seed);
        let mut params = ParamSet::new();
        let encoder =
            StEncoder::new(config.st, "encoder", &mut params, &mut rng.split("init/encoder"))?;
        let mut text_rng = rng.split("init/text");
        let text_w = params.add("text.proj.w", xavier_init(config.d_text, d, &mut text_rng));
        let text_b = params.add("text.proj.b", Matrix::zeros(1, d));
        let fusion = Fusion::new(
            config.fusion_kind,
            config.fusion_config(),
            "fusion",
            &mut params,
            &mut rng.split("init/fusion"),
        )?;
        let mut dec_rng = rng.split("init/decoder");
        let dec_w = params.add("decoder.w", xavier_init(d, config.h_out, &mut dec_rng));
        let dec_b = params.add("decoder.b", Matrix::zeros(1, config.h_out));
        Ok(Self { config, params, stats, a_hat, seed, encoder, fusion, text_w, text_b, dec_w, dec_b })
    }

    pub fn n_nodes(&self) -> usize {
        self.a_hat.rows()
    }

    /// Normalized predictions, N x H_out. Deterministic (no dropout).
    pub fn forward(&mut self, x: &Matrix, text_raw: &Matrix) -> Result<Matrix> {
        let params = &mut self.params;
        let mut tape = Tape::new(params);
        let out = forward_nodes(
            &mut tape,
            &self.encoder,
            &self.fusion,
            self.text_w,
            self.text_b,
            self.dec_w,
            self.dec_b,
            &self.config,
            &self.a_hat,
            x,
            text_raw,
            None,
        )?;
        Ok(tape.value(out).clone())
    }

    /// Predictions in original units.
    pub fn predict_denorm(&mut self, x: &Matrix, text_raw: &Matrix) -> Result<Matrix> {
        let normed = self.forward(x, text_raw)?;
        Ok(normed.map(|v| v * self.stats.std + self.stats.mean))
    }

    /// Pooled masked MAE over a sample set, in original units.
    pub fn eval_mae(&mut self, samples: &[WindowSample], texts: &[Matrix]) -> Result<f64> {
        if samples.len() != texts.len() {
            return Err(Error::invalid("samples and text embeddings differ in length"));
        }
        let mut abs_sum = 0.0;
        let mut count = 0.0;
        for (sample, text) in samples.iter().zip(texts) {
            let pred = self.predict_denorm(&sample.x, text)?;
            for i in 0..pred.data().len() {
                let m = sample.y_mask.data()[i];
                abs_sum += m * (pred.data()[i] - sample.y.data()[i]).abs();
                count += m;
            }
        }
        if count == 0.0 {
            return Err(Error::EmptyMask);
        }
        Ok(abs_sum / count)
    }

    /// Attention maps for the cross-attention variant, None otherwise.
    pub fn attention_maps(&mut self, x: &Matrix, text_raw: &Matrix) -> Result<Option<Vec<Matrix>>> {
        let Fusion::CrossAttention(ref ca) = self.fusion else {
            return Ok(None);
        };
        let n = self.a_hat.rows();
        let raw = match self.config.event_mode {
            EventMode::Enabled => text_raw.clone(),
            EventMode::Disabled => Matrix::zeros(n, self.config.d_text),
        };
        let e_st = {
            let params = &mut self.params;
            let mut tape = Tape::new(params);
            let id = self.encoder.encode(&mut tape, x, &self.a_hat, None)?;
            tape.value(id).clone()
        };
        let mut e_text = raw.matmul(&self.params.get(self.text_w).value)?;
        let bias = self.params.get(self.text_b).value.clone();
        for r in 0..e_text.rows() {
            for (v, b) in e_text.row_mut(r).iter_mut().zip(bias.row(0)) {
                *v += b;
            }
        }
        Ok(Some(ca.attention_weights(&self.params, &e_st, &e_text)?))
    }

    /// Intermediate representations for one sample: the encoder output,
    /// the projected text embedding, and the fused state the decoder sees.
    pub fn embeddings(&mut self, x: &Matrix, text_raw: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let n = self.a_hat.rows();
        let raw = match self.config.event_mode {
            EventMode::Enabled => text_raw.clone(),
            EventMode::Disabled => Matrix::zeros(n, self.config.d_text),
        };
        let (encoder, fusion, a_hat) = (&self.encoder, &self.fusion, &self.a_hat);
        let (text_w, text_b) = (self.text_w, self.text_b);
        let params = &mut self.params;
        let mut tape = Tape::new(params);
        let e_st = encoder.encode(&mut tape, x, a_hat, None)?;
        let raw_node = tape.constant(raw);
        let proj = tape.param(text_w);
        let bias = tape.param(text_b);
        let lifted = tape.matmul(raw_node, proj)?;
        let e_text = tape.add_row_broadcast(lifted, bias)?;
        let fused = fusion.fuse(&mut tape, e_st, e_text)?;
        Ok((tape.value(e_st).clone(), tape.value(e_text).clone(), tape.value(fused).clone()))
    }

    /// Compare analytic gradients of the full pipeline loss against central
    /// differences on one sample. The caller picks the finite-difference step.
    pub fn grad_check(
        &mut self,
        x: &Matrix,
        text_raw: &Matrix,
        y: &Matrix,
        mask: &Matrix,
        step: f64,
    ) -> Result<crate::numerics::GradCheckReport> {
        let (tw, tb) = (self.text_w, self.text_b);
        let (dw, db) = (self.dec_w, self.dec_b);
        let (encoder, fusion, config, a_hat, stats) =
            (&self.encoder, &self.fusion, &self.config, &self.a_hat, self.stats);
        crate::numerics::grad_check(
            &mut self.params,
            |params, want_grads| {
                let mut tape = Tape::new(params);
                let pred = forward_nodes(
                    &mut tape, encoder, fusion, tw, tb, dw, db, config, a_hat, x, text_raw, None,
                )?;
                let loss =
                    tape.masked_mae(pred, y.clone(), mask.clone(), stats.mean, stats.std)?;
                let value = tape.value(loss).get(0, 0);
                if want_grads {
                    tape.backward(loss)?;
                }
                Ok(value)
            },
            step,
        )
    }

    /// Train with minibatch masked MAE on denormalized predictions and
    /// early stopping on validation MAE. Restores the best-val parameters
    /// before returning.
    pub fn train(
        &mut self,
        train: &[WindowSample],
        train_texts: &[Matrix],
        val: &[WindowSample],
        val_texts: &[Matrix],
        tc: &TrainConfig,
    ) -> Result<TrainReport> {
        tc.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("train and val splits must be nonempty"));
        }
        if train.len() != train_texts.len() || val.len() != val_texts.len() {
            return Err(Error::invalid("samples and text embeddings differ in length"));
        }
        let mut opt = Adam::new(tc.lr);
        let rng = RngState::new(tc.seed);
        let (text_w, text_b) = (self.text_w, self.text_b);
        let (dec_w, dec_b) = (self.dec_w, self.dec_b);
        let (mean, std) = (self.stats.mean, self.stats.std);

        let mut history = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0;
        let mut best_params: Option<ParamSet> = None;
        let mut stale = 0usize;

        for epoch in 1..=tc.max_epochs {
            let t0 = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            rng.split(&format!("shuffle/{epoch}")).shuffle(&mut order);
            let mut dropout = rng.split(&format!("dropout/{epoch}"));

            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;
            for (batch_idx, chunk) in order.chunks(tc.batch_size).enumerate() {
                self.params.zero_grads();
                {
                    let params = &mut self.params;
                    let mut tape = Tape::new(params);
                    let mut total: Option<NodeId> = None;
                    let mut batch_n = 0usize;
                    for &i in chunk {
                        let pred = forward_nodes(
                            &mut tape,
                            &self.encoder,
                            &self.fusion,
                            text_w,
                            text_b,
                            dec_w,
                            dec_b,
                            &self.config,
                            &self.a_hat,
                            &train[i].x,
                            &train_texts[i],
                            Some(&mut dropout),
                        )?;
                        let loss = tape.masked_mae(
                            pred,
                            train[i].y.clone(),
                            train[i].y_mask.clone(),
                            mean,
                            std,
                        )?;
                        loss_sum += tape.value(loss).get(0, 0);
                        loss_count += 1;
                        total = Some(match total {
                            Some(t) => tape.add(t, loss)?,
                            None => loss,
                        });
                        batch_n += 1;
                    }
                    let total = total.expect("chunks are nonempty");
                    let scaled = tape.scale(total, 1.0 / batch_n as f64);
                    let value = tape.value(scaled).get(0, 0);
                    if !value.is_finite() {
                        return Err(Error::Diverged { epoch, batch: batch_idx, lr: tc.lr });
                    }
                    tape.backward(scaled)?;
                }
                opt.step(&mut self.params);
            }

            let train_mae = loss_sum / loss_count as f64;
            let val_mae = self.eval_mae(val, val_texts)?;
            history.push(EpochStats {
                epoch,
                train_mae,
                val_mae,
                seconds: t0.elapsed().as_secs_f64(),
            });

            if val_mae < best_val {
                best_val = val_mae;
                best_epoch = epoch;
                best_params = Some(self.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= tc.patience {
                    break;
                }
            }
        }

        if let Some(best) = best_params {
            self.params = best;
        }
        Ok(TrainReport { history, best_val, best_epoch })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 8, max_epochs: 100, patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_val: f64,
    pub best_epoch: usize,
}

/// `epoch,train_mae,val_mae,seconds` rows for offline plotting.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_mae,val_mae,seconds\n");
    for e in history {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_mae, e.val_mae, e.seconds));
    }
    out
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FUSE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stats: NormStats,
    seed: u64,
    epoch: usize,
    best_val: f64,
    adjacency_rows: usize,
    adjacency_cols: usize,
    tensors: Vec<TensorMeta>,
}

pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub best_val: f64,
}

/// Layout: magic, version u32 LE, header length u32 LE, JSON header,
/// adjacency then every named tensor as raw little-endian f64 rows, and a
/// trailing CRC32 of all preceding bytes.
pub fn save_checkpoint(model: &Model, epoch: usize, best_val: f64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config,
        stats: model.stats,
        seed: model.seed,
        epoch,
        best_val,
        adjacency_rows: model.a_hat.rows(),
        adjacency_cols: model.a_hat.cols(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorMeta {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header_json.len() + 8 * model.params.num_scalars() + 16);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for &v in model.a_hat.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.params.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupt or truncated".into()));
    }
    if body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("four bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().expect("four bytes")) as usize;
    let payload_at = 12 + header_len;
    if body.len() < payload_at {
        return Err(Error::Checkpoint("header extends past end of file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..payload_at])?;

    let mut offset = payload_at;
    let read_matrix = |rows: usize, cols: usize, offset: &mut usize| -> Result<Matrix> {
        let need = 8 * rows * cols;
        if body.len() < *offset + need {
            return Err(Error::Checkpoint("tensor payload truncated".into()));
        }
        let data: Vec<f64> = body[*offset..*offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        *offset += need;
        Matrix::from_vec(rows, cols, data)
    };

    let a_hat = read_matrix(header.adjacency_rows, header.adjacency_cols, &mut offset)?;
    let mut model = Model::new(header.config, a_hat, header.stats, header.seed)?;
    for meta in &header.tensors {
        let value = read_matrix(meta.rows, meta.cols, &mut offset)?;
        let id = model
            .params
            .id_by_name(&meta.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", meta.name)))?;
        let current = &model.params.get(id).value;
        if current.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {:?}, model expects {:?}",
                meta.name,
                value.shape(),
                current.shape()
            )));
        }
        model.params.get_mut(id).value = value;
    }
    if offset != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { model, epoch: header.epoch, best_val: header.best_val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;
    use crate::numerics::grad_check;

    fn toy_config(kind: FusionKind, event_mode: EventMode) -> ModelConfig {
        ModelConfig {
            st: STEncoderConfig { layers: 2, hidden: 8, temporal_kernel: 2, dropout_rate: 0.0 },
            fusion_kind: kind,
            heads: 2,
            ffn_layers: 2,
            d_text: 16,
            h_in: 6,
            h_out: 3,
            event_mode,
        }
    }

    fn toy_adjacency(n: usize, rng: &mut RngState) -> Matrix {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.uniform(0.2, 1.0);
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
        normalize_adjacency(&w).unwrap()
    }

    fn toy_model(kind: FusionKind, event_mode: EventMode, seed: u64) -> Model {
        let mut rng = RngState::new(900 + seed);
        let a = toy_adjacency(4, &mut rng);
        let stats = NormStats { mean: 50.0, std: 10.0 };
        Model::new(toy_config(kind, event_mode), a, stats, seed).unwrap()
    }

    fn toy_sample(rng: &mut RngState, n: usize, h_in: usize, h_out: usize) -> WindowSample {
        WindowSample {
            anchor: h_in - 1,
            x: Matrix::from_fn(n, h_in, |_, _| rng.uniform(-1.0, 1.0)),
            x_mask: Matrix::full(n, h_in, 1.0),
            y: Matrix::from_fn(n, h_out, |_, _| rng.uniform(30.0, 70.0)),
            y_mask: Matrix::full(n, h_out, 1.0),
        }
    }

    #[test]
    fn forward_shape_is_nodes_by_horizon() {
        for kind in
            [FusionKind::CrossAttention, FusionKind::Gating, FusionKind::Add, FusionKind::Concat]
        {
            let mut model = toy_model(kind, EventMode::Enabled, 1);
            let mut rng = RngState::new(2);
            let x = Matrix::from_fn(4, 6, |_, _| rng.uniform(-1.0, 1.0));
            let text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));
            let out = model.forward(&x, &text).unwrap();
            assert_eq!(out.shape(), (4, 3));
        }
    }

    #[test]
    fn disabled_events_equal_empty_texts() {
        let mut enabled = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 3);
        let mut disabled = toy_model(FusionKind::CrossAttention, EventMode::Disabled, 3);
        let mut rng = RngState::new(4);
        let x = Matrix::from_fn(4, 6, |_, _| rng.uniform(-1.0, 1.0));
        let empty_text = Matrix::zeros(4, 16);
        let nonzero_text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));
        let a = enabled.forward(&x, &empty_text).unwrap();
        let b = disabled.forward(&x, &nonzero_text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_composes_the_module_pipeline() {
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 5);
        let mut rng = RngState::new(6);
        let x = Matrix::from_fn(4, 6, |_, _| rng.uniform(-1.0, 1.0));
        let text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));
        let out = model.forward(&x, &text).unwrap();

        // Same pipeline assembled from the public pieces.
        let a_hat = model.a_hat.clone();
        let e_st = model.encoder.encode_value(&mut model.params, &x, &a_hat).unwrap().values;
        let e_text = text.matmul(&model.params.get(model.text_w).value).unwrap();
        let fused = {
            let params = &mut model.params;
            let mut tape = Tape::new(params);
            let a = tape.constant(e_st);
            let b = tape.constant(e_text);
            let f = model.fusion.fuse(&mut tape, a, b).unwrap();
            tape.value(f).clone()
        };
        let expected = {
            let lin = fused.matmul(&model.params.get(model.dec_w).value).unwrap();
            let bias = model.params.get(model.dec_b).value.clone();
            Matrix::from_fn(lin.rows(), lin.cols(), |r, c| lin.get(r, c) + bias.get(0, c))
        };
        let diff = out.sub(&expected).unwrap().max_abs();
        assert!(diff < 1e-12, "composition diff {diff}");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 7);
        let mut rng = RngState::new(8);
        let sample = toy_sample(&mut rng, 4, 6, 3);
        let mut mask = Matrix::full(4, 3, 1.0);
        mask.set(1, 2, 0.0);
        mask.set(3, 0, 0.0);
        let text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));
        let (tw, tb) = (model.text_w, model.text_b);
        let (dw, db) = (model.dec_w, model.dec_b);
        let (encoder, fusion, config, a_hat, stats) =
            (&model.encoder, &model.fusion, &model.config, &model.a_hat, model.stats);
        let report = grad_check(
            &mut model.params,
            |params, want_grads| {
                let mut tape = Tape::new(params);
                let pred = forward_nodes(
                    &mut tape, encoder, fusion, tw, tb, dw, db, config, a_hat, &sample.x, &text,
                    None,
                )?;
                let loss =
                    tape.masked_mae(pred, sample.y.clone(), mask.clone(), stats.mean, stats.std)?;
                let value = tape.value(loss).get(0, 0);
                if want_grads {
                    tape.backward(loss)?;
                }
                Ok(value)
            },
            1e-5,
        )
        .unwrap();
        let worst = report.worst_param().map(|p| p.name.clone()).unwrap_or_default();
        assert!(report.max_rel_err() < 1e-4, "worst {} at {worst}", report.max_rel_err());
    }

    #[test]
    fn masked_targets_never_touch_gradients() {
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 9);
        let mut rng = RngState::new(10);
        let sample = toy_sample(&mut rng, 4, 6, 3);
        let mut mask = Matrix::full(4, 3, 1.0);
        mask.set(0, 1, 0.0);
        mask.set(2, 2, 0.0);
        let text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));

        let grads_with = |model: &mut Model, y: &Matrix| -> Vec<Matrix> {
            model.params.zero_grads();
            let (tw, tb) = (model.text_w, model.text_b);
            let (dw, db) = (model.dec_w, model.dec_b);
            let stats = model.stats;
            {
                let encoder = &model.encoder;
                let fusion = &model.fusion;
                let config = &model.config;
                let a_hat = &model.a_hat;
                let params = &mut model.params;
                let mut tape = Tape::new(params);
                let pred = forward_nodes(
                    &mut tape, encoder, fusion, tw, tb, dw, db, config, a_hat, &sample.x, &text,
                    None,
                )
                .unwrap();
                let loss = tape
                    .masked_mae(pred, y.clone(), mask.clone(), stats.mean, stats.std)
                    .unwrap();
                tape.backward(loss).unwrap();
            }
            model.params.iter().map(|p| p.grad.clone()).collect()
        };

        let base = grads_with(&mut model, &sample.y);
        let mut poked = sample.y.clone();
        poked.set(0, 1, poked.get(0, 1) + 250.0);
        poked.set(2, 2, -400.0);
        let after = grads_with(&mut model, &poked);
        assert_eq!(base, after, "masked targets leaked into gradients");
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 11);
        let mut rng = RngState::new(12);
        let sample = toy_sample(&mut rng, 4, 6, 3);
        let text = Matrix::zeros(4, 16);
        let before: Vec<Matrix> = model.params.iter().map(|p| p.value.clone()).collect();
        model.params.zero_grads();
        let (tw, tb) = (model.text_w, model.text_b);
        let (dw, db) = (model.dec_w, model.dec_b);
        let stats = model.stats;
        {
            let encoder = &model.encoder;
            let fusion = &model.fusion;
            let config = &model.config;
            let a_hat = &model.a_hat;
            let params = &mut model.params;
            let mut tape = Tape::new(params);
            let pred = forward_nodes(
                &mut tape, encoder, fusion, tw, tb, dw, db, config, a_hat, &sample.x, &text, None,
            )
            .unwrap();
            let loss = tape
                .masked_mae(pred, sample.y.clone(), sample.y_mask.clone(), stats.mean, stats.std)
                .unwrap();
            tape.backward(loss).unwrap();
        }
        Adam::new(0.0).step(&mut model.params);
        let after: Vec<Matrix> = model.params.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn parameter_list_is_exactly_the_learnable_pipeline() {
        let model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 13);
        let names: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
        // The frozen text hasher owns no parameters; only its projection
        // appears here.
        let expected = [
            "encoder.input.w",
            "encoder.input.b",
            "encoder.layer0.tap0.w",
            "encoder.layer0.tap1.w",
            "encoder.layer0.temporal.b",
            "encoder.layer0.spatial.w",
            "encoder.layer0.spatial.b",
            "encoder.layer1.tap0.w",
            "encoder.layer1.tap1.w",
            "encoder.layer1.temporal.b",
            "encoder.layer1.spatial.w",
            "encoder.layer1.spatial.b",
            "text.proj.w",
            "text.proj.b",
            "fusion.wq",
            "fusion.wk",
            "fusion.wv",
            "fusion.wo",
            "fusion.ln1.gamma",
            "fusion.ln1.beta",
            "fusion.ln2.gamma",
            "fusion.ln2.beta",
            "fusion.ffn0.w",
            "fusion.ffn0.b",
            "fusion.ffn1.w",
            "fusion.ffn1.b",
            "decoder.w",
            "decoder.b",
        ];
        assert_eq!(names, expected);
        assert!(model.params.iter().all(|p| p.trainable));
    }

    fn training_fixture(
        seed: u64,
        n_samples: usize,
    ) -> (Vec<WindowSample>, Vec<Matrix>) {
        // Noiseless sinusoid windows in normalized/original unit pairs.
        let mut rng = RngState::new(seed);
        let stats = NormStats { mean: 50.0, std: 10.0 };
        let mut samples = Vec::new();
        let mut texts = Vec::new();
        let phase: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, std::f64::consts::TAU)).collect();
        for _ in 0..n_samples {
            let start = rng.uniform(0.0, 100.0);
            let raw = |node: usize, t: usize| -> f64 {
                50.0 + 10.0 * (0.2 * (start + t as f64) + phase[node]).sin()
            };
            let x = Matrix::from_fn(4, 6, |node, t| (raw(node, t) - stats.mean) / stats.std);
            let y = Matrix::from_fn(4, 3, |node, t| raw(node, 6 + t));
            samples.push(WindowSample {
                anchor: 5,
                x,
                x_mask: Matrix::full(4, 6, 1.0),
                y,
                y_mask: Matrix::full(4, 3, 1.0),
            });
            texts.push(Matrix::zeros(4, 16));
        }
        (samples, texts)
    }

    #[test]
    fn same_seed_trains_identically() {
        let (samples, texts) = training_fixture(20, 8);
        let tc = TrainConfig { lr: 5e-3, batch_size: 4, max_epochs: 5, patience: 10, seed: 21 };
        let run = || -> Vec<(usize, u64, u64)> {
            let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 22);
            let report = model.train(&samples, &texts, &samples, &texts, &tc).unwrap();
            // Wall-clock seconds differ between runs; the losses must not.
            report
                .history
                .iter()
                .map(|e| (e.epoch, e.train_mae.to_bits(), e.val_mae.to_bits()))
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn patience_one_with_worsening_val_stops_after_two_epochs() {
        // One visible target cell. Training drags that cell's prediction
        // far downward every epoch, while the validation target sits far
        // above it, so validation MAE rises monotonically.
        let mut rng = RngState::new(23);
        let x = Matrix::from_fn(4, 6, |_, _| rng.uniform(-1.0, 1.0));
        let mut mask = Matrix::zeros(4, 3);
        mask.set(0, 0, 1.0);
        let mut train_y = Matrix::zeros(4, 3);
        train_y.set(0, 0, -450.0);
        let mut val_y = Matrix::zeros(4, 3);
        val_y.set(0, 0, 1e6);
        let make = |y: &Matrix| WindowSample {
            anchor: 5,
            x: x.clone(),
            x_mask: Matrix::full(4, 6, 1.0),
            y: y.clone(),
            y_mask: mask.clone(),
        };
        let texts = vec![Matrix::zeros(4, 16)];
        let tc = TrainConfig { lr: 1e-3, batch_size: 1, max_epochs: 50, patience: 1, seed: 24 };
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 25);
        let report = model
            .train(&[make(&train_y)], &texts, &[make(&val_y)], &texts, &tc)
            .unwrap();
        assert_eq!(report.history.len(), 2, "history: {:?}", report.history);
        assert_eq!(report.best_epoch, 1);
        assert!(report.history[1].val_mae > report.history[0].val_mae);
    }

    #[test]
    fn overfits_four_noiseless_samples() {
        let (samples, texts) = training_fixture(26, 4);
        let tc =
            TrainConfig { lr: 1e-2, batch_size: 4, max_epochs: 2000, patience: 2000, seed: 27 };
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 28);
        let report = model.train(&samples, &texts, &samples, &texts, &tc).unwrap();
        assert!(
            report.best_val < 0.05,
            "masked MAE {} after {} epochs",
            report.best_val,
            report.history.len()
        );
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let (samples, texts) = training_fixture(29, 4);
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 30);
        let id = model.params.id_by_name("decoder.w").unwrap();
        model.params.get_mut(id).value.set(0, 0, f64::NAN);
        let tc = TrainConfig { lr: 1e-3, batch_size: 4, max_epochs: 3, patience: 10, seed: 31 };
        match model.train(&samples, &texts, &samples, &texts, &tc) {
            Err(Error::Diverged { epoch: 1, batch: 0, lr }) => assert_eq!(lr, 1e-3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckpt");
        let mut model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 32);
        let mut rng = RngState::new(33);
        let x = Matrix::from_fn(4, 6, |_, _| rng.uniform(-1.0, 1.0));
        let text = Matrix::from_fn(4, 16, |_, _| rng.uniform(-0.5, 0.5));
        let before = model.forward(&x, &text).unwrap();
        save_checkpoint(&model, 17, 3.25, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.best_val, 3.25);
        let after = loaded.model.forward(&x, &text).unwrap();
        assert_eq!(
            before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupt_and_truncated_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckpt");
        let model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 34);
        save_checkpoint(&model, 1, 0.5, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("trunc.fckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Checkpoint(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let corrupt = dir.path().join("corrupt.fckpt");
        std::fs::write(&corrupt, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&corrupt), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn future_version_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckpt");
        let model = toy_model(FusionKind::CrossAttention, EventMode::Enabled, 35);
        save_checkpoint(&model, 1, 0.5, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let end = bytes.len() - 4;
        bytes[end..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).err() {
            Some(Error::Checkpoint(msg)) => assert!(msg.contains("version 99"), "{msg}"),
            other => panic!("expected version rejection, got {other:?}"),
        }
    }
}
