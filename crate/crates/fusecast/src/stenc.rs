//! Spatio-temporal graph encoder.
//!
//! Turns an input window of N node histories into one d-dimensional state
//! per node. Each layer mixes along time with a causal convolution, then
//! along space through the normalized adjacency, with a residual around
//! the pair. The last time step's hidden state is the node embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_init, Matrix, NodeId, ParamId, ParamSet, RngState, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct STEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Width of the causal temporal convolution, in steps.
    pub temporal_kernel: usize,
    pub dropout_rate: f64,
}

impl STEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if self.temporal_kernel == 0 {
            return Err(Error::config("temporal kernel must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-node embedding produced by the encoder, shape N x d.
#[derive(Debug, Clone, PartialEq)]
pub struct EstEmbedding {
    pub values: Matrix,
}

struct LayerParams {
    /// One d x d weight per kernel tap; tap k reads the state k steps back.
    taps: Vec<ParamId>,
    temporal_bias: ParamId,
    spatial_weight: ParamId,
    spatial_bias: ParamId,
}

pub struct StEncoder {
    pub config: STEncoderConfig,
    input_weight: ParamId,
    input_bias: ParamId,
    layers: Vec<LayerParams>,
}

impl StEncoder {
    /// Register parameters under `prefix` and return the wired encoder.
    /// Biases start at zero so an all-zero window encodes to all zeros.
    pub fn new(
        config: STEncoderConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let input_weight = params.add(&format!("{prefix}.input.w"), xavier_init(1, d, rng));
        let input_bias = params.add(&format!("{prefix}.input.b"), Matrix::zeros(1, d));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let taps = (0..config.temporal_kernel)
                .map(|k| params.add(&format!("{prefix}.layer{l}.tap{k}.w"), xavier_init(d, d, rng)))
                .collect();
            layers.push(LayerParams {
                taps,
                temporal_bias: params
                    .add(&format!("{prefix}.layer{l}.temporal.b"), Matrix::zeros(1, d)),
                spatial_weight: params
                    .add(&format!("{prefix}.layer{l}.spatial.w"), xavier_init(d, d, rng)),
                spatial_bias: params
                    .add(&format!("{prefix}.layer{l}.spatial.b"), Matrix::zeros(1, d)),
            });
        }
        Ok(Self { config, input_weight, input_bias, layers })
    }

    /// Encode a window on the tape. `x` is N x H_in (rows are nodes),
    /// `a_hat` the normalized adjacency. Pass a dropout rng only while
    /// training; inference must stay deterministic.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        a_hat: &Matrix,
        dropout_rng: Option<&mut RngState>,
    ) -> Result<NodeId> {
        let (n, h_in) = x.shape();
        if h_in < self.config.temporal_kernel {
            return Err(Error::config(format!(
                "window of {h_in} steps is shorter than temporal kernel {}",
                self.config.temporal_kernel
            )));
        }
        if a_hat.rows() != n || a_hat.cols() != n {
            return Err(Error::invalid(format!(
                "adjacency is {}x{} but window has {n} nodes",
                a_hat.rows(),
                a_hat.cols()
            )));
        }
        let mut dropout_rng = dropout_rng.filter(|_| self.config.dropout_rate > 0.0);

        let x_node = tape.constant(x.clone());
        let a_node = tape.constant(a_hat.clone());
        let w_in = tape.param(self.input_weight);
        let b_in = tape.param(self.input_bias);

        // Lift each scalar time step to a d-wide state per node.
        let mut steps: Vec<NodeId> = Vec::with_capacity(h_in);
        for t in 0..h_in {
            let xt = tape.slice_cols(x_node, t, 1)?;
            let lifted = tape.matmul(xt, w_in)?;
            steps.push(tape.add_row_broadcast(lifted, b_in)?);
        }

        for layer in &self.layers {
            let taps: Vec<NodeId> = layer.taps.iter().map(|&id| tape.param(id)).collect();
            let b_t = tape.param(layer.temporal_bias);
            let w_s = tape.param(layer.spatial_weight);
            let b_s = tape.param(layer.spatial_bias);

            let mut temporal: Vec<NodeId> = Vec::with_capacity(h_in);
            for t in 0..h_in {
                // Causal: tap k looks k steps back, missing history is zero.
                let mut acc: Option<NodeId> = None;
                for (k, &tap) in taps.iter().enumerate() {
                    if t < k {
                        break;
                    }
                    let term = tape.matmul(steps[t - k], tap)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
                let biased = tape.add_row_broadcast(acc.unwrap(), b_t)?;
                temporal.push(tape.relu(biased));
            }

            let mut next: Vec<NodeId> = Vec::with_capacity(h_in);
            for t in 0..h_in {
                let mixed = tape.matmul(a_node, temporal[t])?;
                let weighted = tape.matmul(mixed, w_s)?;
                let biased = tape.add_row_broadcast(weighted, b_s)?;
                let mut spatial = tape.relu(biased);
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.config.dropout_rate;
                    let mask = Matrix::from_fn(n, self.config.hidden, |_, _| {
                        if rng.uniform(0.0, 1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let mask = tape.constant(mask);
                    spatial = tape.hadamard(spatial, mask)?;
                }
                next.push(tape.add(steps[t], spatial)?);
            }
            steps = next;
        }

        Ok(steps[h_in - 1])
    }

    /// Forward pass without gradient bookkeeping.
    pub fn encode_value(
        &self,
        params: &mut ParamSet,
        x: &Matrix,
        a_hat: &Matrix,
    ) -> Result<EstEmbedding> {
        let mut tape = Tape::new(params);
        let id = self.encode(&mut tape, x, a_hat, None)?;
        let values = tape.value(id).clone();
        if !values.is_finite() {
            return Err(Error::invalid("encoder produced non-finite values"));
        }
        Ok(EstEmbedding { values })
    }
}
