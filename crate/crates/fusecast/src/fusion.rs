//! Cross-modality fusion of node state and event text embeddings.
//!
//! The main path runs multi-head cross-attention with the node states as
//! queries and the text embeddings as keys and values, then two residual
//! layer-norm stages around the attention and a feed-forward block. The
//! simpler variants (gating, add, concat) exist for head-to-head ablation
//! and share the same N x d in, N x d out contract.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    softmax_rows, xavier_init, Matrix, NodeId, ParamId, ParamSet, RngState, Tape,
};

/// Epsilon shared by every layer norm in the fusion block.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    CrossAttention,
    Gating,
    Add,
    Concat,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] =
        [FusionKind::CrossAttention, FusionKind::Gating, FusionKind::Add, FusionKind::Concat];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward depth; widths run d -> 4d -> ... -> d.
    pub ffn_layers: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::config("hidden and heads must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.ffn_layers == 0 {
            return Err(Error::config("feed-forward needs at least one layer"));
        }
        Ok(())
    }
}

pub struct CrossAttentionFusion {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn: Vec<(ParamId, ParamId)>,
}

impl CrossAttentionFusion {
    pub fn new(
        config: FusionConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let proj = |params: &mut ParamSet, rng: &mut RngState, name: &str| {
            params.add(&format!("{prefix}.{name}"), xavier_init(d, d, rng))
        };
        let wq = proj(params, rng, "wq");
        let wk = proj(params, rng, "wk");
        let wv = proj(params, rng, "wv");
        let wo = proj(params, rng, "wo");
        let ln1_gamma = params.add(&format!("{prefix}.ln1.gamma"), Matrix::full(1, d, 1.0));
        let ln1_beta = params.add(&format!("{prefix}.ln1.beta"), Matrix::zeros(1, d));
        let ln2_gamma = params.add(&format!("{prefix}.ln2.gamma"), Matrix::full(1, d, 1.0));
        let ln2_beta = params.add(&format!("{prefix}.ln2.beta"), Matrix::zeros(1, d));
        let mut ffn = Vec::with_capacity(config.ffn_layers);
        let inner = 4 * d;
        for l in 0..config.ffn_layers {
            let rows = if l == 0 { d } else { inner };
            let cols = if l == config.ffn_layers - 1 { d } else { inner };
            ffn.push((
                params.add(&format!("{prefix}.ffn{l}.w"), xavier_init(rows, cols, rng)),
                params.add(&format!("{prefix}.ffn{l}.b"), Matrix::zeros(1, cols)),
            ));
        }
        Ok(Self {
            hidden: d,
            heads: config.heads,
            head_dim: d / config.heads,
            wq,
            wk,
            wv,
            wo,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            ffn,
        })
    }

    fn ffn_apply(&self, tape: &mut Tape, mut h: NodeId) -> Result<NodeId> {
        for (l, &(w, b)) in self.ffn.iter().enumerate() {
            let wn = tape.param(w);
            let bn = tape.param(b);
            let lin = tape.matmul(h, wn)?;
            h = tape.add_row_broadcast(lin, bn)?;
            if l + 1 < self.ffn.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Multi-head cross-attention plus the two residual layer-norm stages.
    pub fn fuse(&self, tape: &mut Tape, e_st: NodeId, e_text: NodeId) -> Result<NodeId> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let q = tape.matmul(e_st, wq)?;
        let k = tape.matmul(e_text, wk)?;
        let v = tape.matmul(e_text, wv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim)?;
            let kh = tape.slice_cols(k, start, self.head_dim)?;
            let vh = tape.slice_cols(v, start, self.head_dim)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&heads)?;
        let wo = tape.param(self.wo);
        let mha = tape.matmul(concat, wo)?;

        let g1 = tape.param(self.ln1_gamma);
        let b1 = tape.param(self.ln1_beta);
        let residual = tape.add(mha, e_st)?;
        let h_c = tape.layer_norm_rows(residual, g1, b1, LN_EPS)?;

        let ffn_out = self.ffn_apply(tape, h_c)?;
        let g2 = tape.param(self.ln2_gamma);
        let b2 = tape.param(self.ln2_beta);
        let residual2 = tape.add(h_c, ffn_out)?;
        tape.layer_norm_rows(residual2, g2, b2, LN_EPS)
    }

    /// Per-head softmax maps, computed outside the tape for inspection.
    pub fn attention_weights(
        &self,
        params: &ParamSet,
        e_st: &Matrix,
        e_text: &Matrix,
    ) -> Result<Vec<Matrix>> {
        let q = e_st.matmul(&params.get(self.wq).value)?;
        let k = e_text.matmul(&params.get(self.wk).value)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = q.slice_cols(start, self.head_dim)?;
            let kh = k.slice_cols(start, self.head_dim)?;
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            maps.push(softmax_rows(&scores));
        }
        Ok(maps)
    }
}

pub struct GatingFusion {
    gate: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    hidden: usize,
}

impl GatingFusion {
    pub fn new(d: usize, prefix: &str, params: &mut ParamSet, rng: &mut RngState) -> Self {
        let gate = params.add(
            &format!("{prefix}.gate"),
            Matrix::from_fn(1, d, |_, _| rng.uniform(-0.1, 0.1)),
        );
        let ln_gamma = params.add(&format!("{prefix}.ln.gamma"), Matrix::full(1, d, 1.0));
        let ln_beta = params.add(&format!("{prefix}.ln.beta"), Matrix::zeros(1, d));
        Self { gate, ln_gamma, ln_beta, hidden: d }
    }

    /// sigmoid(g) picks per-dimension how much node state survives; the
    /// complement passes the text embedding. Layer norm on top.
    pub fn fuse(&self, tape: &mut Tape, e_st: NodeId, e_text: NodeId) -> Result<NodeId> {
        let gate = tape.param(self.gate);
        let open = tape.sigmoid(gate);
        let ones = tape.constant(Matrix::full(1, self.hidden, 1.0));
        let closed = tape.sub(ones, open)?;
        let st_part = tape.mul_row_broadcast(e_st, open)?;
        let text_part = tape.mul_row_broadcast(e_text, closed)?;
        let mixed = tape.add(st_part, text_part)?;
        let gamma = tape.param(self.ln_gamma);
        let beta = tape.param(self.ln_beta);
        tape.layer_norm_rows(mixed, gamma, beta, LN_EPS)
    }
}

pub struct ConcatFusion {
    weight: ParamId,
}

impl ConcatFusion {
    pub fn new(d: usize, prefix: &str, params: &mut ParamSet, rng: &mut RngState) -> Self {
        let weight = params.add(&format!("{prefix}.wc"), xavier_init(2 * d, d, rng));
        Self { weight }
    }

    pub fn fuse(&self, tape: &mut Tape, e_st: NodeId, e_text: NodeId) -> Result<NodeId> {
        let stacked = tape.concat_cols(&[e_st, e_text])?;
        let w = tape.param(self.weight);
        tape.matmul(stacked, w)
    }
}

/// One fusion mechanism, selected at model construction.
pub enum Fusion {
    CrossAttention(CrossAttentionFusion),
    Gating(GatingFusion),
    Add,
    Concat(ConcatFusion),
}

impl Fusion {
    pub fn new(
        kind: FusionKind,
        config: FusionConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        config.validate()?;
        Ok(match kind {
            FusionKind::CrossAttention => {
                Fusion::CrossAttention(CrossAttentionFusion::new(config, prefix, params, rng)?)
            }
            FusionKind::Gating => {
                Fusion::Gating(GatingFusion::new(config.hidden, prefix, params, rng))
            }
            FusionKind::Add => Fusion::Add,
            FusionKind::Concat => {
                Fusion::Concat(ConcatFusion::new(config.hidden, prefix, params, rng))
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::CrossAttention(_) => FusionKind::CrossAttention,
            Fusion::Gating(_) => FusionKind::Gating,
            Fusion::Add => FusionKind::Add,
            Fusion::Concat(_) => FusionKind::Concat,
        }
    }

    pub fn fuse(&self, tape: &mut Tape, e_st: NodeId, e_text: NodeId) -> Result<NodeId> {
        match self {
            Fusion::CrossAttention(f) => f.fuse(tape, e_st, e_text),
            Fusion::Gating(f) => f.fuse(tape, e_st, e_text),
            Fusion::Add => tape.add(e_st, e_text),
            Fusion::Concat(f) => f.fuse(tape, e_st, e_text),
        }
    }
}

/// Flatten per-head attention maps to `head,query_node,key_node,weight`
/// rows for offline analysis.
pub fn attention_to_csv(maps: &[Matrix]) -> String {
    let mut out = String::from("head,query_node,key_node,weight\n");
    for (h, map) in maps.iter().enumerate() {
        for q in 0..map.rows() {
            for k in 0..map.cols() {
                out.push_str(&format!("{h},{q},{k},{}\n", map.get(q, k)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, layer_norm_rows};
    use proptest::prelude::*;

    fn test_config() -> FusionConfig {
        FusionConfig { hidden: 8, heads: 2, ffn_layers: 2 }
    }

    fn random_pair(n: usize, d: usize, rng: &mut RngState) -> (Matrix, Matrix) {
        (
            Matrix::from_fn(n, d, |_, _| rng.uniform(-1.0, 1.0)),
            Matrix::from_fn(n, d, |_, _| rng.uniform(-1.0, 1.0)),
        )
    }

    fn fuse_value(fusion: &Fusion, params: &mut ParamSet, e_st: &Matrix, e_text: &Matrix) -> Matrix {
        let mut tape = Tape::new(params);
        let a = tape.constant(e_st.clone());
        let b = tape.constant(e_text.clone());
        let out = fusion.fuse(&mut tape, a, b).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = FusionConfig { hidden: 8, heads: 3, ffn_layers: 2 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_matches_input_across_sizes() {
        let mut rng = RngState::new(11);
        for &(n, d, h) in &[(1usize, 4usize, 1usize), (3, 8, 2), (5, 12, 4), (2, 6, 3)] {
            let mut params = ParamSet::default();
            let cfg = FusionConfig { hidden: d, heads: h, ffn_layers: 2 };
            let fusion =
                Fusion::new(FusionKind::CrossAttention, cfg, "fuse", &mut params, &mut rng)
                    .unwrap();
            let (e_st, e_text) = random_pair(n, d, &mut rng);
            let out = fuse_value(&fusion, &mut params, &e_st, &e_text);
            assert_eq!(out.shape(), (n, d));
        }
    }

    #[test]
    fn zero_text_reduces_to_text_free_pipeline() {
        let mut rng = RngState::new(12);
        let mut params = ParamSet::default();
        let ca = CrossAttentionFusion::new(test_config(), "fuse", &mut params, &mut rng).unwrap();
        let e_st = Matrix::from_fn(4, 8, |_, _| rng.uniform(-1.0, 1.0));
        let zero_text = Matrix::zeros(4, 8);

        let fused = {
            let mut tape = Tape::new(&mut params);
            let a = tape.constant(e_st.clone());
            let b = tape.constant(zero_text);
            let out = ca.fuse(&mut tape, a, b).unwrap();
            tape.value(out).clone()
        };
        // Reference: skip attention entirely, keep both layer-norm stages.
        let reference = {
            let mut tape = Tape::new(&mut params);
            let a = tape.constant(e_st);
            let g1 = tape.param(ca.ln1_gamma);
            let b1 = tape.param(ca.ln1_beta);
            let h_c = tape.layer_norm_rows(a, g1, b1, LN_EPS).unwrap();
            let ffn = ca.ffn_apply(&mut tape, h_c).unwrap();
            let sum = tape.add(h_c, ffn).unwrap();
            let g2 = tape.param(ca.ln2_gamma);
            let b2 = tape.param(ca.ln2_beta);
            let out = tape.layer_norm_rows(sum, g2, b2, LN_EPS).unwrap();
            tape.value(out).clone()
        };
        let diff = fused.sub(&reference).unwrap().max_abs();
        assert!(diff < 1e-6, "reduction diff {diff}");
    }

    #[test]
    fn single_node_identity_weights_match_hand_oracle() {
        let mut rng = RngState::new(13);
        let mut params = ParamSet::default();
        let cfg = FusionConfig { hidden: 2, heads: 1, ffn_layers: 1 };
        let ca = CrossAttentionFusion::new(cfg, "fuse", &mut params, &mut rng).unwrap();
        let eye = Matrix::from_fn(2, 2, |i, j| f64::from(i == j));
        for name in ["fuse.wq", "fuse.wk", "fuse.wv", "fuse.wo"] {
            let id = params.id_by_name(name).unwrap();
            params.get_mut(id).value = eye.clone();
        }
        let ffn_w = params.id_by_name("fuse.ffn0.w").unwrap();
        params.get_mut(ffn_w).value = Matrix::zeros(2, 2);

        let e_st = Matrix::from_vec(1, 2, vec![0.7, -0.3]).unwrap();
        let e_text = Matrix::from_vec(1, 2, vec![0.2, 0.9]).unwrap();
        let fused = {
            let mut tape = Tape::new(&mut params);
            let a = tape.constant(e_st.clone());
            let b = tape.constant(e_text.clone());
            let out = ca.fuse(&mut tape, a, b).unwrap();
            tape.value(out).clone()
        };
        // One query, one key: softmax weight is 1, so attention returns v
        // and each stage is a plain layer norm of a known sum.
        let gamma = Matrix::full(1, 2, 1.0);
        let beta = Matrix::zeros(1, 2);
        let h_c =
            layer_norm_rows(&e_st.add(&e_text).unwrap(), &gamma, &beta, LN_EPS).unwrap();
        let expected = layer_norm_rows(&h_c, &gamma, &beta, LN_EPS).unwrap();
        let diff = fused.sub(&expected).unwrap().max_abs();
        assert!(diff < 1e-9, "hand oracle diff {diff}");
    }

    #[test]
    fn attention_rows_sum_to_one_and_match_hand_case() {
        let mut rng = RngState::new(14);
        let mut params = ParamSet::default();
        let cfg = FusionConfig { hidden: 2, heads: 1, ffn_layers: 1 };
        let ca = CrossAttentionFusion::new(cfg, "fuse", &mut params, &mut rng).unwrap();
        let eye = Matrix::from_fn(2, 2, |i, j| f64::from(i == j));
        for name in ["fuse.wq", "fuse.wk"] {
            let id = params.id_by_name(name).unwrap();
            params.get_mut(id).value = eye.clone();
        }
        let e_st = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e_text = Matrix::from_vec(2, 2, vec![0.5, -0.5, 1.5, 0.25]).unwrap();
        let maps = ca.attention_weights(&params, &e_st, &e_text).unwrap();
        assert_eq!(maps.len(), 1);
        let scale = 1.0 / 2.0_f64.sqrt();
        for q in 0..2 {
            let s0 = (e_st.get(q, 0) * 0.5 + e_st.get(q, 1) * -0.5) * scale;
            let s1 = (e_st.get(q, 0) * 1.5 + e_st.get(q, 1) * 0.25) * scale;
            let z = s0.exp() + s1.exp();
            assert!((maps[0].get(q, 0) - s0.exp() / z).abs() < 1e-12);
            assert!((maps[0].get(q, 1) - s1.exp() / z).abs() < 1e-12);
            let row_sum: f64 = maps[0].row(q).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_text_rows_give_uniform_attention() {
        let mut rng = RngState::new(15);
        let mut params = ParamSet::default();
        let ca = CrossAttentionFusion::new(test_config(), "fuse", &mut params, &mut rng).unwrap();
        let e_st = Matrix::from_fn(5, 8, |_, _| rng.uniform(-1.0, 1.0));
        let template: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let e_text = Matrix::from_fn(5, 8, |_, c| template[c]);
        for map in ca.attention_weights(&params, &e_st, &e_text).unwrap() {
            for q in 0..5 {
                for k in 0..5 {
                    assert!((map.get(q, k) - 0.2).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn huge_activations_stay_finite() {
        let mut rng = RngState::new(16);
        let mut params = ParamSet::default();
        let fusion =
            Fusion::new(FusionKind::CrossAttention, test_config(), "fuse", &mut params, &mut rng)
                .unwrap();
        let (mut e_st, mut e_text) = random_pair(4, 8, &mut rng);
        e_st = e_st.scale(1e3);
        e_text = e_text.scale(1e3);
        let out = fuse_value(&fusion, &mut params, &e_st, &e_text);
        assert!(out.is_finite());
    }

    #[test]
    fn joint_row_permutation_permutes_output() {
        let mut rng = RngState::new(17);
        let mut params = ParamSet::default();
        let fusion =
            Fusion::new(FusionKind::CrossAttention, test_config(), "fuse", &mut params, &mut rng)
                .unwrap();
        let (e_st, e_text) = random_pair(5, 8, &mut rng);
        let perm = [2usize, 4, 0, 3, 1];
        let e_st_p = Matrix::from_fn(5, 8, |i, c| e_st.get(perm[i], c));
        let e_text_p = Matrix::from_fn(5, 8, |i, c| e_text.get(perm[i], c));
        let out = fuse_value(&fusion, &mut params, &e_st, &e_text);
        let out_p = fuse_value(&fusion, &mut params, &e_st_p, &e_text_p);
        for i in 0..5 {
            for c in 0..8 {
                let diff = (out_p.get(i, c) - out.get(perm[i], c)).abs();
                assert!(diff < 1e-12, "row {i} col {c} diff {diff}");
            }
        }
    }

    #[test]
    fn add_with_zero_text_is_identity() {
        let mut rng = RngState::new(18);
        let mut params = ParamSet::default();
        let fusion =
            Fusion::new(FusionKind::Add, test_config(), "fuse", &mut params, &mut rng).unwrap();
        let e_st = Matrix::from_fn(3, 8, |_, _| rng.uniform(-1.0, 1.0));
        let out = fuse_value(&fusion, &mut params, &e_st, &Matrix::zeros(3, 8));
        assert_eq!(out, e_st);
    }

    #[test]
    fn saturated_gate_passes_only_text() {
        let mut rng = RngState::new(19);
        let mut params = ParamSet::default();
        let gating = GatingFusion::new(8, "fuse", &mut params, &mut rng);
        let id = params.id_by_name("fuse.gate").unwrap();
        params.get_mut(id).value = Matrix::full(1, 8, -40.0);
        let (e_st, e_text) = random_pair(3, 8, &mut rng);
        let fused = {
            let mut tape = Tape::new(&mut params);
            let a = tape.constant(e_st);
            let b = tape.constant(e_text.clone());
            let out = gating.fuse(&mut tape, a, b).unwrap();
            tape.value(out).clone()
        };
        let gamma = Matrix::full(1, 8, 1.0);
        let beta = Matrix::zeros(1, 8);
        let expected = layer_norm_rows(&e_text, &gamma, &beta, LN_EPS).unwrap();
        let diff = fused.sub(&expected).unwrap().max_abs();
        assert!(diff < 1e-9, "gate leak {diff}");
    }

    #[test]
    fn selector_concat_weight_returns_node_state() {
        let mut rng = RngState::new(20);
        let mut params = ParamSet::default();
        let concat = ConcatFusion::new(8, "fuse", &mut params, &mut rng);
        let id = params.id_by_name("fuse.wc").unwrap();
        params.get_mut(id).value = Matrix::from_fn(16, 8, |i, j| f64::from(i == j));
        let (e_st, e_text) = random_pair(3, 8, &mut rng);
        let fused = {
            let mut tape = Tape::new(&mut params);
            let a = tape.constant(e_st.clone());
            let b = tape.constant(e_text);
            let out = concat.fuse(&mut tape, a, b).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(fused, e_st);
    }

    #[test]
    fn all_variant_gradients_match_finite_differences() {
        for kind in
            [FusionKind::CrossAttention, FusionKind::Gating, FusionKind::Add, FusionKind::Concat]
        {
            let mut rng = RngState::new(21);
            let mut params = ParamSet::default();
            let fusion = Fusion::new(kind, test_config(), "fuse", &mut params, &mut rng).unwrap();
            // Inputs enter as parameters too, so the check also covers
            // gradients flowing back toward the encoders.
            let st_id = params.add(
                "in.e_st",
                Matrix::from_fn(4, 8, |_, _| rng.uniform(-1.0, 1.0)),
            );
            let text_id = params.add(
                "in.e_text",
                Matrix::from_fn(4, 8, |_, _| rng.uniform(-1.0, 1.0)),
            );
            let readout = Matrix::from_fn(4, 8, |_, _| rng.uniform(-1.0, 1.0));
            let report = grad_check(
                &mut params,
                |params, want_grads| {
                    let mut tape = Tape::new(params);
                    let a = tape.param(st_id);
                    let b = tape.param(text_id);
                    let fused = fusion.fuse(&mut tape, a, b)?;
                    let r = tape.constant(readout.clone());
                    let weighted = tape.hadamard(fused, r)?;
                    let loss = tape.sum_all(weighted);
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
            assert!(
                report.max_rel_err() < 1e-4,
                "{kind:?}: worst {} at {worst}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn attention_csv_is_flat_and_headed() {
        let map = Matrix::from_vec(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let csv = attention_to_csv(&[map.clone(), map]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("head,query_node,key_node,weight"));
        assert_eq!(lines.next(), Some("0,0,0,0.25"));
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().any(|l| l == "1,1,0,0.5"));
    }

    proptest! {
        #[test]
        fn attention_rows_always_sum_to_one(seed in 0u64..100) {
            let mut rng = RngState::new(seed);
            let mut params = ParamSet::default();
            let ca =
                CrossAttentionFusion::new(test_config(), "fuse", &mut params, &mut rng).unwrap();
            let n = 1 + (seed as usize % 6);
            let (e_st, e_text) = random_pair(n, 8, &mut rng);
            for map in ca.attention_weights(&params, &e_st, &e_text).unwrap() {
                for q in 0..n {
                    let s: f64 = map.row(q).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
