//! Stack of (gate fusion → graph attention) blocks.
//!
//! Block `l` fuses the previous hidden state with the visual embeddings
//! (the visual residual path), then contextualizes each node over its
//! neighborhood:
//!
//! ```text
//! z_i   = σ(W2 · gelu(W1 [v_i ; h_i] + b1) + b2)          scalar per node
//! m_i   = (1 − z_i) h_i + z_i v_i
//! e'_ij = (q_i · k_j) / √d_head + q_i · bb_ij             j ∈ N(i) ∪ {0}
//! ĥ_i   = Wo · concat_heads(Σ_j softmax(e')_ij · v_j) + bo
//! h_i   = LN(ĥ_i + FFN(ĥ_i))
//! ```
//!
//! Weights are stored `[in × out]` and applied as `x · W`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Params, Var};
use crate::error::{Error, Result};
use crate::layout::relative_position_bias;
use crate::neighborhood::AttentionGraph;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Gate,
    Add,
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Self::Gate),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub top_k: usize,
    pub fusion: FusionMode,
    /// Number of leading blocks that receive the visual embeddings; later
    /// blocks pass the hidden state through unchanged.
    pub residual_gate_layers: usize,
    pub use_rpe: bool,
    /// `false` replaces the top-k mask with dense attention.
    pub use_gat: bool,
    pub scale_scores: bool,
    /// Conventional post-LN block `LN(a + FFN(a))`, `a = LN(m + ĥ)`.
    pub standard_block: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            dim: 768,
            heads: 12,
            top_k: 36,
            fusion: FusionMode::Gate,
            residual_gate_layers: 12,
            use_rpe: true,
            use_gat: true,
            scale_scores: true,
            standard_block: false,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Small config used for tests and desk-scale runs.
    pub fn small(layers: usize, dim: usize, heads: usize, top_k: usize) -> Self {
        Self {
            layers,
            dim,
            heads,
            top_k,
            residual_gate_layers: layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 1 {
            return fail("encoder needs at least one layer".into());
        }
        if self.top_k < 1 {
            return fail("top_k must be at least 1".into());
        }
        if self.heads < 1 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim == 0 || self.dim % 6 != 0 {
            return fail(format!("dim {} not divisible by 6", self.dim));
        }
        if self.use_rpe && self.dim % 4 != 0 {
            return fail(format!("dim {} not divisible by 4 (sinusoid pairs per axis)", self.dim));
        }
        if self.residual_gate_layers > self.layers {
            return fail(format!(
                "residual_gate_layers {} exceeds layers {}",
                self.residual_gate_layers, self.layers
            ));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of one axis' sinusoid in a corner encoding.
    pub fn sinusoid_dim(&self) -> usize {
        self.dim / 2
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("encoder.layer{l}")
}

/// Per-document constants shared by every layer.
#[derive(Clone, Debug)]
pub struct LayerContext {
    pub graph: AttentionGraph,
    /// Ordered pairs permitted by the mask, row-major.
    pub pairs: Rc<Vec<(usize, usize)>>,
    /// Corner encodings for `pairs`, one `[P × d]` constant per corner;
    /// `None` when relative position bias is off.
    pub corners: Option<[Var; 4]>,
}

/// Intermediate values of one block.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub fused: Var,
    /// Gate values `[(n+1) × 1]` when the block used gate fusion.
    pub gate: Option<Var>,
    pub hidden: Var,
    /// `[(n+1) × (n+1)]` attention per head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub layers: Vec<LayerState>,
}

/// Gate fusion of one block: returns the fused rows and the scalar gates.
pub fn gate_fusion<T: Scalar>(g: &mut Graph<T>, params: &Params, prefix: &str, h_prev: Var, visual: Var) -> Result<(Var, Var)> {
    let w1 = params.get(&format!("{prefix}.gate.w1"))?;
    let b1 = params.get(&format!("{prefix}.gate.b1"))?;
    let w2 = params.get(&format!("{prefix}.gate.w2"))?;
    let b2 = params.get(&format!("{prefix}.gate.b2"))?;
    let joint = g.concat(&[visual, h_prev], 1)?;
    let pre = g.matmul(joint, w1)?;
    let pre = g.add_row(pre, b1)?;
    let act = g.gelu(pre);
    let logit = g.matmul(act, w2)?;
    let logit = g.add_row(logit, b2)?;
    let z = g.sigmoid(logit);
    let neg = g.scale(z, -T::one());
    let keep = g.add_scalar(neg, T::one());
    let from_h = g.mul_col(h_prev, keep)?;
    let from_v = g.mul_col(visual, z)?;
    let fused = g.add(from_h, from_v)?;
    Ok((fused, z))
}

/// Addition or concatenation fusion (ablation alternatives to the gate).
pub fn fuse_alternatives<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    prefix: &str,
    h_prev: Var,
    visual: Var,
    mode: FusionMode,
) -> Result<Var> {
    match mode {
        FusionMode::Add => g.add(h_prev, visual),
        FusionMode::Concat => {
            let proj = params.get(&format!("{prefix}.fuse.proj"))?;
            let joint = g.concat(&[h_prev, visual], 1)?;
            g.matmul(joint, proj)
        }
        FusionMode::Gate => Err(Error::Config("gate fusion goes through gate_fusion".into())),
    }
}

fn affine<T: Scalar>(g: &mut Graph<T>, params: &Params, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = params.get(w)?;
    let b = params.get(b)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let inner = affine(g, params, x, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let inner = g.gelu(inner);
    affine(g, params, inner, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, params: &Params, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = params.get(&format!("{name}.gamma"))?;
    let beta = params.get(&format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, T::lit(eps))
}

/// One masked multi-head graph attention layer. Returns the new hidden
/// rows and the per-head attention matrices.
pub fn graph_attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    layer: usize,
    fused: Var,
    ctx: &LayerContext,
    cfg: &EncoderConfig,
) -> Result<(Var, Vec<Var>)> {
    let prefix = layer_prefix(layer);
    let n = g.shape(fused)[0];
    if n != ctx.graph.node_count() {
        return Err(Error::shape("graph_attention_layer", g.shape(fused), &[ctx.graph.node_count()]));
    }
    let q_all = g.matmul(fused, params.get(&format!("{prefix}.attn.wq"))?)?;
    let k_all = g.matmul(fused, params.get(&format!("{prefix}.attn.wk"))?)?;
    let v_all = g.matmul(fused, params.get(&format!("{prefix}.attn.wv"))?)?;
    let bias_rows = match (&ctx.corners, cfg.use_rpe) {
        (Some(corners), true) => Some(relative_position_bias(g, params, &format!("{prefix}.rpe"), corners)?),
        (None, true) => return Err(Error::Config("relative position bias enabled but no corner features".into())),
        _ => None,
    };
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap_or_else(T::one).sqrt();
    let mask = ctx.graph.mask_rc();
    let mut head_out = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice(q_all, 1, h * dh, dh)?;
        let k = g.slice(k_all, 1, h * dh, dh)?;
        let v = g.slice(v_all, 1, h * dh, dh)?;
        let kt = g.transpose(k)?;
        let mut scores = g.matmul(q, kt)?;
        if cfg.scale_scores {
            scores = g.scale(scores, scale);
        }
        if let Some(bb) = bias_rows {
            let bb_h = g.slice(bb, 1, h * dh, dh)?;
            let rel = g.pair_scores(q, bb_h, Rc::clone(&ctx.pairs))?;
            scores = g.add(scores, rel)?;
        }
        let bad = g
            .value(scores)
            .data()
            .iter()
            .zip(mask.iter())
            .any(|(s, &m)| m && !s.is_finite());
        if bad {
            return Err(Error::Numeric(format!("non-finite attention score in layer {layer}, head {h}")));
        }
        let alpha = g.masked_softmax(scores, Rc::clone(&mask))?;
        head_out.push(g.matmul(alpha, v)?);
        attention.push(alpha);
    }
    let joined = g.concat(&head_out, 1)?;
    let attended = affine(g, params, joined, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    let out = if cfg.standard_block {
        let res = g.add(fused, attended)?;
        let a = layer_norm(g, params, &format!("{prefix}.ln_attn"), res, cfg.ln_eps)?;
        let f = feed_forward(g, params, &prefix, a)?;
        let res = g.add(a, f)?;
        layer_norm(g, params, &format!("{prefix}.ln"), res, cfg.ln_eps)?
    } else {
        let f = feed_forward(g, params, &prefix, attended)?;
        let res = g.add(attended, f)?;
        layer_norm(g, params, &format!("{prefix}.ln"), res, cfg.ln_eps)?
    };
    Ok((out, attention))
}

/// Runs all blocks starting from `H^0 = S`.
pub fn encode_document<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    sentences: Var,
    visual: Var,
    ctx: &LayerContext,
    cfg: &EncoderConfig,
) -> Result<EncoderOutput> {
    if g.shape(sentences) != g.shape(visual) {
        return Err(Error::shape("encode_document", g.shape(sentences), g.shape(visual)));
    }
    let mut hidden = sentences;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let prefix = layer_prefix(l);
        let (fused, gate) = if l < cfg.residual_gate_layers {
            match cfg.fusion {
                FusionMode::Gate => {
                    let (m, z) = gate_fusion(g, params, &prefix, hidden, visual)?;
                    (m, Some(z))
                }
                mode => (fuse_alternatives(g, params, &prefix, hidden, visual, mode)?, None),
            }
        } else {
            (hidden, None)
        };
        let (h, attention) = graph_attention_layer(g, params, l, fused, ctx, cfg)?;
        layers.push(LayerState {
            fused,
            gate,
            hidden: h,
            attention,
        });
        hidden = h;
    }
    Ok(EncoderOutput { hidden, layers })
}

/// Parameter names and shapes of block `l`.
pub fn layer_parameter_shapes(cfg: &EncoderConfig, l: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let p = layer_prefix(l);
    let mut out = Vec::new();
    if l < cfg.residual_gate_layers {
        match cfg.fusion {
            FusionMode::Gate => {
                out.push((format!("{p}.gate.w1"), vec![2 * d, d]));
                out.push((format!("{p}.gate.b1"), vec![d]));
                out.push((format!("{p}.gate.w2"), vec![d, 1]));
                out.push((format!("{p}.gate.b2"), vec![1]));
            }
            FusionMode::Concat => out.push((format!("{p}.fuse.proj"), vec![2 * d, d])),
            FusionMode::Add => {}
        }
    }
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{p}.attn.{w}"), vec![d, d]));
    }
    out.push((format!("{p}.attn.bo"), vec![d]));
    if cfg.use_rpe {
        for c in crate::layout::CORNER_NAMES {
            out.push((format!("{p}.rpe.w_{c}"), vec![2 * cfg.sinusoid_dim(), d]));
        }
    }
    out.push((format!("{p}.ffn.w1"), vec![d, 4 * d]));
    out.push((format!("{p}.ffn.b1"), vec![4 * d]));
    out.push((format!("{p}.ffn.w2"), vec![4 * d, d]));
    out.push((format!("{p}.ffn.b2"), vec![d]));
    out.push((format!("{p}.ln.gamma"), vec![d]));
    out.push((format!("{p}.ln.beta"), vec![d]));
    if cfg.standard_block {
        out.push((format!("{p}.ln_attn.gamma"), vec![d]));
        out.push((format!("{p}.ln_attn.beta"), vec![d]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParameterRegistry, Tensor};
    use crate::layout::NormalizedBox;
    use crate::model::{init_parameters, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn registry(enc: EncoderConfig, seed: u64) -> ParameterRegistry<f64> {
        let cfg = ModelConfig {
            encoder: enc,
            text_dim: 6,
            visual_dim: 6,
            proj_bias: true,
        };
        init_parameters(&cfg, seed).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn set(reg: &mut ParameterRegistry<f64>, name: &str, value: f64) {
        reg.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = value);
    }

    fn fuse(reg: &ParameterRegistry<f64>, h: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
        let (m, z) = gate_fusion(&mut g, &p, "encoder.layer0", hv, vv).unwrap();
        (g.value(m).clone(), g.value(z).clone())
    }

    #[test]
    fn forced_gate_limits() {
        let mut reg = registry(EncoderConfig::small(1, 12, 2, 4), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, v) = (random_rows(&mut rng, 4, 12), random_rows(&mut rng, 4, 12));
        set(&mut reg, "encoder.layer0.gate.w2", 0.0);
        set(&mut reg, "encoder.layer0.gate.b2", -20.0);
        assert!(fuse(&reg, &h, &v).0.max_abs_diff(&h) < 1e-6);
        set(&mut reg, "encoder.layer0.gate.b2", 20.0);
        assert!(fuse(&reg, &h, &v).0.max_abs_diff(&v) < 1e-6);
        set(&mut reg, "encoder.layer0.gate.b2", 0.0);
        let (m, z) = fuse(&reg, &h, &v);
        assert!(z.data().iter().all(|&z| z == 0.5));
        let mid: Vec<f64> = h.data().iter().zip(v.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        assert!(m.data().iter().zip(&mid).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn add_and_concat_alternatives() {
        let cfg = EncoderConfig {
            fusion: FusionMode::Concat,
            use_rpe: false,
            ..EncoderConfig::small(1, 6, 1, 2)
        };
        let mut reg = registry(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_rows(&mut rng, 3, 6);
        let v = random_rows(&mut rng, 3, 6);
        // [I; 0] selects the hidden half
        let proj = reg.get_mut("encoder.layer0.fuse.proj").unwrap();
        proj.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = if i < 36 && i / 6 == i % 6 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let (hv, vv) = (g.constant(h.clone()), g.constant(v));
        let m = fuse_alternatives(&mut g, &p, "encoder.layer0", hv, vv, FusionMode::Concat).unwrap();
        assert_eq!(g.value(m), &h);
        let zero = g.constant(Tensor::zeros(&[3, 6]));
        let m = fuse_alternatives(&mut g, &p, "encoder.layer0", hv, zero, FusionMode::Add).unwrap();
        assert_eq!(g.value(m), &h);
    }

    #[test]
    fn gate_output_stays_between_inputs() {
        let reg = registry(EncoderConfig::small(1, 24, 2, 4), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (h, v) = (random_rows(&mut rng, 5, 24), random_rows(&mut rng, 5, 24));
            let (m, _) = fuse(&reg, &h, &v);
            for ((&m, &a), &b) in m.data().iter().zip(h.data()).zip(v.data()) {
                assert!(m >= a.min(b) && m <= a.max(b), "{m} outside [{a}, {b}]");
            }
        }
    }

    fn context(graph: AttentionGraph) -> LayerContext {
        let pairs = Rc::new(graph.pairs());
        LayerContext { graph, pairs, corners: None }
    }

    fn attend(reg: &ParameterRegistry<f64>, cfg: &EncoderConfig, m: &Tensor<f64>, graph: AttentionGraph) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let ctx = context(graph);
        let mv = g.constant(m.clone());
        let (h, att) = graph_attention_layer(&mut g, &p, 0, mv, &ctx, cfg).unwrap();
        (g.value(h).clone(), att.iter().map(|&a| g.value(a).clone()).collect())
    }

    #[test]
    fn zero_queries_and_keys_give_uniform_attention() {
        let cfg = EncoderConfig {
            use_rpe: false,
            ..EncoderConfig::small(1, 12, 2, 4)
        };
        let mut reg = registry(cfg.clone(), 7);
        set(&mut reg, "encoder.layer0.attn.wq", 0.0);
        set(&mut reg, "encoder.layer0.attn.wk", 0.0);
        let m = random_rows(&mut ChaCha8Rng::seed_from_u64(8), 2, 12);
        let (_, att) = attend(&reg, &cfg, &m, AttentionGraph::dense(1).unwrap());
        for a in att {
            assert!(a.data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let cfg = EncoderConfig {
            use_rpe: false,
            ..EncoderConfig::small(1, 12, 3, 4)
        };
        let reg = registry(cfg.clone(), 9);
        let row: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = Tensor::from_rows(&vec![row; 4]).unwrap();
        let (h, _) = attend(&reg, &cfg, &m, AttentionGraph::dense(3).unwrap());
        for r in 1..4 {
            assert_eq!(h.row(r), h.row(0));
        }
    }

    #[test]
    fn disabling_rpe_matches_zero_corner_weights() {
        let boxes = vec![
            NormalizedBox::page(),
            NormalizedBox::from_corners(10, 10, 60, 30),
            NormalizedBox::from_corners(200, 40, 300, 90),
            NormalizedBox::from_corners(20, 300, 90, 350),
        ];
        let on = EncoderConfig::small(1, 12, 2, 4);
        let off = EncoderConfig { use_rpe: false, ..on.clone() };
        let mut reg = registry(on.clone(), 11);
        for c in crate::layout::CORNER_NAMES {
            set(&mut reg, &format!("encoder.layer0.rpe.w_{c}"), 0.0);
        }
        let m = random_rows(&mut ChaCha8Rng::seed_from_u64(12), 4, 12);
        let graph = AttentionGraph::from_boxes(&boxes, 4).unwrap();
        let run = |cfg: &EncoderConfig| {
            let mut g = Graph::new();
            let p = reg.bind(&mut g);
            let pairs = Rc::new(graph.pairs());
            let corners = crate::layout::pair_corner_features::<f64>(&boxes, &pairs, cfg.sinusoid_dim()).unwrap();
            let corners = cfg.use_rpe.then(|| corners.map(|c| g.constant(c)));
            let ctx = LayerContext { graph: graph.clone(), pairs, corners };
            let mv = g.constant(m.clone());
            let (h, _) = graph_attention_layer(&mut g, &p, 0, mv, &ctx, cfg).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(&on), run(&off));
    }

    #[test]
    fn locality_and_global_receptive_field() {
        let cfg = EncoderConfig {
            use_rpe: false,
            ..EncoderConfig::small(1, 12, 2, 2)
        };
        let reg = registry(cfg.clone(), 13);
        // regions on a line: node 1's neighborhood is {1, 2}
        let boxes: Vec<NormalizedBox> = std::iter::once(NormalizedBox::page())
            .chain((0..4).map(|i| NormalizedBox::from_corners(100 * i, 0, 100 * i + 10, 10)))
            .collect();
        let graph = AttentionGraph::from_boxes(&boxes, 2).unwrap();
        assert_eq!(graph.neighbors(1), &[1, 2]);
        let m = random_rows(&mut ChaCha8Rng::seed_from_u64(14), 5, 12);
        let (base, _) = attend(&reg, &cfg, &m, graph.clone());
        let mut moved = m.clone();
        moved.data_mut()[4 * 12 + 3] += 0.5;
        let (h, _) = attend(&reg, &cfg, &moved, graph);
        assert_eq!(h.row(1), base.row(1));
        assert_ne!(h.row(0), base.row(0));
    }

    #[test]
    fn non_finite_scores_name_the_layer() {
        let cfg = EncoderConfig {
            use_rpe: false,
            ..EncoderConfig::small(1, 6, 1, 2)
        };
        let reg = registry(cfg.clone(), 15);
        let mut m = Tensor::<f64>::zeros(&[3, 6]);
        m.data_mut()[0] = f64::INFINITY;
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let ctx = context(AttentionGraph::dense(2).unwrap());
        let mv = g.constant(m);
        let err = graph_attention_layer(&mut g, &p, 0, mv, &ctx, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref s) if s.contains("layer 0")), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::small(1, 10, 2, 4).validate().is_err());
        assert!(EncoderConfig::small(1, 24, 5, 4).validate().is_err());
        assert!(EncoderConfig::small(1, 6, 1, 4).validate().is_err());
        let mut c = EncoderConfig::small(2, 24, 2, 4);
        c.residual_gate_layers = 3;
        assert!(c.validate().is_err());
        let parsed: EncoderConfig = serde_json::from_str(r#"{"layers":2,"dim":24,"fusion":"add"}"#).unwrap();
        assert_eq!((parsed.layers, parsed.fusion, parsed.heads), (2, FusionMode::Add, 12));
        assert!(serde_json::from_str::<EncoderConfig>(r#"{"layerz":2}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gate_interpolation_bound(seed in any::<u64>()) {
            let reg = registry(EncoderConfig::small(1, 12, 2, 4), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let (h, v) = (random_rows(&mut rng, 3, 12), random_rows(&mut rng, 3, 12));
            let (m, _) = fuse(&reg, &h, &v);
            for ((&m, &a), &b) in m.data().iter().zip(h.data()).zip(v.data()) {
                prop_assert!(m >= a.min(b) && m <= a.max(b));
            }
        }
    }
}
