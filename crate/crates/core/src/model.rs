//! Parameter layout, initialization and the per-document forward pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterRegistry, Params, Tensor, Var};
use crate::embedding::{
    collect_raw_features, sentence_embeddings, visual_embeddings, EmbeddingProvider, RawFeatures, DEFAULT_TEXT_DIM,
    DEFAULT_VISUAL_DIM, TEXT_CLS, TEXT_PROJ_BIAS, TEXT_PROJ_WEIGHT, VIS_PROJ_BIAS, VIS_PROJ_WEIGHT,
};
use crate::encoder::{encode_document, layer_parameter_shapes, EncoderConfig, EncoderOutput, LayerContext};
use crate::error::{Error, Result};
use crate::io::corpus::DocumentRecord;
use crate::layout::{layout_embed, normalize_box, pair_corner_features, LayoutFeatures, NormalizedBox, LAYOUT_TABLE_ROWS};
use crate::neighborhood::AttentionGraph;
use crate::pretrain::{MSM_HEAD_BIAS, MSM_HEAD_WEIGHT, MSM_MASK_EMBEDDING};
use crate::scalar::Scalar;

pub const LAYOUT_X: &str = "layout.x";
pub const LAYOUT_Y: &str = "layout.y";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Raw sentence feature width.
    pub text_dim: usize,
    /// Raw region visual feature width.
    pub visual_dim: usize,
    /// Bias terms on the text and visual projections.
    pub proj_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            text_dim: DEFAULT_TEXT_DIM,
            visual_dim: DEFAULT_VISUAL_DIM,
            proj_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.text_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("raw feature widths must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Xavier(f64),
}

fn init_kind(name: &str) -> Init {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gamma" => Init::Ones,
        "beta" | "bias" | "b1" | "b2" | "bo" => Init::Zeros,
        "x" | "y" | "cls" | "mask_embedding" => Init::Uniform(0.1),
        l if l.starts_with("w_") => Init::Xavier(0.1),
        _ => Init::Xavier(1.0),
    }
}

fn init_tensor<T: Scalar>(rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data: Vec<T> = match init_kind(name) {
        Init::Zeros => vec![T::zero(); len],
        Init::Ones => vec![T::one(); len],
        Init::Uniform(a) => (0..len).map(|_| T::lit(rng.gen_range(-a..a))).collect(),
        Init::Xavier(gain) => {
            let (fan_in, fan_out) = match shape {
                [r, c] => (*r, *c),
                [n] => (*n, *n),
                _ => (len, len),
            };
            let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| T::lit(rng.gen_range(-a..a))).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fills `registry` with freshly initialized tensors for `shapes`, in the
/// given order.
pub fn init_into<T: Scalar>(registry: &mut ParameterRegistry<T>, shapes: &[(String, Vec<usize>)], rng: &mut ChaCha8Rng) {
    for (name, shape) in shapes {
        registry.insert(name.clone(), init_tensor(rng, name, shape));
    }
}

/// Names and shapes of the encoder, embedding and pre-training tensors.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim();
    let mut out = vec![
        (LAYOUT_X.to_owned(), vec![LAYOUT_TABLE_ROWS, d / 6]),
        (LAYOUT_Y.to_owned(), vec![LAYOUT_TABLE_ROWS, d / 6]),
        (TEXT_PROJ_WEIGHT.to_owned(), vec![cfg.text_dim, d]),
        (TEXT_CLS.to_owned(), vec![d]),
        (VIS_PROJ_WEIGHT.to_owned(), vec![cfg.visual_dim, d]),
    ];
    if cfg.proj_bias {
        out.push((TEXT_PROJ_BIAS.to_owned(), vec![d]));
        out.push((VIS_PROJ_BIAS.to_owned(), vec![d]));
    }
    for l in 0..cfg.encoder.layers {
        out.extend(layer_parameter_shapes(&cfg.encoder, l));
    }
    out.push((MSM_MASK_EMBEDDING.to_owned(), vec![d]));
    out.push((MSM_HEAD_WEIGHT.to_owned(), vec![d, d]));
    out.push((MSM_HEAD_BIAS.to_owned(), vec![d]));
    out
}

/// Seeded initialization of every tensor in [`parameter_shapes`].
pub fn init_parameters<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterRegistry<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParameterRegistry::new();
    init_into(&mut reg, &parameter_shapes(cfg), &mut rng);
    Ok(reg)
}

/// Model-ready view of one document: normalized boxes, frozen raw
/// features, neighborhood graph and cached corner encodings.
#[derive(Clone, Debug)]
pub struct PreparedDocument<T> {
    pub id: String,
    /// `n + 1` boxes; index 0 is the whole page.
    pub boxes: Vec<NormalizedBox>,
    pub raw: RawFeatures<T>,
    pub graph: AttentionGraph,
    pub pairs: Rc<Vec<(usize, usize)>>,
    pub corners: Option<[Tensor<T>; 4]>,
    pub region_labels: Vec<Option<String>>,
    pub doc_class: Option<String>,
}

impl<T: Scalar> PreparedDocument<T> {
    pub fn region_count(&self) -> usize {
        self.boxes.len() - 1
    }

    pub fn layout_features(&self) -> Vec<LayoutFeatures> {
        self.boxes.iter().map(NormalizedBox::features).collect()
    }

    /// Builds a prepared document from already-normalized region boxes
    /// (global box is added) and raw features.
    pub fn from_parts(
        id: impl Into<String>,
        region_boxes: &[NormalizedBox],
        raw: RawFeatures<T>,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let n = region_boxes.len();
        if n == 0 {
            return Err(Error::Data("empty document".into()));
        }
        if raw.text.dims2().0 != n || raw.visual.dims2().0 != n {
            return Err(Error::Data(format!("raw features cover {} regions, boxes {n}", raw.text.dims2().0)));
        }
        let mut boxes = Vec::with_capacity(n + 1);
        boxes.push(NormalizedBox::page());
        boxes.extend_from_slice(region_boxes);
        let graph = if cfg.encoder.use_gat {
            AttentionGraph::from_boxes(&boxes, cfg.encoder.top_k)?
        } else {
            AttentionGraph::dense(n)?
        };
        let pairs = Rc::new(graph.pairs());
        let corners = if cfg.encoder.use_rpe {
            Some(pair_corner_features(&boxes, &pairs, cfg.encoder.sinusoid_dim())?)
        } else {
            None
        };
        Ok(Self {
            id: id.into(),
            boxes,
            raw,
            graph,
            pairs,
            corners,
            region_labels: vec![None; n],
            doc_class: None,
        })
    }

    /// Same document with a different neighborhood graph.
    pub fn with_graph(&self, graph: AttentionGraph, cfg: &ModelConfig) -> Result<Self> {
        if graph.node_count() != self.boxes.len() {
            return Err(Error::Data("graph size does not match document".into()));
        }
        let pairs = Rc::new(graph.pairs());
        let corners = if cfg.encoder.use_rpe {
            Some(pair_corner_features(&self.boxes, &pairs, cfg.encoder.sinusoid_dim())?)
        } else {
            None
        };
        Ok(Self {
            graph,
            pairs,
            corners,
            ..self.clone()
        })
    }
}

pub fn prepare_document<T: Scalar>(
    doc: &DocumentRecord,
    provider: &dyn EmbeddingProvider,
    cfg: &ModelConfig,
) -> Result<PreparedDocument<T>> {
    if provider.text_dim() != cfg.text_dim || provider.visual_dim() != cfg.visual_dim {
        return Err(Error::Config(format!(
            "provider widths {}/{} do not match model {}/{}",
            provider.text_dim(),
            provider.visual_dim(),
            cfg.text_dim,
            cfg.visual_dim
        )));
    }
    let boxes = doc
        .regions
        .iter()
        .map(|r| normalize_box(&r.bbox, (doc.width, doc.height)))
        .collect::<Result<Vec<_>>>()?;
    let raw = collect_raw_features(doc, provider)?;
    let mut p = PreparedDocument::from_parts(doc.id.clone(), &boxes, raw, cfg)?;
    p.region_labels = doc.regions.iter().map(|r| r.label.clone()).collect();
    p.doc_class = doc.doc_class.clone();
    Ok(p)
}

/// Layout, sentence and visual rows for one document, each `[(n+1) × d]`.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbeddings {
    pub sentences: Var,
    pub visual: Var,
    pub layout: Var,
}

pub fn layout_rows<T: Scalar>(g: &mut Graph<T>, params: &Params, doc: &PreparedDocument<T>) -> Result<Var> {
    let tx = params.get(LAYOUT_X)?;
    let ty = params.get(LAYOUT_Y)?;
    layout_embed(g, tx, ty, &doc.layout_features())
}

pub fn visual_rows<T: Scalar>(g: &mut Graph<T>, params: &Params, doc: &PreparedDocument<T>, layout: Var) -> Result<Var> {
    let raw = g.constant(doc.raw.visual.clone());
    let global = g.constant(doc.raw.visual_global.clone());
    visual_embeddings(g, params, raw, global, layout)
}

pub fn embed_nodes<T: Scalar>(g: &mut Graph<T>, params: &Params, doc: &PreparedDocument<T>) -> Result<NodeEmbeddings> {
    let layout = layout_rows(g, params, doc)?;
    let text = g.constant(doc.raw.text.clone());
    let sentences = sentence_embeddings(g, params, text, layout)?;
    let visual = visual_rows(g, params, doc, layout)?;
    Ok(NodeEmbeddings {
        sentences,
        visual,
        layout,
    })
}

/// Places the document's constants on `g`.
pub fn layer_context<T: Scalar>(g: &mut Graph<T>, doc: &PreparedDocument<T>) -> LayerContext {
    let corners = doc.corners.as_ref().map(|c| {
        [
            g.constant(c[0].clone()),
            g.constant(c[1].clone()),
            g.constant(c[2].clone()),
            g.constant(c[3].clone()),
        ]
    });
    LayerContext {
        graph: doc.graph.clone(),
        pairs: Rc::clone(&doc.pairs),
        corners,
    }
}

/// Full unmasked forward pass.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    doc: &PreparedDocument<T>,
    cfg: &ModelConfig,
) -> Result<(NodeEmbeddings, EncoderOutput)> {
    let emb = embed_nodes(g, params, doc)?;
    let ctx = layer_context(g, doc);
    let out = encode_document(g, params, emb.sentences, emb.visual, &ctx, &cfg.encoder)?;
    Ok((emb, out))
}

/// Config plus parameters, for inference outside a training loop.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParameterRegistry<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Final hidden rows `H^N`, `[(n+1) × d]`.
    pub fn encode(&self, doc: &PreparedDocument<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (_, out) = forward(&mut g, &p, doc, &self.config)?;
        Ok(g.value(out.hidden).clone())
    }

    /// Attention matrices `[layer][head]`.
    pub fn attention(&self, doc: &PreparedDocument<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (_, out) = forward(&mut g, &p, doc, &self.config)?;
        Ok(out
            .layers
            .iter()
            .map(|l| l.attention.iter().map(|&a| g.value(a).clone()).collect())
            .collect())
    }
}
