//! Sentence and visual node embeddings.
//!
//! Raw per-region features come from an [`EmbeddingProvider`]; they are
//! frozen inputs. The learned part is a projection into the model width
//! plus the layout embedding of the region's box:
//!
//! ```text
//! s_i = raw_text(t_i) · P_text + b_text + l_i        (i ≥ 1)
//! s_0 = cls + l_0
//! v_i = raw_vis(region i) · P_vis + b_vis + l_i      (i ≥ 0)
//! ```
//!
//! where the global visual feature is the mean of the region features
//! unless the provider supplies one explicitly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::checkpoint::{read_container_file, write_container_file, Container};
use crate::io::corpus::DocumentRecord;
use crate::layout::{normalize_box, BoundingBox};
use crate::scalar::Scalar;

pub const TEXT_PROJ_WEIGHT: &str = "text.proj.weight";
pub const TEXT_PROJ_BIAS: &str = "text.proj.bias";
pub const TEXT_CLS: &str = "text.cls";
pub const VIS_PROJ_WEIGHT: &str = "vis.proj.weight";
pub const VIS_PROJ_BIAS: &str = "vis.proj.bias";

/// Default raw widths of the stub providers.
pub const DEFAULT_TEXT_DIM: usize = 384;
pub const DEFAULT_VISUAL_DIM: usize = 256;

/// Key of the whole-page visual feature in precomputed files.
pub const GLOBAL_VISUAL_KEY: &str = "__global__";

/// One OCR region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRecord {
    pub id: String,
    pub text: String,
    pub bbox: BoundingBox,
    pub label: Option<String>,
}

/// Source of frozen raw features.
pub trait EmbeddingProvider {
    fn source(&self) -> ProviderKind;
    fn text_dim(&self) -> usize;
    fn visual_dim(&self) -> usize;
    fn text_raw(&self, doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>>;
    fn visual_raw(&self, doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>>;
    /// Explicit whole-page feature, if the source has one.
    fn visual_global(&self, doc: &DocumentRecord) -> Result<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    DeterministicStub,
    PrecomputedFile,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit FNV-1a over bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// splitmix64 generator.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)` from the top 53 bits.
    pub fn next_signed_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }
}

/// Deterministic unit-norm pseudo-random vector for `key`.
///
/// The generator is seeded with `fnv1a64(key) ^ (seed · 0x9e3779b97f4a7c15)`;
/// components are drawn i.i.d. uniform on `[-1, 1)` by [`SplitMix64`] and
/// the vector is L2-normalized.
pub fn stub_embedding(key: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("stub embedding width must be positive".into()));
    }
    let mut rng = SplitMix64::new(fnv1a64(key.as_bytes()) ^ seed.wrapping_mul(GOLDEN_GAMMA));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.next_signed_unit()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

/// Hash-seeded stand-in for the sentence encoder and visual backbone.
///
/// Text features are keyed by the region text alone. Visual features are
/// keyed by the text and the box on the normalized grid, so regions that
/// look the same map to the same vector.
#[derive(Clone, Debug)]
pub struct StubProvider {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub seed: u64,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self {
            text_dim: DEFAULT_TEXT_DIM,
            visual_dim: DEFAULT_VISUAL_DIM,
            seed: 0,
        }
    }
}

impl EmbeddingProvider for StubProvider {
    fn source(&self) -> ProviderKind {
        ProviderKind::DeterministicStub
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    fn text_raw(&self, _doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>> {
        stub_embedding(&region.text, self.text_dim, self.seed)
    }

    fn visual_raw(&self, doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>> {
        let nb = normalize_box(&region.bbox, (doc.width, doc.height))?;
        let (x0, y0) = nb.vertices[0];
        let (x2, y2) = nb.vertices[2];
        let key = format!("vis|{}|{x0},{y0},{x2},{y2}", region.text);
        stub_embedding(&key, self.visual_dim, self.seed.wrapping_add(1))
    }

    fn visual_global(&self, _doc: &DocumentRecord) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Features read from per-document containers `<dir>/<doc_id>.bin` holding
/// `text_raw/<region_id>`, `vis_raw/<region_id>` and optionally
/// `vis_raw/__global__`.
#[derive(Debug)]
pub struct PrecomputedProvider {
    dir: PathBuf,
    text_dim: usize,
    visual_dim: usize,
    cache: std::cell::RefCell<BTreeMap<String, Container>>,
}

impl PrecomputedProvider {
    pub fn new(dir: impl Into<PathBuf>, text_dim: usize, visual_dim: usize) -> Self {
        Self {
            dir: dir.into(),
            text_dim,
            visual_dim,
            cache: Default::default(),
        }
    }

    pub fn file_for(dir: &Path, doc_id: &str) -> PathBuf {
        dir.join(format!("{doc_id}.bin"))
    }

    fn lookup(&self, doc: &DocumentRecord, name: &str, dim: usize) -> Result<Option<Vec<f64>>> {
        let mut cache = self.cache.borrow_mut();
        if !cache.contains_key(&doc.id) {
            let c = read_container_file(&Self::file_for(&self.dir, &doc.id))
                .map_err(|e| Error::Data(format!("precomputed features for document {}: {e}", doc.id)))?;
            cache.insert(doc.id.clone(), c);
        }
        let Some(t) = cache[&doc.id].get(name) else {
            return Ok(None);
        };
        if t.len() != dim {
            return Err(Error::Data(format!(
                "document {}: `{name}` has {} values, expected {dim}",
                doc.id,
                t.len()
            )));
        }
        Ok(Some(t.data().iter().map(|&x| f64::from(x)).collect()))
    }

    fn required(&self, doc: &DocumentRecord, name: &str, dim: usize, region: &str) -> Result<Vec<f64>> {
        self.lookup(doc, name, dim)?.ok_or_else(|| {
            Error::Data(format!(
                "document {}: missing feature row `{name}` for region {region}",
                doc.id
            ))
        })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn source(&self) -> ProviderKind {
        ProviderKind::PrecomputedFile
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    fn text_raw(&self, doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>> {
        self.required(doc, &format!("text_raw/{}", region.id), self.text_dim, &region.id)
    }

    fn visual_raw(&self, doc: &DocumentRecord, region: &RegionRecord) -> Result<Vec<f64>> {
        self.required(doc, &format!("vis_raw/{}", region.id), self.visual_dim, &region.id)
    }

    fn visual_global(&self, doc: &DocumentRecord) -> Result<Option<Vec<f64>>> {
        self.lookup(doc, &format!("vis_raw/{GLOBAL_VISUAL_KEY}"), self.visual_dim)
    }
}

/// Raw features of one document, stacked per region.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures<T> {
    /// `[n × text_dim]`
    pub text: Tensor<T>,
    /// `[n × visual_dim]`
    pub visual: Tensor<T>,
    /// `[1 × visual_dim]` whole-page feature (explicit or region mean).
    pub visual_global: Tensor<T>,
}

/// Queries `provider` for every region of `doc`. Any failure aborts the
/// document and names the region.
pub fn collect_raw_features<T: Scalar>(doc: &DocumentRecord, provider: &dyn EmbeddingProvider) -> Result<RawFeatures<T>> {
    let n = doc.regions.len();
    if n == 0 {
        return Err(Error::Data(format!("document {}: empty document", doc.id)));
    }
    let (td, vd) = (provider.text_dim(), provider.visual_dim());
    let mut text = Vec::with_capacity(n * td);
    let mut visual = Vec::with_capacity(n * vd);
    let wrap = |region: &RegionRecord, e: Error| match e {
        Error::Data(msg) if msg.contains(&region.id) => Error::Data(msg),
        other => Error::Data(format!("document {}: region {}: {other}", doc.id, region.id)),
    };
    for r in &doc.regions {
        let t = provider.text_raw(doc, r).map_err(|e| wrap(r, e))?;
        let v = provider.visual_raw(doc, r).map_err(|e| wrap(r, e))?;
        if t.len() != td || v.len() != vd {
            return Err(Error::Data(format!("document {}: region {}: provider width mismatch", doc.id, r.id)));
        }
        text.extend(t);
        visual.extend(v);
    }
    let global: Vec<f64> = match provider.visual_global(doc)? {
        Some(g) => g,
        None => (0..vd)
            .map(|c| (0..n).map(|r| visual[r * vd + c]).sum::<f64>() / n as f64)
            .collect(),
    };
    let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    Ok(RawFeatures {
        text: Tensor::new(vec![n, td], cast(text))?,
        visual: Tensor::new(vec![n, vd], cast(visual))?,
        visual_global: Tensor::new(vec![1, vd], cast(global))?,
    })
}

/// Writes a provider's features for `doc` in the precomputed layout.
pub fn write_precomputed(dir: &Path, doc: &DocumentRecord, provider: &dyn EmbeddingProvider) -> Result<PathBuf> {
    let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
    for r in &doc.regions {
        let t = provider.text_raw(doc, r)?;
        let v = provider.visual_raw(doc, r)?;
        named.push((format!("text_raw/{}", r.id), Tensor::new(vec![t.len()], t)?));
        named.push((format!("vis_raw/{}", r.id), Tensor::new(vec![v.len()], v)?));
    }
    if let Some(g) = provider.visual_global(doc)? {
        named.push((format!("vis_raw/{GLOBAL_VISUAL_KEY}"), Tensor::new(vec![g.len()], g)?));
    }
    let path = PrecomputedProvider::file_for(dir, &doc.id);
    write_container_file(&path, named.iter().map(|(n, t)| (n.as_str(), t)), None)?;
    Ok(path)
}

/// `raw · W + b` (bias only when present in `params`).
fn project<T: Scalar>(g: &mut Graph<T>, params: &Params, raw: Var, weight: &str, bias: &str) -> Result<Var> {
    let w = params.get(weight)?;
    let out = g.matmul(raw, w)?;
    if params.contains(bias) {
        let b = params.get(bias)?;
        g.add_row(out, b)
    } else {
        Ok(out)
    }
}

/// Projected text features before layout is added, `[n × d]`.
pub fn sentence_pre_layout<T: Scalar>(g: &mut Graph<T>, params: &Params, text_raw: Var) -> Result<Var> {
    project(g, params, text_raw, TEXT_PROJ_WEIGHT, TEXT_PROJ_BIAS)
}

/// Prepends the `[CLS]` row to region rows and adds layout: `[(n+1) × d]`.
pub fn assemble_sentence_rows<T: Scalar>(g: &mut Graph<T>, params: &Params, region_rows: Var, layout: Var) -> Result<Var> {
    let cls = params.get(TEXT_CLS)?;
    let d = g.value(cls).len();
    let cls = g.reshape(cls, &[1, d])?;
    let rows = g.concat(&[cls, region_rows], 0)?;
    g.add(rows, layout)
}

/// Sentence embeddings `S` including the global row.
pub fn sentence_embeddings<T: Scalar>(g: &mut Graph<T>, params: &Params, text_raw: Var, layout: Var) -> Result<Var> {
    let pre = sentence_pre_layout(g, params, text_raw)?;
    assemble_sentence_rows(g, params, pre, layout)
}

/// Visual embeddings `V` including the global row.
pub fn visual_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    visual_raw: Var,
    visual_global: Var,
    layout: Var,
) -> Result<Var> {
    let all = g.concat(&[visual_global, visual_raw], 0)?;
    let proj = project(g, params, all, VIS_PROJ_WEIGHT, VIS_PROJ_BIAS)?;
    g.add(proj, layout)
}
