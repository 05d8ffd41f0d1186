//! Box geometry: coordinate normalization, the six-feature layout
//! embedding and sinusoidal corner-offset features for the relative
//! position bias.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound of the normalized coordinate grid.
pub const COORD_MAX: i32 = 512;
/// Rows in each layout embedding table (`0..=COORD_MAX`).
pub const LAYOUT_TABLE_ROWS: usize = COORD_MAX as usize + 1;

/// Corner order used throughout: top-left, top-right, bottom-right,
/// bottom-left (clockwise from the upper left).
pub const CORNER_NAMES: [&str; 4] = ["tl", "tr", "br", "bl"];

/// Region box in image pixels, four vertices clockwise from top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub vertices: [(f64, f64); 4],
}

impl BoundingBox {
    /// Axis-aligned box from its top-left and bottom-right corners.
    pub fn from_corners(x0: f64, y0: f64, x2: f64, y2: f64) -> Self {
        Self {
            vertices: [(x0, y0), (x2, y0), (x2, y2), (x0, y2)],
        }
    }

    /// `[x0, y0, x1, y1, x2, y2, x3, y3]`.
    pub fn from_quad(q: [f64; 8]) -> Self {
        Self {
            vertices: [(q[0], q[1]), (q[2], q[3]), (q[4], q[5]), (q[6], q[7])],
        }
    }

    pub fn quad(&self) -> [f64; 8] {
        let v = &self.vertices;
        [v[0].0, v[0].1, v[1].0, v[1].1, v[2].0, v[2].1, v[3].0, v[3].1]
    }

    pub fn width(&self) -> f64 {
        (self.vertices[2].0 - self.vertices[0].0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.vertices[2].1 - self.vertices[0].1).max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(|(x, y)| x.is_finite() && y.is_finite())
    }
}

/// Box on the integer `[0, 512]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub vertices: [(i32, i32); 4],
    pub w: i32,
    pub h: i32,
}

impl NormalizedBox {
    /// Axis-aligned box already on the normalized grid. Coordinates are
    /// clamped into range.
    pub fn from_corners(x0: i32, y0: i32, x2: i32, y2: i32) -> Self {
        let c = |v: i32| v.clamp(0, COORD_MAX);
        let (x0, y0, x2, y2) = (c(x0), c(y0), c(x2), c(y2));
        Self::from_vertices([(x0, y0), (x2, y0), (x2, y2), (x0, y2)])
    }

    fn from_vertices(vertices: [(i32, i32); 4]) -> Self {
        let w = (vertices[2].0 - vertices[0].0).max(0);
        let h = (vertices[2].1 - vertices[0].1).max(0);
        Self { vertices, w, h }
    }

    /// The whole page.
    pub fn page() -> Self {
        Self::from_corners(0, 0, COORD_MAX, COORD_MAX)
    }

    pub fn features(&self) -> LayoutFeatures {
        LayoutFeatures {
            x0: self.vertices[0].0,
            y0: self.vertices[0].1,
            x2: self.vertices[2].0,
            y2: self.vertices[2].1,
            w: self.w,
            h: self.h,
        }
    }

    /// Shifts every vertex by `(dx, dy)` without clamping; `None` if any
    /// coordinate would leave the grid.
    pub fn translated(&self, dx: i32, dy: i32) -> Option<Self> {
        let mut v = self.vertices;
        for p in &mut v {
            p.0 += dx;
            p.1 += dy;
            if !(0..=COORD_MAX).contains(&p.0) || !(0..=COORD_MAX).contains(&p.1) {
                return None;
            }
        }
        Some(Self::from_vertices(v))
    }
}

/// `(x0, y0, x2, y2, w, h)` of a normalized box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutFeatures {
    pub x0: i32,
    pub y0: i32,
    pub x2: i32,
    pub y2: i32,
    pub w: i32,
    pub h: i32,
}

impl LayoutFeatures {
    pub fn as_array(&self) -> [i32; 6] {
        [self.x0, self.y0, self.x2, self.y2, self.w, self.h]
    }
}

fn scale_coord(v: f64, extent: f64) -> i32 {
    // f64::round rounds half away from zero.
    let scaled = (v * f64::from(COORD_MAX) / extent).round();
    scaled.clamp(0.0, f64::from(COORD_MAX)) as i32
}

/// Maps a pixel box onto the `[0, 512]` grid of a `width × height` image.
pub fn normalize_box(b: &BoundingBox, image_size: (f64, f64)) -> Result<NormalizedBox> {
    let (w, h) = image_size;
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(Error::Data(format!("image size must be positive, got {w}×{h}")));
    }
    if !b.is_finite() {
        return Err(Error::Data("bounding box has non-finite coordinates".into()));
    }
    let mut v = [(0, 0); 4];
    for (out, &(x, y)) in v.iter_mut().zip(&b.vertices) {
        *out = (scale_coord(x, w), scale_coord(y, h));
    }
    let nb = NormalizedBox::from_vertices(v);
    if (nb.w == 0 || nb.h == 0) && b.width() > 0.0 && b.height() > 0.0 {
        log::warn!("box {:?} collapses to zero area after normalization", b.quad());
    }
    Ok(nb)
}

/// Layout embedding rows for a batch of nodes.
///
/// Each row is `[Ex(x0); Ex(x2); Ex(w); Ey(y0); Ey(y2); Ey(h)]` where
/// `Ex`/`Ey` are 513-row tables of width `d / 6`.
pub fn layout_embed<T: Scalar>(
    g: &mut Graph<T>,
    table_x: Var,
    table_y: Var,
    features: &[LayoutFeatures],
) -> Result<Var> {
    let idx = |sel: fn(&LayoutFeatures) -> i32| -> Result<Vec<usize>> {
        features
            .iter()
            .map(|f| {
                let v = sel(f);
                usize::try_from(v)
                    .ok()
                    .filter(|&u| u < LAYOUT_TABLE_ROWS)
                    .ok_or(Error::Index {
                        index: v.max(0) as usize,
                        rows: LAYOUT_TABLE_ROWS,
                    })
            })
            .collect()
    };
    let parts = [
        g.embedding_lookup(table_x, &idx(|f| f.x0)?)?,
        g.embedding_lookup(table_x, &idx(|f| f.x2)?)?,
        g.embedding_lookup(table_x, &idx(|f| f.w)?)?,
        g.embedding_lookup(table_y, &idx(|f| f.y0)?)?,
        g.embedding_lookup(table_y, &idx(|f| f.y2)?)?,
        g.embedding_lookup(table_y, &idx(|f| f.h)?)?,
    ];
    g.concat(&parts, 1)
}

/// `[sin(δ/10000^(2t/d)), cos(δ/10000^(2t/d))]` interleaved, length `dim`.
pub fn sinusoidal_encode<T: Scalar>(delta: i32, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(dim);
    let delta = f64::from(delta);
    for t in 0..dim / 2 {
        let freq = 10000f64.powf((2 * t) as f64 / dim as f64);
        let angle = delta / freq;
        out.push(T::lit(angle.sin()));
        out.push(T::lit(angle.cos()));
    }
    out
}

/// Corner-offset encoding `p_ij^v = [f(x_iv − x_jv); f(y_iv − y_jv)]` of
/// length `2 · sinusoid_dim`.
pub fn corner_encoding<T: Scalar>(a: &NormalizedBox, b: &NormalizedBox, corner: usize, sinusoid_dim: usize) -> Vec<T> {
    let (xa, ya) = a.vertices[corner];
    let (xb, yb) = b.vertices[corner];
    let mut p = sinusoidal_encode(xa - xb, sinusoid_dim);
    p.extend(sinusoidal_encode::<T>(ya - yb, sinusoid_dim));
    p
}

/// Constant corner encodings for a list of ordered node pairs: one
/// `[pairs × 2·sinusoid_dim]` tensor per corner.
///
/// These depend only on the boxes and are computed once per document.
pub fn pair_corner_features<T: Scalar>(
    boxes: &[NormalizedBox],
    pairs: &[(usize, usize)],
    sinusoid_dim: usize,
) -> Result<[Tensor<T>; 4]> {
    if pairs.is_empty() {
        return Err(Error::Data("no node pairs for relative position features".into()));
    }
    let width = 2 * sinusoid_dim;
    let mut out: [Vec<T>; 4] = Default::default();
    for &(i, j) in pairs {
        let (a, b) = match (boxes.get(i), boxes.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Index {
                    index: i.max(j),
                    rows: boxes.len(),
                })
            }
        };
        for (v, buf) in out.iter_mut().enumerate() {
            buf.extend(corner_encoding::<T>(a, b, v, sinusoid_dim));
        }
    }
    let [a, b, c, d] = out;
    Ok([
        Tensor::new(vec![pairs.len(), width], a)?,
        Tensor::new(vec![pairs.len(), width], b)?,
        Tensor::new(vec![pairs.len(), width], c)?,
        Tensor::new(vec![pairs.len(), width], d)?,
    ])
}

/// Relative position bias rows `bb = Σ_v p^v · W^v` for every pair.
///
/// `prefix` names the four `[2·sinusoid_dim × d]` corner projections
/// `{prefix}.w_tl`, `.w_tr`, `.w_br`, `.w_bl`.
pub fn relative_position_bias<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    prefix: &str,
    corner_features: &[Var; 4],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, name) in CORNER_NAMES.iter().enumerate() {
        let w = params.get(&format!("{prefix}.w_{name}"))?;
        let term = g.matmul(corner_features[v], w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("four corners"))
}

/// Single-pair relative position bias from raw weight tensors.
pub fn relative_position_bias_pair<T: Scalar>(
    a: &NormalizedBox,
    b: &NormalizedBox,
    weights: [&Tensor<T>; 4],
) -> Result<Vec<T>> {
    let (rows, d) = weights[0].dims2();
    if rows % 2 != 0 {
        return Err(Error::Config(format!("corner projection input width {rows} is odd")));
    }
    let mut bb = vec![T::zero(); d];
    for (v, w) in weights.iter().enumerate() {
        if w.dims2() != (rows, d) {
            return Err(Error::shape("relative_position_bias", w.shape(), weights[0].shape()));
        }
        let p = corner_encoding::<T>(a, b, v, rows / 2);
        for (r, &pv) in p.iter().enumerate() {
            for c in 0..d {
                bb[c] += pv * w.get2(r, c);
            }
        }
    }
    Ok(bb)
}
