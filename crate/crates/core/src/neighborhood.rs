//! Top-k spatial neighborhoods and the boolean attention mask.
//!
//! Node 0 is the global node. Every node may attend to it, it may attend
//! to every node, and region nodes `1..=n` additionally attend to their
//! `k` nearest regions by box-center distance (themselves included).

use std::cmp::Ordering;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::NormalizedBox;

/// Midpoint of the top-left and bottom-right corners.
pub fn box_center(b: &NormalizedBox) -> (f64, f64) {
    let (x0, y0) = b.vertices[0];
    let (x2, y2) = b.vertices[2];
    (f64::from(x0 + x2) / 2.0, f64::from(y0 + y2) / 2.0)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Neighbor sets for region nodes.
///
/// `centers[r]` belongs to node `r + 1`. The returned list has one entry
/// per region, holding node indices (1-based) in ascending order. Each set
/// contains the node itself plus the `k − 1` closest other regions, ties
/// broken by lower node index. With `n ≤ k` every set is `{1, …, n}`.
pub fn knn_neighbors(centers: &[(f64, f64)], k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 1 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let n = centers.len();
    if n == 0 {
        return Err(Error::Data("empty document: no regions to connect".into()));
    }
    if centers.iter().any(|c| !c.0.is_finite() || !c.1.is_finite()) {
        return Err(Error::Data("non-finite box center".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, &ci) in centers.iter().enumerate() {
        if k >= n {
            out.push((1..=n).collect());
            continue;
        }
        candidates.clear();
        candidates.extend(
            centers
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &cj)| (dist2(ci, cj), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        let take = k - 1;
        if take > 0 && take < candidates.len() {
            candidates.select_nth_unstable_by(take - 1, cmp);
        }
        let mut set: Vec<usize> = candidates.iter().take(take).map(|&(_, j)| j + 1).collect();
        set.push(i + 1);
        set.sort_unstable();
        out.push(set);
    }
    Ok(out)
}

/// Neighborhood structure over `n + 1` nodes as a row-major boolean mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGraph {
    node_count: usize,
    k: usize,
    mask: Rc<Vec<bool>>,
    neighbors: Vec<Vec<usize>>,
}

/// Builds the mask: row 0 all true; row `i ≥ 1` true at `N(i) ∪ {0}`.
pub fn build_attention_mask(neighbors: &[Vec<usize>], k: usize) -> Result<AttentionGraph> {
    let n = neighbors.len();
    let size = n + 1;
    let mut mask = vec![false; size * size];
    mask[..size].iter_mut().for_each(|m| *m = true);
    for (r, set) in neighbors.iter().enumerate() {
        let i = r + 1;
        if !set.contains(&i) {
            return Err(Error::Data(format!("neighborhood of node {i} does not contain itself")));
        }
        mask[i * size] = true;
        for &j in set {
            if j == 0 || j > n {
                return Err(Error::Index { index: j, rows: size });
            }
            mask[i * size + j] = true;
        }
    }
    Ok(AttentionGraph {
        node_count: size,
        k,
        mask: Rc::new(mask),
        neighbors: neighbors.to_vec(),
    })
}

impl AttentionGraph {
    /// Top-k graph from normalized boxes; `boxes[0]` is the global node and
    /// is excluded from the spatial candidates.
    pub fn from_boxes(boxes: &[NormalizedBox], k: usize) -> Result<Self> {
        if boxes.len() < 2 {
            return Err(Error::Data("empty document: no regions to connect".into()));
        }
        let centers: Vec<_> = boxes[1..].iter().map(box_center).collect();
        let neighbors = knn_neighbors(&centers, k)?;
        build_attention_mask(&neighbors, k)
    }

    /// Every node attends to every node.
    pub fn dense(regions: usize) -> Result<Self> {
        if regions == 0 {
            return Err(Error::Data("empty document: no regions to connect".into()));
        }
        let all: Vec<usize> = (1..=regions).collect();
        build_attention_mask(&vec![all; regions], regions)
    }

    /// `n + 1`, global node included.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub(crate) fn mask_rc(&self) -> Rc<Vec<bool>> {
        Rc::clone(&self.mask)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.node_count + j]
    }

    /// Spatial neighbor set of region node `i ≥ 1` (excludes the global
    /// node).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i - 1]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.mask[i * self.node_count..(i + 1) * self.node_count]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn is_dense(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Permitted ordered pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.node_count;
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.mask[i * n + j])
            .collect()
    }
}
