//! Multi-scale hypergraph construction over patch grids.
//!
//! A stage's feature map is a [`PatchField`]: an `[h,w,d]` grid of patch
//! vectors. The field is tiled into non-overlapping `w x w` windows and each
//! window contributes two families of hyperedges:
//!
//! * **Cluster** edges: the window is divided into a near-equal grid of
//!   rectangles, one per centroid; each rectangle's average-pooled feature is
//!   a centroid, and every real vertex joins the centroid with the highest
//!   cosine similarity (ties to the lowest index). The full similarity
//!   matrix S is kept for the convolution's gates.
//! * **Dilated** edges: one per dilation rate, a `k x k` lattice centered on
//!   the window's middle vertex with its offsets stretched by the rate and
//!   clipped to the window.
//!
//! Fields whose sides are not multiples of `w` are zero-padded on the bottom
//! and right; padded vertices are masked out of every hyperedge, and a
//! window whose central vertex is padding emits no dilated edges at all.
//!
//! Construction is deterministic: windows are scanned row-major, edges are
//! emitted cluster-before-dilated in ascending parameter order, and member
//! lists are ascending vertex ids.

mod build;
mod cost;
mod dump;
mod knn;

pub use build::{
    build_multiscale_hypergraph, centroid_rects, cluster_hyperedges, dilated_hyperedges,
    partition_windows,
};
pub use cost::{construction_cost, fit_loglog_slope, BenchRecord, BenchReport, CostMethod};
pub use dump::{dump_hypergraph, parse_dump, EdgeRecord};
pub use knn::knn_graph_baseline;

use crate::tensor::{reshape, scatter_add_rows, TensorBase};
use crate::{Error, Result, Scalar};

/// Construction knobs shared by every stage.
#[derive(Clone, Debug)]
pub struct HypergraphConfig {
    /// Window side length w.
    pub window: usize,
    /// Cluster edge count C per window.
    pub centroids: usize,
    /// Dilated lattice side k (odd).
    pub kernel: usize,
    /// Dilation rates, ascending.
    pub rates: Vec<usize>,
    /// Cosine similarity norm floor.
    pub eps: f64,
}

impl HypergraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.kernel.is_multiple_of(2) || self.kernel < 1 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.kernel > self.window {
            return Err(Error::Config(format!(
                "kernel {} exceeds window {}",
                self.kernel, self.window
            )));
        }
        if self.centroids == 0 || self.centroids > self.window * self.window {
            return Err(Error::Config(format!(
                "centroid count {} must be in 1..={}",
                self.centroids,
                self.window * self.window
            )));
        }
        if self.rates.is_empty() || !self.rates.windows(2).all(|p| p[0] < p[1]) || self.rates[0] == 0
        {
            return Err(Error::Config(format!(
                "dilation rates {:?} must be positive and strictly ascending",
                self.rates
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("cosine eps must be positive".into()));
        }
        Ok(())
    }
}

/// A stage's patch grid. `features` always covers the padded extent; the
/// real extent records how much of it came from actual content.
#[derive(Clone, Debug)]
pub struct PatchField<T: Scalar = f64> {
    features: TensorBase<T>,
    real_h: usize,
    real_w: usize,
    stage: usize,
}

impl<T: Scalar> PatchField<T> {
    /// Wrap an `[h,w,d]` feature tensor; the whole extent is real.
    pub fn new(features: TensorBase<T>, stage: usize) -> Result<Self> {
        match features.shape() {
            [h, w, _] => {
                let (real_h, real_w) = (*h, *w);
                Ok(Self { features, real_h, real_w, stage })
            }
            other => Err(Error::ShapeMismatch {
                op: "patch_field",
                expected: "[h,w,d]".into(),
                got: format!("{other:?}"),
            }),
        }
    }

    /// Wrap an already-padded `[h,w,d]` tensor while remembering the real
    /// content extent.
    pub fn with_real(
        features: TensorBase<T>,
        real_h: usize,
        real_w: usize,
        stage: usize,
    ) -> Result<Self> {
        let mut field = Self::new(features, stage)?;
        if real_h > field.h() || real_w > field.w() {
            return Err(Error::Config(format!(
                "real extent {real_h}x{real_w} exceeds tensor {}x{}",
                field.h(),
                field.w()
            )));
        }
        field.real_h = real_h;
        field.real_w = real_w;
        Ok(field)
    }

    /// Zero-pad the bottom/right edges until both sides are multiples of
    /// `window`. Differentiable: real rows are scattered into a zero base,
    /// so gradients flow back through the real extent.
    pub fn padded_to(&self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        let (h, w, d) = (self.h(), self.w(), self.dim());
        let hp = h.div_ceil(window) * window;
        let wp = w.div_ceil(window) * window;
        if hp == h && wp == w {
            return Ok(self.clone());
        }
        let rows = reshape(&self.features, vec![h * w, d])?;
        let ids: Vec<usize> = (0..h)
            .flat_map(|r| (0..w).map(move |c| r * wp + c))
            .collect();
        let base = TensorBase::zeros(vec![hp * wp, d]);
        let padded = scatter_add_rows(&base, &ids, &rows)?;
        Ok(Self {
            features: reshape(&padded, vec![hp, wp, d])?,
            real_h: self.real_h,
            real_w: self.real_w,
            stage: self.stage,
        })
    }

    /// Padded height (rows of the feature tensor).
    pub fn h(&self) -> usize {
        self.features.shape()[0]
    }

    /// Padded width.
    pub fn w(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn real_h(&self) -> usize {
        self.real_h
    }

    pub fn real_w(&self) -> usize {
        self.real_w
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn features(&self) -> &TensorBase<T> {
        &self.features
    }

    /// Total vertex count over the padded grid.
    pub fn vertex_count(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_real(&self, row: usize, col: usize) -> bool {
        row < self.real_h && col < self.real_w
    }

    /// Row-major coordinates of a padded-grid vertex id.
    pub fn coords_of(&self, vertex: usize) -> (usize, usize) {
        (vertex / self.w(), vertex % self.w())
    }
}

/// One w-by-w tile of the padded grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub id: usize,
    /// Top-left (row, col) in padded field coordinates.
    pub origin: (usize, usize),
    pub size: usize,
    /// All w*w vertex ids, row-major (padding included).
    pub members: Vec<usize>,
}

impl Window {
    /// The central vertex's field coordinates.
    pub fn center(&self) -> (usize, usize) {
        (self.origin.0 + self.size / 2, self.origin.1 + self.size / 2)
    }

    /// Window-local index of a field coordinate inside this window.
    pub fn local_index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row >= self.origin.0 && row < self.origin.0 + self.size);
        debug_assert!(col >= self.origin.1 && col < self.origin.1 + self.size);
        (row - self.origin.0) * self.size + (col - self.origin.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Cluster,
    Dilated,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Cluster => "cluster",
            EdgeKind::Dilated => "dilated",
        }
    }
}

/// One hyperedge. Cluster edges carry per-member similarities and the
/// centroid's pooling rectangle; dilated edges carry their rate and the
/// central vertex. `members` is always ascending and padding-free.
#[derive(Clone, Debug)]
pub struct Hyperedge<T: Scalar = f64> {
    pub kind: EdgeKind,
    pub window: usize,
    /// Centroid index for cluster edges, dilation rate for dilated edges.
    pub param: usize,
    pub members: Vec<usize>,
    /// Cluster only: similarity of each member to the centroid, aligned
    /// with `members`.
    pub sims: Vec<T>,
    /// Cluster only: half-open pooling rectangle (r0, r1, c0, c1) in field
    /// coordinates; the centroid is the average feature over it.
    pub rect: Option<(usize, usize, usize, usize)>,
    /// Dilated only: the central vertex's field coordinates.
    pub center: Option<(usize, usize)>,
    /// Cluster only: the similarity-space centroid the S row was computed
    /// against, shape [1,d].
    pub centroid_sim: Option<TensorBase<T>>,
}

/// Learnable per-rate weights w_r. The `[1]`-shaped tensors may be
/// tape-attached; cheap clones of the owning head's handles.
#[derive(Clone, Debug)]
pub struct DilationWeights<T: Scalar = f64> {
    pub rates: Vec<usize>,
    pub weights: Vec<TensorBase<T>>,
}

impl<T: Scalar> DilationWeights<T> {
    /// Constant weights, one per rate.
    pub fn constant(rates: &[usize], value: T) -> Self {
        Self {
            rates: rates.to_vec(),
            weights: rates.iter().map(|_| TensorBase::full(vec![1], value)).collect(),
        }
    }

    /// The weight tensor for a rate.
    pub fn weight_for(&self, rate: usize) -> Option<&TensorBase<T>> {
        self.rates.iter().position(|&r| r == rate).map(|i| &self.weights[i])
    }
}

/// Everything one head's convolution needs: edges, the incidence index,
/// per-window similarity matrices, and the dilation weights.
#[derive(Clone, Debug)]
pub struct MultiScaleHypergraph<T: Scalar = f64> {
    pub n_vertices: usize,
    /// Padded grid dims (vertex id = row * field_w + col).
    pub field_h: usize,
    pub field_w: usize,
    pub window_size: usize,
    /// Head index this graph was built for.
    pub head: usize,
    pub windows: Vec<Window>,
    pub edges: Vec<Hyperedge<T>>,
    /// Vertex id -> incident edge ids, ascending.
    pub incidence: Vec<Vec<usize>>,
    /// Per window: the [C, w*w] cosine similarity matrix S.
    pub sims: Vec<TensorBase<T>>,
    pub dilation: DilationWeights<T>,
}

impl<T: Scalar> MultiScaleHypergraph<T> {
    /// Edge ids incident to a vertex.
    pub fn incident(&self, vertex: usize) -> &[usize] {
        &self.incidence[vertex]
    }
}
