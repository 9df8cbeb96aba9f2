//! Window partitioning and hyperedge construction.

use super::{
    DilationWeights, EdgeKind, Hyperedge, HypergraphConfig, MultiScaleHypergraph, PatchField,
    Window,
};
use crate::scalar::lit;
use crate::tensor::{avg_pool_rect, concat_rows, cosine_matrix, gather_rows, reshape, TensorBase};
use crate::{Error, Result, Scalar};

/// Tile a padded field into non-overlapping windows, row-major.
pub fn partition_windows<T: Scalar>(field: &PatchField<T>, window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let (h, w) = (field.h(), field.w());
    if h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!(
            "field {h}x{w} is not a multiple of window {window}; pad first"
        )));
    }
    let mut windows = Vec::with_capacity((h / window) * (w / window));
    for wr in 0..h / window {
        for wc in 0..w / window {
            let origin = (wr * window, wc * window);
            let members = (0..window)
                .flat_map(|r| (0..window).map(move |c| (origin.0 + r) * w + origin.1 + c))
                .collect();
            windows.push(Window { id: windows.len(), origin, size: window, members });
        }
    }
    Ok(windows)
}

/// Split a window into a near-equal centroid grid and return the first `c`
/// rectangles row-major, in window-local half-open (r0, r1, c0, c1) form.
/// Earlier grid rows/cols absorb the remainder, so sizes differ by at most
/// one cell per axis.
pub fn centroid_rects(window: usize, c: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    if c == 0 {
        return Err(Error::Config("centroid count must be positive".into()));
    }
    let g = (c as f64).sqrt().ceil() as usize;
    if g > window {
        return Err(Error::Config(format!(
            "{c} centroids need a {g}x{g} grid, which does not fit window {window}"
        )));
    }
    let cuts = |g: usize| -> Vec<(usize, usize)> {
        let (base, rem) = (window / g, window % g);
        let mut out = Vec::with_capacity(g);
        let mut at = 0;
        for i in 0..g {
            let len = base + usize::from(i < rem);
            out.push((at, at + len));
            at += len;
        }
        out
    };
    let spans = cuts(g);
    let mut rects = Vec::with_capacity(c);
    'outer: for &(r0, r1) in &spans {
        for &(c0, c1) in &spans {
            rects.push((r0, r1, c0, c1));
            if rects.len() == c {
                break 'outer;
            }
        }
    }
    Ok(rects)
}

/// Build one window's cluster hyperedges from its similarity-space features
/// (`feats`: [w*w, d], window-local row-major; `real[j]` marks non-padding
/// cells). Returns the edges (one per centroid, possibly empty) and the
/// full [c, w*w] similarity matrix S used for assignment.
pub fn cluster_hyperedges<T: Scalar>(
    window: &Window,
    feats: &TensorBase<T>,
    real: &[bool],
    c: usize,
    eps: T,
) -> Result<(Vec<Hyperedge<T>>, TensorBase<T>)> {
    let w = window.size;
    let cells = w * w;
    match feats.shape() {
        [n, _] if *n == cells => {}
        other => {
            return Err(Error::ShapeMismatch {
                op: "cluster_hyperedges",
                expected: format!("[{cells}, d]"),
                got: format!("{other:?}"),
            })
        }
    }
    if real.len() != cells {
        return Err(Error::ShapeMismatch {
            op: "cluster_hyperedges",
            expected: format!("real mask of len {cells}"),
            got: format!("len {}", real.len()),
        });
    }

    let d = feats.shape()[1];
    let grid = reshape(feats, vec![w, w, d])?;
    let rects = centroid_rects(w, c)?;
    let pooled: Vec<TensorBase<T>> = rects
        .iter()
        .map(|&(r0, r1, c0, c1)| avg_pool_rect(&grid, r0, r1, c0, c1))
        .collect::<Result<_>>()?;
    let centroids = concat_rows(&pooled.iter().collect::<Vec<_>>())?;
    let sims = cosine_matrix(&centroids, feats, eps)?;

    // Hard assignment: each real cell joins its best centroid, ties to the
    // lowest index. Reads the similarity values out of the tape-tracked
    // tensor; the assignment itself is discrete and carries no gradient.
    let s = sims.data();
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); c];
    for j in 0..cells {
        if !real[j] {
            continue;
        }
        let mut best = 0usize;
        for ci in 1..c {
            if s[ci * cells + j] > s[best * cells + j] {
                best = ci;
            }
        }
        assigned[best].push(j);
    }

    let mut edges = Vec::with_capacity(c);
    for (ci, locals) in assigned.into_iter().enumerate() {
        let members: Vec<usize> = locals.iter().map(|&j| window.members[j]).collect();
        let edge_sims: Vec<T> = locals.iter().map(|&j| s[ci * cells + j]).collect();
        let (r0, r1, c0, c1) = rects[ci];
        edges.push(Hyperedge {
            kind: EdgeKind::Cluster,
            window: window.id,
            param: ci,
            members,
            sims: edge_sims,
            rect: Some((
                window.origin.0 + r0,
                window.origin.0 + r1,
                window.origin.1 + c0,
                window.origin.1 + c1,
            )),
            center: None,
            centroid_sim: Some(pooled[ci].clone()),
        });
    }
    Ok((edges, sims))
}

/// Build one window's dilated hyperedges: a `kernel x kernel` lattice
/// around the window center, offsets scaled by each rate and clipped to the
/// window and to the field's real extent. A window whose center is padding
/// emits nothing.
pub fn dilated_hyperedges<T: Scalar>(
    field: &PatchField<T>,
    window: &Window,
    kernel: usize,
    rates: &[usize],
) -> Vec<Hyperedge<T>> {
    let (cr, cc) = window.center();
    if !field.is_real(cr, cc) {
        return Vec::new();
    }
    let half = (kernel as isize - 1) / 2;
    let w = window.size as isize;
    let mut edges = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut members = Vec::with_capacity(kernel * kernel);
        for p in -half..=half {
            for q in -half..=half {
                let r = cr as isize + p * rate as isize;
                let c = cc as isize + q * rate as isize;
                let (lr, lc) = (r - window.origin.0 as isize, c - window.origin.1 as isize);
                if lr < 0 || lr >= w || lc < 0 || lc >= w {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                if !field.is_real(r, c) {
                    continue;
                }
                members.push(r * field.w() + c);
            }
        }
        members.sort_unstable();
        edges.push(Hyperedge {
            kind: EdgeKind::Dilated,
            window: window.id,
            param: rate,
            members,
            sims: Vec::new(),
            rect: None,
            center: Some((cr, cc)),
            centroid_sim: None,
        });
    }
    edges
}

/// Assemble the full multi-scale hypergraph for one head over a field of
/// similarity-space features. The field is padded here if needed; edges are
/// emitted window-major with cluster edges (ascending centroid) before
/// dilated edges (ascending rate), which fixes every edge id.
pub fn build_multiscale_hypergraph<T: Scalar>(
    field: &PatchField<T>,
    cfg: &HypergraphConfig,
    head: usize,
    dilation: &DilationWeights<T>,
) -> Result<MultiScaleHypergraph<T>> {
    cfg.validate()?;
    for rate in &cfg.rates {
        if dilation.weight_for(*rate).is_none() {
            return Err(Error::Config(format!("no dilation weight for rate {rate}")));
        }
    }
    let field = field.padded_to(cfg.window)?;
    let windows = partition_windows(&field, cfg.window)?;
    let (h, w, d) = (field.h(), field.w(), field.dim());
    let rows = reshape(field.features(), vec![h * w, d])?;
    let eps = lit::<T>(cfg.eps);

    let mut edges = Vec::new();
    let mut sims = Vec::with_capacity(windows.len());
    for window in &windows {
        let feats = gather_rows(&rows, &window.members)?;
        let real: Vec<bool> = window
            .members
            .iter()
            .map(|&v| {
                let (r, c) = field.coords_of(v);
                field.is_real(r, c)
            })
            .collect();
        let (cluster, s) = cluster_hyperedges(window, &feats, &real, cfg.centroids, eps)?;
        edges.extend(cluster);
        sims.push(s);
        edges.extend(dilated_hyperedges(&field, window, cfg.kernel, &cfg.rates));
    }

    let n_vertices = field.vertex_count();
    let mut incidence = vec![Vec::new(); n_vertices];
    for (eid, edge) in edges.iter().enumerate() {
        for &v in &edge.members {
            incidence[v].push(eid);
        }
    }

    Ok(MultiScaleHypergraph {
        n_vertices,
        field_h: h,
        field_w: w,
        window_size: cfg.window,
        head,
        windows,
        edges,
        incidence,
        sims,
        dilation: dilation.clone(),
    })
}
