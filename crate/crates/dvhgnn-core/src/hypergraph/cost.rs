//! Construction cost probes: counted similarity evaluations and wall time
//! for the windowed-cluster builder against the quadratic KNN comparator,
//! plus a log-log slope fit over a size sweep.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use super::{build_multiscale_hypergraph, DilationWeights, HypergraphConfig, PatchField};
use crate::runtime::{reset_sim_evals, sim_evals};
use crate::scalar::lit;
use crate::tensor::TensorBase;
use crate::{Error, Result};

/// Neighbour count for the KNN comparator, matching the dilated lattice
/// size so both methods gather comparable neighbourhoods.
pub const KNN_K: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMethod {
    Cluster,
    Knn,
}

impl CostMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CostMethod::Cluster => "cluster_dhgc",
            CostMethod::Knn => "knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cluster_dhgc" => Ok(CostMethod::Cluster),
            "knn" => Ok(CostMethod::Knn),
            other => Err(Error::Config(format!(
                "unknown method {other:?}, expected cluster_dhgc or knn"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub method: CostMethod,
    pub n: usize,
    /// Similarity evaluations counted during one construction.
    pub ops: u64,
    /// Median wall time over the repeats, in milliseconds.
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Log-log slope of counted ops against n.
    pub ops_slope: f64,
    /// Log-log slope of wall time against n. Noisier than the ops slope;
    /// timer jitter on small sizes is clamped away, not modelled.
    pub wall_slope: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Config("slope fit needs at least two points".into()));
    }
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| {
            if x <= 0.0 || y <= 0.0 {
                return Err(Error::Config(format!("slope fit needs positive data, got ({x}, {y})")));
            }
            Ok((x.ln(), y.ln()))
        })
        .collect::<Result<_>>()?;
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Measure one method's construction cost over a sweep of vertex counts.
/// Each n must be a perfect square (features are laid out on a square
/// grid); for the cluster method the side must also split into whole
/// windows so the counted ops stay exactly centroids * n.
pub fn construction_cost(
    method: CostMethod,
    sizes: &[usize],
    dim: usize,
    repeats: usize,
    seed: u64,
    cfg: &HypergraphConfig,
) -> Result<BenchReport> {
    cfg.validate()?;
    if sizes.len() < 2 {
        return Err(Error::Config("need at least two sizes for a slope".into()));
    }
    if dim == 0 || repeats == 0 {
        return Err(Error::Config("dim and repeats must be positive".into()));
    }

    let mut records = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::Config(format!("size {n} is not a perfect square")));
        }
        if method == CostMethod::Cluster && !side.is_multiple_of(cfg.window) {
            return Err(Error::Config(format!(
                "side {side} does not split into windows of {}",
                cfg.window
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
        let feats = TensorBase::<f64>::rand_uniform(vec![n, dim], -1.0, 1.0, &mut rng);

        let mut walls = Vec::with_capacity(repeats);
        let mut ops = 0u64;
        for _ in 0..repeats {
            reset_sim_evals();
            let t0 = Instant::now();
            match method {
                CostMethod::Cluster => {
                    let grid = crate::tensor::reshape(&feats, vec![side, side, dim])?;
                    let field = PatchField::new(grid, 0)?;
                    let dil = DilationWeights::constant(&cfg.rates, lit::<f64>(0.5));
                    let g = build_multiscale_hypergraph(&field, cfg, 0, &dil)?;
                    std::hint::black_box(g.edges.len());
                }
                CostMethod::Knn => {
                    let g = super::knn_graph_baseline(&feats, KNN_K, lit::<f64>(cfg.eps))?;
                    std::hint::black_box(g.len());
                }
            }
            walls.push(t0.elapsed().as_secs_f64() * 1e3);
            ops = sim_evals();
        }
        walls.sort_by(|a, b| a.partial_cmp(b).expect("finite wall time"));
        let wall_ms = if walls.len() % 2 == 1 {
            walls[walls.len() / 2]
        } else {
            0.5 * (walls[walls.len() / 2 - 1] + walls[walls.len() / 2])
        };
        records.push(BenchRecord { method, n, ops, wall_ms });
    }

    let ops_pts: Vec<(f64, f64)> =
        records.iter().map(|r| (r.n as f64, r.ops as f64)).collect();
    let wall_pts: Vec<(f64, f64)> =
        records.iter().map(|r| (r.n as f64, r.wall_ms.max(1e-6))).collect();
    Ok(BenchReport {
        ops_slope: fit_loglog_slope(&ops_pts)?,
        wall_slope: fit_loglog_slope(&wall_pts)?,
        records,
    })
}
