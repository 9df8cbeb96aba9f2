//! Exact cosine KNN over flat features, the quadratic comparator the
//! construction benchmark runs against.

use crate::runtime::add_sim_evals;
use crate::tensor::TensorBase;
use crate::{Error, Result, Scalar};

/// For each vertex, the ids of its `k` nearest neighbours by cosine
/// similarity (self excluded), sorted by descending similarity with ties to
/// the lower id. Every ordered pair is scored once, so the similarity
/// counter advances by exactly n*(n-1).
pub fn knn_graph_baseline<T: Scalar>(
    feats: &TensorBase<T>,
    k: usize,
    eps: T,
) -> Result<Vec<Vec<usize>>> {
    let (n, d) = match feats.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::ShapeMismatch {
                op: "knn_graph_baseline",
                expected: "[n, d]".into(),
                got: format!("{other:?}"),
            })
        }
    };
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k {k} must be in 1..{n}")));
    }
    let data = feats.data();
    let norms: Vec<T> = (0..n)
        .map(|i| {
            let row = &data[i * d..(i + 1) * d];
            row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps)
        })
        .collect();

    let mut graph = Vec::with_capacity(n);
    for i in 0..n {
        let a = &data[i * d..(i + 1) * d];
        let mut scored: Vec<(T, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let b = &data[j * d..(j + 1) * d];
            let mut dot = T::zero();
            for l in 0..d {
                dot += a[l] * b[l];
            }
            let sim = (dot / (norms[i] * norms[j])).min(T::one()).max(-T::one());
            add_sim_evals(1);
            scored.push((sim, j));
        }
        let by_rank = |x: &(T, usize), y: &(T, usize)| {
            y.0.partial_cmp(&x.0).expect("finite similarity").then(x.1.cmp(&y.1))
        };
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
        scored.sort_unstable_by(by_rank);
        graph.push(scored.into_iter().map(|(_, j)| j).collect());
    }
    Ok(graph)
}
