//! Dynamic hypergraph convolution.
//!
//! One layer runs per attention-style head:
//!
//! 1. project the stage features into the head's similarity and value
//!    spaces and zero the padded cells,
//! 2. build the head's multi-scale hypergraph on the similarity features,
//! 3. pool every hyperedge into an edge feature. Cluster edges blend their
//!    members with sigmoid gates `sig(alpha * s_i + beta)` around the
//!    centroid; dilated edges use their rate's learned scalar weight:
//!
//!    ```text
//!    cluster:  h_e = (h_c + sum_i g_i x_i) / (1 + sum_i g_i)
//!    dilated:  h_e = (h_c + w_r sum_i x_i) / (1 + |e| w_r)
//!    ```
//!
//!    Both are weighted means: the coefficients on (h_c, x_1, ..) sum to
//!    one. The dilated denominator can hit zero for unlucky learned w_r,
//!    which is reported as an error rather than folded into a NaN.
//! 4. push edge features back to their members with the same gates,
//!    `z_i = sum_{e in E_i} gate(i,e) h_e`, and
//! 5. update vertices with a residual-style mix followed by a depthwise
//!    3x3 conv, GELU and a linear map: `FC(GELU(DWConv((1+eps) x + z)))`.
//!
//! Head outputs are concatenated and fused by one last linear layer, then
//! the padding is cropped away. Everything runs on tape ops, so the whole
//! layer is differentiable end to end (graph topology and cluster
//! assignment are discrete and deliberately carry no gradient).

use crate::hypergraph::{
    build_multiscale_hypergraph, DilationWeights, EdgeKind, HypergraphConfig,
    MultiScaleHypergraph, PatchField,
};
use crate::tensor::{
    add, add_const, add_row_broadcast, avg_pool_rect, concat_cols, concat_rows,
    depthwise_conv3x3, div_scalar, gather_elems, gather_rows, gelu, matmul, mul, mul_scalar,
    reshape, scatter_add_rows, sigmoid, sum, TensorBase,
};
use crate::{Error, Result, Scalar};
use rand_core::RngCore;

/// Denominators smaller than this are treated as singular.
pub const SINGULAR_EPS: f64 = 1e-8;

/// One head's learnable state.
#[derive(Clone, Debug)]
pub struct HeadParams<T: Scalar = f64> {
    /// Similarity projection, `[d_model, d_head]`, plus bias `[d_head]`.
    pub sim_proj: TensorBase<T>,
    pub sim_bias: TensorBase<T>,
    /// Value projection, same shapes.
    pub val_proj: TensorBase<T>,
    pub val_bias: TensorBase<T>,
    /// Cluster gate scale and shift, each `[1]`.
    pub alpha: TensorBase<T>,
    pub beta: TensorBase<T>,
    /// Per-rate dilated edge weights.
    pub rate_weights: DilationWeights<T>,
    /// Self-mix strength in the vertex update, `[1]`.
    pub epsilon: TensorBase<T>,
    /// Depthwise update conv kernel `[3,3,d_head]`.
    pub update_kernel: TensorBase<T>,
    /// Final per-head linear map `[d_head, d_head]` and bias `[d_head]`.
    pub update_fc: TensorBase<T>,
    pub update_bias: TensorBase<T>,
}

/// A full multi-head layer: per-head state plus the fusion projection that
/// maps the concatenated head outputs back to the model width.
#[derive(Clone, Debug)]
pub struct DhconvParams<T: Scalar = f64> {
    pub heads: Vec<HeadParams<T>>,
    /// `[heads * d_head, d_model]` and `[d_model]`.
    pub fusion_w: TensorBase<T>,
    pub fusion_b: TensorBase<T>,
}

fn uniform_init<T: Scalar, R: RngCore>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> TensorBase<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    TensorBase::rand_uniform(shape, crate::scalar::lit(-bound), crate::scalar::lit(bound), rng)
}

impl<T: Scalar> HeadParams<T> {
    /// Fresh head state: unit gate scale, zero shift, half-strength rate
    /// weights, zero self-mix, uniform fan-in-scaled projections.
    pub fn seeded<R: RngCore>(d_model: usize, d_head: usize, rates: &[usize], rng: &mut R) -> Self {
        Self {
            sim_proj: uniform_init(vec![d_model, d_head], d_model, rng),
            sim_bias: TensorBase::zeros(vec![d_head]),
            val_proj: uniform_init(vec![d_model, d_head], d_model, rng),
            val_bias: TensorBase::zeros(vec![d_head]),
            alpha: TensorBase::full(vec![1], T::one()),
            beta: TensorBase::zeros(vec![1]),
            rate_weights: DilationWeights::constant(rates, crate::scalar::lit(0.5)),
            epsilon: TensorBase::zeros(vec![1]),
            update_kernel: uniform_init(vec![3, 3, d_head], 9, rng),
            update_fc: uniform_init(vec![d_head, d_head], d_head, rng),
            update_bias: TensorBase::zeros(vec![d_head]),
        }
    }

    fn validate(&self, d_model: usize, rates: &[usize]) -> Result<()> {
        let d_head = self.d_head();
        let want: &[(&str, &[usize], &TensorBase<T>)] = &[
            ("sim_proj", &[d_model, d_head], &self.sim_proj),
            ("sim_bias", &[d_head], &self.sim_bias),
            ("val_proj", &[d_model, d_head], &self.val_proj),
            ("val_bias", &[d_head], &self.val_bias),
            ("alpha", &[1], &self.alpha),
            ("beta", &[1], &self.beta),
            ("epsilon", &[1], &self.epsilon),
            ("update_kernel", &[3, 3, d_head], &self.update_kernel),
            ("update_fc", &[d_head, d_head], &self.update_fc),
            ("update_bias", &[d_head], &self.update_bias),
        ];
        for (name, shape, t) in want {
            if t.shape() != *shape {
                return Err(Error::ShapeMismatch {
                    op: "dhconv",
                    expected: format!("{name} {shape:?}"),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        if self.rate_weights.rates != rates {
            return Err(Error::Config(format!(
                "head rates {:?} do not match layer rates {rates:?}",
                self.rate_weights.rates
            )));
        }
        for w in &self.rate_weights.weights {
            if w.shape() != [1] {
                return Err(Error::ShapeMismatch {
                    op: "dhconv",
                    expected: "rate weight [1]".into(),
                    got: format!("{:?}", w.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.sim_proj.shape()[1]
    }
}

impl<T: Scalar> DhconvParams<T> {
    pub fn seeded<R: RngCore>(
        d_model: usize,
        d_head: usize,
        heads: usize,
        rates: &[usize],
        rng: &mut R,
    ) -> Self {
        let heads: Vec<HeadParams<T>> =
            (0..heads).map(|_| HeadParams::seeded(d_model, d_head, rates, rng)).collect();
        Self {
            fusion_w: uniform_init(vec![heads.len() * d_head, d_model], heads.len() * d_head, rng),
            fusion_b: TensorBase::zeros(vec![d_model]),
            heads,
        }
    }

    pub fn validate(&self, d_model: usize, rates: &[usize]) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("need at least one head".into()));
        }
        let d_head = self.heads[0].d_head();
        for h in &self.heads {
            if h.d_head() != d_head {
                return Err(Error::Config("heads disagree on width".into()));
            }
            h.validate(d_model, rates)?;
        }
        let want = [self.heads.len() * d_head, d_model];
        if self.fusion_w.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "dhconv",
                expected: format!("fusion_w {want:?}"),
                got: format!("{:?}", self.fusion_w.shape()),
            });
        }
        if self.fusion_b.shape() != [d_model] {
            return Err(Error::ShapeMismatch {
                op: "dhconv",
                expected: format!("fusion_b [{d_model}]"),
                got: format!("{:?}", self.fusion_b.shape()),
            });
        }
        Ok(())
    }
}

/// Pool a cluster edge. `h_c` is the value-space centroid `[1,d]`,
/// `members` the value features `[m,d]` (m may be zero), `sims` their
/// similarities `[m]`. Returns the edge feature `[1,d]` and the sigmoid
/// gates `[m]`, which double as the push-back coefficients.
pub fn aggregate_cluster<T: Scalar>(
    h_c: &TensorBase<T>,
    members: &TensorBase<T>,
    sims: &TensorBase<T>,
    alpha: &TensorBase<T>,
    beta: &TensorBase<T>,
) -> Result<(TensorBase<T>, TensorBase<T>)> {
    let m = members.shape().first().copied().unwrap_or(0);
    if sims.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "aggregate_cluster",
            expected: format!("sims [{m}]"),
            got: format!("{:?}", sims.shape()),
        });
    }
    let gates = sigmoid(&add_scalar_then_scale(sims, alpha, beta)?)?;
    let weighted = matmul(&reshape(&gates, vec![1, m])?, members)?;
    let numer = add(h_c, &weighted)?;
    let denom = add_const(&sum(&gates)?, T::one())?;
    let h_e = div_scalar(&numer, &denom)?;
    Ok((h_e, gates))
}

/// `alpha * x + beta`, all tape ops so the gate parameters get gradients.
fn add_scalar_then_scale<T: Scalar>(
    x: &TensorBase<T>,
    alpha: &TensorBase<T>,
    beta: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    crate::tensor::add_scalar(&mul_scalar(x, alpha)?, beta)
}

/// Pool a dilated edge: plain mean of center and members under one learned
/// weight. Fails if the denominator `1 + |e| w_r` is within [`SINGULAR_EPS`]
/// of zero.
pub fn aggregate_dilated<T: Scalar>(
    h_c: &TensorBase<T>,
    members: &TensorBase<T>,
    w_r: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    let m = members.shape().first().copied().unwrap_or(0);
    let colsum = matmul(&TensorBase::full(vec![1, m], T::one()), members)?;
    let numer = add(h_c, &mul_scalar(&colsum, w_r)?)?;
    let denom = add_const(&crate::tensor::scale(w_r, crate::scalar::lit(m as f64))?, T::one())?;
    let denom_val = num_traits::ToPrimitive::to_f64(&denom.data()[0]).unwrap_or(0.0);
    if denom_val.abs() < SINGULAR_EPS {
        return Err(Error::SingularWeight { denom: denom_val });
    }
    div_scalar(&numer, &denom)
}

/// Everything one head computed, kept around for tests, visualization and
/// the hyperedge dump: the graph itself, both projected fields, per-edge
/// features and gates, the pushed-back field and the head output. All
/// tensors are cheap Arc handles into the same tape.
#[derive(Clone, Debug)]
pub struct HeadTrace<T: Scalar = f64> {
    pub graph: MultiScaleHypergraph<T>,
    pub x_sim: TensorBase<T>,
    pub x_val: TensorBase<T>,
    /// Edge feature `[1, d_head]` per edge, in edge-id order.
    pub edge_feats: Vec<TensorBase<T>>,
    /// Push-back gates `[m]` per edge: sigmoid gates for cluster edges,
    /// the rate weight replicated for dilated ones.
    pub edge_gates: Vec<TensorBase<T>>,
    pub z: TensorBase<T>,
    pub out: TensorBase<T>,
}

/// Run the full multi-head layer over a stage field `[h, w, d_model]`.
/// Returns the fused output at the same real extent plus one trace per
/// head.
pub fn multi_head_dhconv<T: Scalar>(
    field: &PatchField<T>,
    params: &DhconvParams<T>,
    cfg: &HypergraphConfig,
) -> Result<(TensorBase<T>, Vec<HeadTrace<T>>)> {
    cfg.validate()?;
    let d_model = field.dim();
    params.validate(d_model, &cfg.rates)?;

    let padded = field.padded_to(cfg.window)?;
    let (hp, wp) = (padded.h(), padded.w());
    let n_pad = hp * wp;
    let rows = reshape(padded.features(), vec![n_pad, d_model])?;

    // 0/1 mask over padded vertices, broadcast to head width below
    let d_head = params.heads[0].d_head();
    let mask_flags: Vec<T> = (0..n_pad)
        .map(|v| {
            let (r, c) = (v / wp, v % wp);
            if padded.is_real(r, c) { T::one() } else { T::zero() }
        })
        .collect();
    let mask: Vec<T> = mask_flags.iter().flat_map(|&f| std::iter::repeat_n(f, d_head)).collect();
    let mask = TensorBase::from_vec(vec![n_pad, d_head], mask)?;

    let mut traces = Vec::with_capacity(params.heads.len());
    for (hi, head) in params.heads.iter().enumerate() {
        // projections, with padded rows forced back to zero so the biases
        // cannot smuggle signal into the padding
        let x_sim = mul(&add_row_broadcast(&matmul(&rows, &head.sim_proj)?, &head.sim_bias)?, &mask)?;
        let x_val = mul(&add_row_broadcast(&matmul(&rows, &head.val_proj)?, &head.val_bias)?, &mask)?;

        let sim_field = PatchField::with_real(
            reshape(&x_sim, vec![hp, wp, d_head])?,
            field.real_h(),
            field.real_w(),
            field.stage(),
        )?;
        let graph = build_multiscale_hypergraph(&sim_field, cfg, hi, &head.rate_weights)?;
        let val_grid = reshape(&x_val, vec![hp, wp, d_head])?;

        let mut edge_feats = Vec::with_capacity(graph.edges.len());
        let mut edge_gates = Vec::with_capacity(graph.edges.len());
        let mut push_ids: Vec<usize> = Vec::new();
        let mut push_rows: Vec<TensorBase<T>> = Vec::new();
        for edge in &graph.edges {
            let m = edge.members.len();
            let member_feats = gather_rows(&x_val, &edge.members)?;
            let (h_e, gates) = match edge.kind {
                EdgeKind::Cluster => {
                    let (r0, r1, c0, c1) = edge.rect.expect("cluster edge has a rect");
                    let h_c = avg_pool_rect(&val_grid, r0, r1, c0, c1)?;
                    let s = &graph.sims[edge.window];
                    let window = &graph.windows[edge.window];
                    let cells = window.size * window.size;
                    let flat: Vec<usize> = edge
                        .members
                        .iter()
                        .map(|&v| {
                            let (r, c) = (v / wp, v % wp);
                            edge.param * cells + window.local_index(r, c)
                        })
                        .collect();
                    let sims = gather_elems(s, &flat)?;
                    aggregate_cluster(&h_c, &member_feats, &sims, &head.alpha, &head.beta)?
                }
                EdgeKind::Dilated => {
                    let (cr, cc) = edge.center.expect("dilated edge has a center");
                    let h_c = gather_rows(&x_val, &[cr * wp + cc])?;
                    let w_r = graph
                        .dilation
                        .weight_for(edge.param)
                        .expect("validated rate weight")
                        .clone();
                    let h_e = aggregate_dilated(&h_c, &member_feats, &w_r)?;
                    let gates = mul_scalar(&TensorBase::full(vec![m], T::one()), &w_r)?;
                    (h_e, gates)
                }
            };
            if m > 0 {
                push_ids.extend_from_slice(&edge.members);
                push_rows.push(matmul(&reshape(&gates, vec![m, 1])?, &h_e)?);
            }
            edge_feats.push(h_e);
            edge_gates.push(gates);
        }

        let z = if push_rows.is_empty() {
            TensorBase::zeros(vec![n_pad, d_head])
        } else {
            let stacked = concat_rows(&push_rows.iter().collect::<Vec<_>>())?;
            scatter_add_rows(&TensorBase::zeros(vec![n_pad, d_head]), &push_ids, &stacked)?
        };

        // vertex update: depthwise conv over the (1+eps) x + z grid, GELU,
        // then the per-head linear map
        let self_mix = add_const(&head.epsilon, T::one())?;
        let mixed = add(&mul_scalar(&x_val, &self_mix)?, &z)?;
        let grid = reshape(&mixed, vec![hp, wp, d_head])?;
        let conv = depthwise_conv3x3(&grid, &head.update_kernel)?;
        let act = gelu(&conv)?;
        let flat = reshape(&act, vec![n_pad, d_head])?;
        let out = add_row_broadcast(&matmul(&flat, &head.update_fc)?, &head.update_bias)?;

        traces.push(HeadTrace { graph, x_sim, x_val, edge_feats, edge_gates, z, out });
    }

    let outs: Vec<&TensorBase<T>> = traces.iter().map(|t| &t.out).collect();
    let fused = add_row_broadcast(&matmul(&concat_cols(&outs)?, &params.fusion_w)?, &params.fusion_b)?;

    // crop the padding away and restore the grid shape
    let (rh, rw) = (field.real_h(), field.real_w());
    let real_ids: Vec<usize> = (0..rh).flat_map(|r| (0..rw).map(move |c| r * wp + c)).collect();
    let cropped = gather_rows(&fused, &real_ids)?;
    Ok((reshape(&cropped, vec![rh, rw, d_model])?, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sum, Tape};
    use crate::Tensor;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, r)
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn cluster_pooling_matches_scalar_loop() {
        let mut r = rng(100);
        for trial in 0..50 {
            let m = trial % 8;
            let d = 3 + trial % 4;
            let h_c = rand_t(vec![1, d], &mut r);
            let members = rand_t(vec![m, d], &mut r);
            let sims = rand_t(vec![m], &mut r);
            let alpha = rand_t(vec![1], &mut r);
            let beta = rand_t(vec![1], &mut r);
            let (h_e, gates) = aggregate_cluster(&h_c, &members, &sims, &alpha, &beta).unwrap();

            let (a, b) = (alpha.data()[0], beta.data()[0]);
            let g: Vec<f64> = sims.data().iter().map(|&s| sig(a * s + b)).collect();
            let denom = 1.0 + g.iter().sum::<f64>();
            for j in 0..d {
                let mut num = h_c.data()[j];
                for (i, &gi) in g.iter().enumerate() {
                    num += gi * members.data()[i * d + j];
                }
                let err = (h_e.data()[j] - num / denom).abs();
                assert!(err <= 1e-12, "trial {trial} col {j}: err {err}");
            }
            for (&got, &want) in gates.data().iter().zip(&g) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dilated_pooling_matches_scalar_loop() {
        let mut r = rng(101);
        for trial in 0..50 {
            let m = 1 + trial % 9;
            let d = 2 + trial % 5;
            let h_c = rand_t(vec![1, d], &mut r);
            let members = rand_t(vec![m, d], &mut r);
            let w_r = rand_t(vec![1], &mut r);
            let h_e = aggregate_dilated(&h_c, &members, &w_r).unwrap();

            let w = w_r.data()[0];
            let denom = 1.0 + m as f64 * w;
            for j in 0..d {
                let mut num = h_c.data()[j];
                for i in 0..m {
                    num += w * members.data()[i * d + j];
                }
                let err = (h_e.data()[j] - num / denom).abs();
                assert!(err <= 1e-12, "trial {trial} col {j}: err {err}");
            }
        }
    }

    #[test]
    fn singular_dilated_denominator_is_reported() {
        let h_c = Tensor::full(vec![1, 2], 0.5);
        let members = Tensor::full(vec![4, 2], 1.0);
        let w_r = Tensor::full(vec![1], -0.25);
        match aggregate_dilated(&h_c, &members, &w_r) {
            Err(Error::SingularWeight { denom }) => assert!(denom.abs() < 1e-8),
            other => panic!("expected singular weight error, got {other:?}"),
        }
    }

    #[test]
    fn empty_cluster_edge_keeps_its_centroid() {
        let mut r = rng(102);
        let h_c = rand_t(vec![1, 5], &mut r);
        let members = Tensor::zeros(vec![0, 5]);
        let sims = Tensor::zeros(vec![0]);
        let alpha = Tensor::full(vec![1], 1.3);
        let beta = Tensor::full(vec![1], -0.2);
        let (h_e, gates) = aggregate_cluster(&h_c, &members, &sims, &alpha, &beta).unwrap();
        assert_eq!(gates.numel(), 0);
        assert_eq!(h_e.data(), h_c.data());
    }

    #[test]
    fn constant_members_pool_to_the_constant() {
        // a weighted mean of identical vectors is that vector
        let h_c = Tensor::full(vec![1, 3], 0.7);
        let members = Tensor::full(vec![5, 3], 0.7);
        let sims = Tensor::from_vec(vec![5], vec![0.1, -0.4, 0.9, 0.0, 0.6]).unwrap();
        let alpha = Tensor::full(vec![1], 2.0);
        let beta = Tensor::full(vec![1], 0.1);
        let (h_e, _) = aggregate_cluster(&h_c, &members, &sims, &alpha, &beta).unwrap();
        for &v in h_e.data() {
            assert!((v - 0.7).abs() <= 1e-12);
        }
        let w_r = Tensor::full(vec![1], 0.5);
        let h_d = aggregate_dilated(&h_c, &members, &w_r).unwrap();
        for &v in h_d.data() {
            assert!((v - 0.7).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pooling_coefficients_always_sum_to_one(
            seed in 0u64..1000, m in 1usize..12, alpha in -3.0f64..3.0, beta in -3.0f64..3.0
        ) {
            let mut r = rng(seed);
            let h_c = rand_t(vec![1, 4], &mut r);
            let members = rand_t(vec![m, 4], &mut r);
            let sims = rand_t(vec![m], &mut r);
            let (_, gates) = aggregate_cluster(
                &h_c, &members, &sims,
                &Tensor::full(vec![1], alpha), &Tensor::full(vec![1], beta),
            ).unwrap();
            let total: f64 = gates.data().iter().sum();
            let denom = 1.0 + total;
            // centroid coefficient plus member coefficients
            let coeff_sum = 1.0 / denom + gates.data().iter().map(|g| g / denom).sum::<f64>();
            prop_assert!((coeff_sum - 1.0).abs() <= 1e-12, "sum {coeff_sum}");
        }
    }

    // the dense oracle: the same layer written as plain incidence-matrix
    // arithmetic over f64 slices, no tensor ops involved

    fn oracle_gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    fn oracle_cos(a: &[f64], b: &[f64], eps: f64) -> f64 {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }

    /// One head of the layer over a single unpadded 7x7 window, computed
    /// densely: build the incidence matrix H and gate matrix G explicitly,
    /// then h = (H^T weighted means), z = (G .* H) h, update, linear map.
    fn oracle_head(field: &[f64], dm: usize, head: &HeadParams<f64>, c: usize, rates: &[usize]) -> Vec<f64> {
        let n = 49;
        let dh = head.d_head();
        let proj = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (w, b) = (w.data(), b.data());
            let mut out = vec![0.0; n * dh];
            for i in 0..n {
                for k in 0..dh {
                    let mut acc = b[k];
                    for j in 0..dm {
                        acc += field[i * dm + j] * w[j * dh + k];
                    }
                    out[i * dh + k] = acc;
                }
            }
            out
        };
        let x_sim = proj(&head.sim_proj, &head.sim_bias);
        let x_val = proj(&head.val_proj, &head.val_bias);

        let rects = crate::hypergraph::centroid_rects(7, c).unwrap();
        let pool = |x: &[f64], rect: (usize, usize, usize, usize)| -> Vec<f64> {
            let (r0, r1, c0, c1) = rect;
            let mut acc = vec![0.0; dh];
            for r in r0..r1 {
                for cc in c0..c1 {
                    for k in 0..dh {
                        acc[k] += x[(r * 7 + cc) * dh + k];
                    }
                }
            }
            let cells = ((r1 - r0) * (c1 - c0)) as f64;
            acc.iter().map(|v| v / cells).collect()
        };

        let centroids: Vec<Vec<f64>> = rects.iter().map(|&r| pool(&x_sim, r)).collect();
        let mut s = vec![0.0; c * n];
        for ci in 0..c {
            for i in 0..n {
                s[ci * n + i] = oracle_cos(&centroids[ci], &x_sim[i * dh..(i + 1) * dh], 1e-12);
            }
        }
        let mut assign = vec![0usize; n];
        for i in 0..n {
            for ci in 1..c {
                if s[ci * n + i] > s[assign[i] * n + i] {
                    assign[i] = ci;
                }
            }
        }

        // incidence and gate matrices over all edges, clusters first
        let n_edges = c + rates.len();
        let mut h_mat = vec![false; n * n_edges];
        let mut g_mat = vec![0.0; n * n_edges];
        let (alpha, beta) = (head.alpha.data()[0], head.beta.data()[0]);
        for i in 0..n {
            let e = assign[i];
            h_mat[i * n_edges + e] = true;
            g_mat[i * n_edges + e] = sig(alpha * s[e * n + i] + beta);
        }
        for (ri, &rate) in rates.iter().enumerate() {
            let e = c + ri;
            for dp in -1i64..=1 {
                for dq in -1i64..=1 {
                    let (r, cc) = (3 + dp * rate as i64, 3 + dq * rate as i64);
                    if (0..7).contains(&r) && (0..7).contains(&cc) {
                        let i = (r * 7 + cc) as usize;
                        h_mat[i * n_edges + e] = true;
                        g_mat[i * n_edges + e] = head.rate_weights.weights[ri].data()[0];
                    }
                }
            }
        }

        // edge features as explicit weighted means
        let mut h_e = vec![0.0; n_edges * dh];
        for e in 0..n_edges {
            let h_c: Vec<f64> = if e < c {
                pool(&x_val, rects[e])
            } else {
                x_val[(3 * 7 + 3) * dh..(3 * 7 + 3 + 1) * dh].to_vec()
            };
            let mut num = h_c.clone();
            let mut den = 1.0;
            for i in 0..n {
                if h_mat[i * n_edges + e] {
                    let g = g_mat[i * n_edges + e];
                    den += g;
                    for k in 0..dh {
                        num[k] += g * x_val[i * dh + k];
                    }
                }
            }
            for k in 0..dh {
                h_e[e * dh + k] = num[k] / den;
            }
        }

        // push back, self-mix, depthwise conv, gelu, linear
        let eps_mix = 1.0 + head.epsilon.data()[0];
        let mut y = vec![0.0; n * dh];
        for i in 0..n {
            for k in 0..dh {
                let mut z = 0.0;
                for e in 0..n_edges {
                    if h_mat[i * n_edges + e] {
                        z += g_mat[i * n_edges + e] * h_e[e * dh + k];
                    }
                }
                y[i * dh + k] = eps_mix * x_val[i * dh + k] + z;
            }
        }
        let kd = head.update_kernel.data();
        let mut act = vec![0.0; n * dh];
        for r in 0..7i64 {
            for cc in 0..7i64 {
                for k in 0..dh {
                    let mut acc = 0.0;
                    for p in 0..3i64 {
                        for q in 0..3i64 {
                            let (rr, ccc) = (r + p - 1, cc + q - 1);
                            if (0..7).contains(&rr) && (0..7).contains(&ccc) {
                                acc += y[((rr * 7 + ccc) as usize) * dh + k]
                                    * kd[((p * 3 + q) as usize) * dh + k];
                            }
                        }
                    }
                    act[(r * 7 + cc) as usize * dh + k] = oracle_gelu(acc);
                }
            }
        }
        let (fc, fb) = (head.update_fc.data(), head.update_bias.data());
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            for k in 0..dh {
                let mut acc = fb[k];
                for j in 0..dh {
                    acc += act[i * dh + j] * fc[j * dh + k];
                }
                out[i * dh + k] = acc;
            }
        }
        out
    }

    #[test]
    fn layer_matches_dense_incidence_oracle() {
        let (dm, dh, c, rates) = (4usize, 3usize, 4usize, vec![1usize, 2, 3]);
        let mut r = rng(2024);
        let params = DhconvParams::<f64>::seeded(dm, dh, 2, &rates, &mut r);
        // spread the gate parameters away from their init so the oracle
        // exercises more than alpha=1, beta=0, w=0.5
        let mut params = params;
        params.heads[0].alpha = Tensor::full(vec![1], 1.7);
        params.heads[0].beta = Tensor::full(vec![1], -0.3);
        params.heads[1].epsilon = Tensor::full(vec![1], 0.25);
        params.heads[1].rate_weights.weights[1] = Tensor::full(vec![1], -0.08);

        let field_t = rand_t(vec![7, 7, dm], &mut r);
        let field = PatchField::new(field_t.clone(), 0).unwrap();
        let cfg = HypergraphConfig { window: 7, centroids: c, kernel: 3, rates: rates.clone(), eps: 1e-12 };
        let (out, traces) = multi_head_dhconv(&field, &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[7, 7, dm]);
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].graph.edges.len(), 7);

        let heads: Vec<Vec<f64>> = params
            .heads
            .iter()
            .map(|h| oracle_head(field_t.data(), dm, h, c, &rates))
            .collect();
        let (fw, fb) = (params.fusion_w.data(), params.fusion_b.data());
        let dh2 = dh * 2;
        let mut worst = 0.0f64;
        for i in 0..49 {
            for j in 0..dm {
                let mut acc = fb[j];
                for (hi, h) in heads.iter().enumerate() {
                    for k in 0..dh {
                        acc += h[i * dh + k] * fw[(hi * dh + k) * dm + j];
                    }
                }
                let _ = dh2;
                worst = worst.max((out.data()[i * dm + j] - acc).abs());
            }
        }
        assert!(worst <= 1e-10, "worst dense-oracle error {worst}");
    }

    #[test]
    fn identical_heads_emit_identical_columns() {
        let (dm, dh, rates) = (3usize, 2usize, vec![1usize, 2]);
        let mut r = rng(7);
        let one = HeadParams::<f64>::seeded(dm, dh, &rates, &mut r);
        let params = DhconvParams {
            heads: vec![one.clone(), one],
            fusion_w: rand_t(vec![2 * dh, dm], &mut r),
            fusion_b: Tensor::zeros(vec![dm]),
        };
        let field = PatchField::new(rand_t(vec![7, 7, dm], &mut r), 0).unwrap();
        let cfg = HypergraphConfig { window: 7, centroids: 2, kernel: 3, rates, eps: 1e-12 };
        let (_, traces) = multi_head_dhconv(&field, &params, &cfg).unwrap();
        assert_eq!(traces[0].out.data(), traces[1].out.data());
    }

    #[test]
    fn swapping_head_order_only_permutes_fusion_rows() {
        let (dm, dh, rates) = (4usize, 3usize, vec![1usize, 3]);
        let mut r = rng(31);
        let params = DhconvParams::<f64>::seeded(dm, dh, 2, &rates, &mut r);
        let field = PatchField::new(rand_t(vec![7, 7, dm], &mut r), 0).unwrap();
        let cfg = HypergraphConfig { window: 7, centroids: 4, kernel: 3, rates, eps: 1e-12 };
        let (out_a, _) = multi_head_dhconv(&field, &params, &cfg).unwrap();

        // swap the two heads and the matching fusion row blocks
        let fw = params.fusion_w.data();
        let mut swapped = vec![0.0; fw.len()];
        swapped[..dh * dm].copy_from_slice(&fw[dh * dm..]);
        swapped[dh * dm..].copy_from_slice(&fw[..dh * dm]);
        let permuted = DhconvParams {
            heads: vec![params.heads[1].clone(), params.heads[0].clone()],
            fusion_w: Tensor::from_vec(vec![2 * dh, dm], swapped).unwrap(),
            fusion_b: params.fusion_b.clone(),
        };
        let (out_b, _) = multi_head_dhconv(&field, &permuted, &cfg).unwrap();
        let worst = out_a
            .data()
            .iter()
            .zip(out_b.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "head order changed the output by {worst}");
    }

    #[test]
    fn window_content_swap_translates_the_output_bitwise() {
        let (dm, dh, rates) = (3usize, 2usize, vec![1usize, 2, 3]);
        let mut r = rng(55);
        let mut params = DhconvParams::<f64>::seeded(dm, dh, 1, &rates, &mut r);
        // delta kernel: depthwise conv becomes the identity, so windows
        // cannot talk to each other through the update
        let center_tap = 3 + 1;
        let mut delta = vec![0.0; 9 * dh];
        for k in 0..dh {
            delta[center_tap * dh + k] = 1.0;
        }
        params.heads[0].update_kernel = Tensor::from_vec(vec![3, 3, dh], delta).unwrap();

        let base = rand_t(vec![14, 14, dm], &mut r);
        let mut swapped = base.data().to_vec();
        for r0 in 0..7 {
            for c0 in 0..7 {
                for k in 0..dm {
                    let a = ((r0) * 14 + c0) * dm + k;
                    let b = ((r0 + 7) * 14 + c0 + 7) * dm + k;
                    swapped.swap(a, b);
                }
            }
        }
        let swapped = Tensor::from_vec(vec![14, 14, dm], swapped).unwrap();

        let cfg = HypergraphConfig { window: 7, centroids: 4, kernel: 3, rates, eps: 1e-12 };
        let (out_a, _) =
            multi_head_dhconv(&PatchField::new(base, 0).unwrap(), &params, &cfg).unwrap();
        let (out_b, _) =
            multi_head_dhconv(&PatchField::new(swapped, 0).unwrap(), &params, &cfg).unwrap();

        let (da, db) = (out_a.data(), out_b.data());
        for r0 in 0..14 {
            for c0 in 0..14 {
                // window 0 content moved to window 3 and vice versa
                let (sr, sc) = match (r0 < 7, c0 < 7) {
                    (true, true) => (r0 + 7, c0 + 7),
                    (false, false) => (r0 - 7, c0 - 7),
                    _ => (r0, c0),
                };
                for k in 0..dm {
                    let a = da[(r0 * 14 + c0) * dm + k];
                    let b = db[(sr * 14 + sc) * dm + k];
                    assert_eq!(a.to_bits(), b.to_bits(), "cell ({r0},{c0},{k})");
                }
            }
        }
    }

    #[test]
    fn padded_fields_crop_back_to_their_real_extent() {
        let (dm, dh, rates) = (3usize, 2usize, vec![1usize, 2]);
        let mut r = rng(81);
        let params = DhconvParams::<f64>::seeded(dm, dh, 2, &rates, &mut r);
        let field = PatchField::new(rand_t(vec![10, 12, dm], &mut r), 0).unwrap();
        let cfg = HypergraphConfig { window: 7, centroids: 4, kernel: 3, rates, eps: 1e-12 };
        let (out, traces) = multi_head_dhconv(&field, &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[10, 12, dm]);
        assert!(out.data().iter().all(|v| v.is_finite()));
        // padded to 14x14 -> 4 windows; window 3's center (10,10) falls in
        // the padding, so that window contributes no dilated edges
        assert_eq!(traces[0].graph.windows.len(), 4);
        assert!(!traces[0]
            .graph
            .edges
            .iter()
            .any(|e| e.kind == EdgeKind::Dilated && e.window == 3));
    }

    #[test]
    fn layer_rejects_mismatched_parameters() {
        let (dm, dh, rates) = (3usize, 2usize, vec![1usize, 2]);
        let mut r = rng(90);
        let good = DhconvParams::<f64>::seeded(dm, dh, 2, &rates, &mut r);
        let field = PatchField::new(rand_t(vec![7, 7, dm], &mut r), 0).unwrap();
        let cfg = HypergraphConfig { window: 7, centroids: 2, kernel: 3, rates: rates.clone(), eps: 1e-12 };

        let mut wrong_rates = good.clone();
        wrong_rates.heads[0].rate_weights = DilationWeights::constant(&[1, 3], 0.5);
        assert!(multi_head_dhconv(&field, &wrong_rates, &cfg).is_err());

        let mut wrong_shape = good.clone();
        wrong_shape.heads[1].update_fc = Tensor::zeros(vec![dh, dh + 1]);
        assert!(multi_head_dhconv(&field, &wrong_shape, &cfg).is_err());

        let mut no_heads = good;
        no_heads.heads.clear();
        assert!(multi_head_dhconv(&field, &no_heads, &cfg).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (dm, dh, rates) = (3usize, 2usize, vec![1usize, 2]);
        let mut r = rng(4242);
        let field_plain = rand_t(vec![6, 6, dm], &mut r);
        let params_plain = DhconvParams::<f64>::seeded(dm, dh, 2, &rates, &mut r);
        let cfg = HypergraphConfig { window: 7, centroids: 2, kernel: 3, rates: rates.clone(), eps: 1e-12 };

        // deterministic loss weights, nothing special about the formula
        let loss_of = |out: &Tensor| -> crate::Result<Tensor> {
            let w: Vec<f64> =
                (0..out.numel()).map(|i| (0.37 * i as f64 + 0.11).sin()).collect();
            let w = Tensor::from_vec(out.shape().to_vec(), w)?;
            sum(&mul(out, &w)?)
        };

        // flatten the parameter set so one closure can rebuild the layer
        // with any single tensor swapped out
        let flat = |p: &DhconvParams<f64>| -> Vec<Tensor> {
            let mut v = Vec::new();
            for h in &p.heads {
                v.extend([
                    h.sim_proj.clone(), h.sim_bias.clone(), h.val_proj.clone(),
                    h.val_bias.clone(), h.alpha.clone(), h.beta.clone(),
                ]);
                v.extend(h.rate_weights.weights.iter().cloned());
                v.extend([
                    h.epsilon.clone(), h.update_kernel.clone(), h.update_fc.clone(),
                    h.update_bias.clone(),
                ]);
            }
            v.extend([p.fusion_w.clone(), p.fusion_b.clone()]);
            v
        };
        let rebuild = |parts: &[Tensor]| -> DhconvParams<f64> {
            let per_head = 10 + rates.len();
            let mut heads = Vec::new();
            for h in 0..2 {
                let p = &parts[h * per_head..(h + 1) * per_head];
                heads.push(HeadParams {
                    sim_proj: p[0].clone(), sim_bias: p[1].clone(),
                    val_proj: p[2].clone(), val_bias: p[3].clone(),
                    alpha: p[4].clone(), beta: p[5].clone(),
                    rate_weights: DilationWeights {
                        rates: rates.clone(),
                        weights: p[6..6 + rates.len()].to_vec(),
                    },
                    epsilon: p[6 + rates.len()].clone(),
                    update_kernel: p[7 + rates.len()].clone(),
                    update_fc: p[8 + rates.len()].clone(),
                    update_bias: p[9 + rates.len()].clone(),
                });
            }
            DhconvParams {
                heads,
                fusion_w: parts[parts.len() - 2].clone(),
                fusion_b: parts[parts.len() - 1].clone(),
            }
        };
        let forward = |field_t: &Tensor, parts: &[Tensor]| -> crate::Result<Tensor> {
            let field = PatchField::new(field_t.clone(), 0)?;
            let (out, _) = multi_head_dhconv(&field, &rebuild(parts), &cfg)?;
            loss_of(&out)
        };

        // analytic gradients
        let tape = Tape::new();
        let field_w = tape.watch(&field_plain);
        let parts_plain = flat(&params_plain);
        let parts_w: Vec<Tensor> = parts_plain.iter().map(|t| tape.watch(t)).collect();
        let loss = forward(&field_w, &parts_w).unwrap();
        tape.backward(&loss).unwrap();

        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let mut checked = 0usize;

        // the field, sampled
        let coords: Vec<usize> = (0..field_plain.numel()).step_by(11).collect();
        let numeric = crate::tensor::finite_diff_grad_at(
            |t| forward(t, &parts_plain), &field_plain, &coords, 1e-5,
        )
        .unwrap();
        let analytic = field_w.grad().unwrap();
        for (&i, &n) in coords.iter().zip(&numeric) {
            let a = analytic.data()[i];
            assert!(rel(a, n) < 1e-4, "field[{i}]: analytic {a} vs numeric {n}");
            checked += 1;
        }

        // every parameter tensor, sampled
        for (pi, part) in parts_plain.iter().enumerate() {
            let coords: Vec<usize> = (0..part.numel()).step_by(3).collect();
            let numeric = crate::tensor::finite_diff_grad_at(
                |t| {
                    let mut sub = parts_plain.clone();
                    sub[pi] = t.clone();
                    forward(&field_plain, &sub)
                },
                part,
                &coords,
                1e-5,
            )
            .unwrap();
            let analytic = parts_w[pi].grad().unwrap();
            for (&i, &n) in coords.iter().zip(&numeric) {
                let a = analytic.data()[i];
                assert!(rel(a, n) < 1e-4, "part {pi} coord {i}: analytic {a} vs numeric {n}");
                checked += 1;
            }
        }
        assert!(checked >= 50, "only {checked} coordinates checked");
    }
}
