//! Model assembly and the forward pass.

use std::path::Path;

use super::params::{init_params, ParamStore};
use super::ModelConfig;
use crate::dhconv::{multi_head_dhconv, DhconvParams, HeadParams, HeadTrace};
use crate::hypergraph::{DilationWeights, HypergraphConfig, PatchField};
use crate::scalar::lit;
use crate::tensor::{
    add, add_row_broadcast, conv2d, depthwise_conv3x3, gelu, layer_norm, matmul, mean_rows,
    reshape, Tape, TensorBase,
};
use crate::{Error, Result, Scalar};

/// LayerNorm variance floor.
const LN_EPS: f64 = 1e-5;

struct Stem<T: Scalar> {
    w1: TensorBase<T>,
    b1: TensorBase<T>,
    w2: TensorBase<T>,
    b2: TensorBase<T>,
}

struct BlockParams<T: Scalar> {
    ln1_gamma: TensorBase<T>,
    ln1_delta: TensorBase<T>,
    attn: DhconvParams<T>,
    ln2_gamma: TensorBase<T>,
    ln2_delta: TensorBase<T>,
    fc1_w: TensorBase<T>,
    fc1_b: TensorBase<T>,
    dw_w: TensorBase<T>,
    fc2_w: TensorBase<T>,
    fc2_b: TensorBase<T>,
}

struct StageParams<T: Scalar> {
    blocks: Vec<BlockParams<T>>,
    down: Option<(TensorBase<T>, TensorBase<T>)>,
}

/// One head's hypergraph and intermediates, lifted out of a forward pass
/// on request (for dumps, visualization and tests).
pub struct CapturedHead<T: Scalar = f64> {
    pub trace: HeadTrace<T>,
    /// Stage grid before window padding.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Which (stage, block, head) this came from, zero-based.
    pub stage: usize,
    pub block: usize,
    pub head: usize,
}

/// The assembled classifier: config, the name-ordered store, and typed
/// views into it. The views share buffers with the store (cheap handles),
/// so a model is rebuilt rather than mutated when a parameter changes.
pub struct Model<T: Scalar = f64> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    stem: Stem<T>,
    stages: Vec<StageParams<T>>,
    classifier_w: TensorBase<T>,
    classifier_b: TensorBase<T>,
}

impl<T: Scalar> Model<T> {
    /// Assemble a model over an existing store, checking it matches the
    /// config exactly.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        store.validate_against(&cfg)?;
        let g = |name: &str| store.expect(name);

        let stem = Stem {
            w1: g("stem.conv1.w")?,
            b1: g("stem.conv1.b")?,
            w2: g("stem.conv2.w")?,
            b2: g("stem.conv2.b")?,
        };
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for b in 0..cfg.blocks[s] {
                let p = format!("stage{}.block{}", s + 1, b);
                let mut heads = Vec::with_capacity(cfg.heads[s]);
                for h in 0..cfg.heads[s] {
                    let q = format!("{p}.attn.head{h}");
                    let weights = cfg
                        .rates
                        .iter()
                        .map(|r| g(&format!("{q}.rate{r}.w")))
                        .collect::<Result<Vec<_>>>()?;
                    heads.push(HeadParams {
                        sim_proj: g(&format!("{q}.sim_proj"))?,
                        sim_bias: g(&format!("{q}.sim_bias"))?,
                        val_proj: g(&format!("{q}.val_proj"))?,
                        val_bias: g(&format!("{q}.val_bias"))?,
                        alpha: g(&format!("{q}.alpha"))?,
                        beta: g(&format!("{q}.beta"))?,
                        rate_weights: DilationWeights { rates: cfg.rates.clone(), weights },
                        epsilon: g(&format!("{q}.epsilon"))?,
                        update_kernel: g(&format!("{q}.update_kernel"))?,
                        update_fc: g(&format!("{q}.update_fc"))?,
                        update_bias: g(&format!("{q}.update_bias"))?,
                    });
                }
                blocks.push(BlockParams {
                    ln1_gamma: g(&format!("{p}.ln1.gamma"))?,
                    ln1_delta: g(&format!("{p}.ln1.delta"))?,
                    attn: DhconvParams {
                        heads,
                        fusion_w: g(&format!("{p}.attn.fusion.w"))?,
                        fusion_b: g(&format!("{p}.attn.fusion.b"))?,
                    },
                    ln2_gamma: g(&format!("{p}.ln2.gamma"))?,
                    ln2_delta: g(&format!("{p}.ln2.delta"))?,
                    fc1_w: g(&format!("{p}.ffn.fc1.w"))?,
                    fc1_b: g(&format!("{p}.ffn.fc1.b"))?,
                    dw_w: g(&format!("{p}.ffn.dw.w"))?,
                    fc2_w: g(&format!("{p}.ffn.fc2.w"))?,
                    fc2_b: g(&format!("{p}.ffn.fc2.b"))?,
                });
            }
            let down = if s < 3 {
                Some((g(&format!("down{}.w", s + 1))?, g(&format!("down{}.b", s + 1))?))
            } else {
                None
            };
            stages.push(StageParams { blocks, down });
        }
        let classifier_w = g("classifier.w")?;
        let classifier_b = g("classifier.b")?;
        Ok(Self { cfg, store, stem, stages, classifier_w, classifier_b })
    }

    /// Fresh model with seed-reproducible parameters.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        let store = init_params(&cfg)?;
        Self::from_store(cfg, store)
    }

    pub fn load(cfg: ModelConfig, prefix: &Path) -> Result<Self> {
        let store = ParamStore::load(prefix)?;
        Self::from_store(cfg, store)
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        self.store.save(prefix)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.param_count()
    }

    /// The same model with every parameter watched on `tape`.
    pub fn watched(&self, tape: &Tape<T>) -> Result<Self> {
        Self::from_store(self.cfg.clone(), self.store.watched(tape))
    }

    /// A copy with one parameter swapped out, for perturbation studies.
    pub fn with_param(&self, name: &str, value: TensorBase<T>) -> Result<Self> {
        let mut store = self.store.clone();
        store.replace(name, value)?;
        Self::from_store(self.cfg.clone(), store)
    }

    /// Classify an `[h,w,3]` image into `[classes]` logits.
    pub fn forward(&self, image: &TensorBase<T>) -> Result<TensorBase<T>> {
        Ok(self.forward_captured(image, None)?.0)
    }

    /// Forward pass that can additionally lift one head's hypergraph state
    /// out of a chosen `(stage, block, head)`, all zero-based.
    pub fn forward_captured(
        &self,
        image: &TensorBase<T>,
        capture: Option<(usize, usize, usize)>,
    ) -> Result<(TensorBase<T>, Option<CapturedHead<T>>)> {
        match image.shape() {
            [h, w, 3] if *h >= 8 && *w >= 8 => {}
            other => {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    expected: "[h>=8, w>=8, 3] image".into(),
                    got: format!("{other:?}"),
                })
            }
        }
        if let Some((s, b, h)) = capture {
            if s >= 4 || b >= self.cfg.blocks[s] || h >= self.cfg.heads[s] {
                return Err(Error::Config(format!(
                    "capture ({s},{b},{h}) is out of range for {}",
                    self.cfg.name
                )));
            }
        }
        let hcfg = self.cfg.hypergraph();

        let mut x = bias3(&conv2d(image, &self.stem.w1, 2, 1)?, &self.stem.b1)?;
        x = gelu(&x)?;
        x = bias3(&conv2d(&x, &self.stem.w2, 2, 1)?, &self.stem.b2)?;

        let mut captured = None;
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                let want_head = match capture {
                    Some((cs, cb, ch)) if cs == s && cb == b => Some(ch),
                    _ => None,
                };
                let (next, grabbed) = block_forward(&x, block, &hcfg, s, want_head)?;
                if let Some(trace) = grabbed {
                    captured = Some(CapturedHead {
                        trace,
                        grid_h: x.shape()[0],
                        grid_w: x.shape()[1],
                        stage: s,
                        block: b,
                        head: capture.expect("capture set").2,
                    });
                }
                x = next;
            }
            if let Some((w, bias)) = &stage.down {
                x = bias3(&conv2d(&x, w, 2, 1)?, bias)?;
            }
        }

        let (gh, gw, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pooled = mean_rows(&reshape(&x, vec![gh * gw, d])?)?;
        let logits =
            add_row_broadcast(&matmul(&pooled, &self.classifier_w)?, &self.classifier_b)?;
        Ok((reshape(&logits, vec![self.cfg.classes])?, captured))
    }
}

/// Add a `[c]` bias to an `[h,w,c]` map.
fn bias3<T: Scalar>(x: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = reshape(x, vec![h * w, c])?;
    reshape(&add_row_broadcast(&rows, b)?, vec![h, w, c])
}

/// One residual block: pre-norm hypergraph convolution, then a pre-norm
/// convolutional FFN (expand, depthwise 3x3, GELU, contract).
fn block_forward<T: Scalar>(
    x: &TensorBase<T>,
    block: &BlockParams<T>,
    hcfg: &HypergraphConfig,
    stage: usize,
    want_head: Option<usize>,
) -> Result<(TensorBase<T>, Option<HeadTrace<T>>)> {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = h * w;
    let eps = lit::<T>(LN_EPS);
    let rows = reshape(x, vec![n, d])?;

    let n1 = layer_norm(&rows, &block.ln1_gamma, &block.ln1_delta, eps)?;
    let field = PatchField::new(reshape(&n1, vec![h, w, d])?, stage)?;
    let (attn, mut traces) = multi_head_dhconv(&field, &block.attn, hcfg)?;
    let y = add(&rows, &reshape(&attn, vec![n, d])?)?;
    let grabbed = want_head.map(|hi| traces.swap_remove(hi));
    drop(traces);

    let n2 = layer_norm(&y, &block.ln2_gamma, &block.ln2_delta, eps)?;
    let expanded = add_row_broadcast(&matmul(&n2, &block.fc1_w)?, &block.fc1_b)?;
    let e = expanded.shape()[1];
    let grid = reshape(&expanded, vec![h, w, e])?;
    let act = gelu(&depthwise_conv3x3(&grid, &block.dw_w)?)?;
    let contracted =
        add_row_broadcast(&matmul(&reshape(&act, vec![n, e])?, &block.fc2_w)?, &block.fc2_b)?;
    let out = add(&y, &contracted)?;
    Ok((reshape(&out, vec![h, w, d])?, grabbed))
}

/// Grid sizes of the four stages for an input extent: two stride-2 convs
/// into stage 1, then one per transition.
pub fn stage_grid_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    let step = |n: usize| (n + 2 - 3) / 2 + 1;
    let (mut gh, mut gw) = (step(step(h)), step(step(w)));
    let mut out = [(0, 0); 4];
    for slot in &mut out {
        *slot = (gh, gw);
        gh = step(gh);
        gw = step(gw);
    }
    out
}

/// Multiply-accumulate count for one forward pass at the given input
/// extent. Counts the linear algebra (convs, projections, pooling, gates,
/// fusion, FFN, classifier); transcendental activations are not MACs and
/// are left out.
pub fn mult_adds(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("input {h}x{w} is too small")));
    }
    let step = |n: usize| (n + 2 - 3) / 2 + 1;
    let mut macs: u128 = 0;
    let c1 = cfg.channels[0];

    let (mut gh, mut gw) = (step(h), step(w));
    macs += (gh * gw * 9 * 3 * (c1 / 2)) as u128;
    (gh, gw) = (step(gh), step(gw));
    macs += (gh * gw * 9 * (c1 / 2) * c1) as u128;

    let wsz = cfg.window;
    for s in 0..4 {
        let d = cfg.channels[s];
        let dh = cfg.d_head;
        let n = gh * gw;
        let np = gh.div_ceil(wsz) * wsz * gw.div_ceil(wsz) * wsz;
        let windows = np / (wsz * wsz);
        // members: every real vertex joins one cluster edge; each dilated
        // edge holds at most kernel^2 vertices
        let members = n + windows * cfg.rates.len() * cfg.kernel * cfg.kernel;
        let e = d * cfg.ffn_ratio;
        let per_head = 2 * np * d * dh            // sim/value projections
            + np * dh                             // centroid pooling
            + (cfg.centroids * np + cfg.centroids * windows + np) * dh // cosine dots and norms
            + 2 * members                         // gate evaluations
            + 2 * members * dh                    // edge pooling and push-back
            + np * dh                             // self mix
            + np * 9 * dh                         // depthwise update conv
            + np * dh * dh;                       // per-head linear
        let per_block = 2 * n * d                 // layer norm scales
            + cfg.heads[s] * per_head
            + np * (cfg.heads[s] * dh) * d        // fusion
            + n * d * e + n * 9 * e + n * e * d;  // conv FFN
        macs += (cfg.blocks[s] * per_block) as u128;
        if s < 3 {
            (gh, gw) = (step(gh), step(gw));
            macs += (gh * gw * 9 * d * cfg.channels[s + 1]) as u128;
        }
    }
    macs += (cfg.channels[3] * cfg.classes) as u128;
    u64::try_from(macs).map_err(|_| Error::Config("mult-add count overflows u64".into()))
}
