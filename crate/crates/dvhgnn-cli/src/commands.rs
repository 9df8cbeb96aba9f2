//! Subcommand implementations, kept in the library so integration tests
//! can drive them without spawning the binary.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use dvhgnn_core::backbone::{CapturedHead, Model, ModelConfig};
use dvhgnn_core::hypergraph::{construction_cost, dump_hypergraph, CostMethod, EdgeKind, HypergraphConfig};
use dvhgnn_core::tensor::{finite_diff_grad_at, mul, sum};
use dvhgnn_core::{Error, Result, Tape, Tensor};

use crate::ppm::PpmImage;

/// What a finished subcommand hands back to `main`: the stdout payload,
/// side notes for stderr, and whether the run counts as a success.
pub struct CmdOut {
    pub stdout: String,
    pub notes: Vec<String>,
    pub ok: bool,
}

impl CmdOut {
    fn ok(stdout: String) -> Self {
        Self { stdout, notes: Vec::new(), ok: true }
    }
}

/// Fixed color palette for the hyperedge maps. Cluster maps index it by
/// centroid id, dilated maps by the rate's position in the config, both
/// wrapping when a config outgrows it.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [0, 130, 200],   // blue
    [255, 225, 25],  // yellow
    [145, 30, 180],  // purple
    [70, 240, 240],  // cyan
    [245, 130, 48],  // orange
    [240, 50, 230],  // pink
];

/// Background for cells outside every mapped edge.
const INK_NONE: [u8; 3] = [0, 0, 0];

/// A preset name or a path to a config JSON file.
pub fn resolve_config(source: &str) -> Result<ModelConfig> {
    match ModelConfig::preset(source) {
        Some(cfg) => Ok(cfg),
        None => ModelConfig::from_json(&std::fs::read_to_string(source)?),
    }
}

fn load_image(path: &Path) -> Result<Tensor> {
    PpmImage::read(path)?.fit_to_multiple(32).to_tensor()
}

fn build_model(cfg: ModelConfig, weights: Option<&Path>) -> Result<Model> {
    match weights {
        Some(prefix) => Model::load(cfg, prefix),
        None => Model::init(cfg),
    }
}

// ── forward ────────────────────────────────────────────────────────────────

pub struct ForwardArgs {
    pub config: String,
    pub weights: Option<PathBuf>,
    pub image: PathBuf,
    pub topk: usize,
}

/// Classify one image; stdout carries exactly `topk` `class <id> logit <v>`
/// lines in descending score order, the parameter count goes to the notes.
pub fn cmd_forward(args: &ForwardArgs) -> Result<CmdOut> {
    if args.topk == 0 {
        return Err(Error::Config("--topk must be positive".into()));
    }
    let cfg = resolve_config(&args.config)?;
    let model = build_model(cfg, args.weights.as_deref())?;
    let logits = model.forward(&load_image(&args.image)?)?;
    let scores = logits.data();

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).expect("finite logits").then(i.cmp(&j))
    });
    let mut stdout = String::new();
    for &i in order.iter().take(args.topk.min(scores.len())) {
        stdout.push_str(&format!("class {} logit {}\n", i, scores[i]));
    }
    let mut out = CmdOut::ok(stdout);
    out.notes.push(format!("params {}", model.count_params()));
    Ok(out)
}

// ── hyperedge capture (shared by the two visualization commands) ──────────

pub struct CaptureArgs {
    pub config: String,
    pub image: PathBuf,
    /// 1-based stage, matching the stage1..stage4 parameter names.
    pub stage: usize,
    /// 0-based head, matching the head0.. parameter names.
    pub head: usize,
    pub out: PathBuf,
}

fn capture_head(args: &CaptureArgs) -> Result<(ModelConfig, CapturedHead)> {
    let cfg = resolve_config(&args.config)?;
    if !(1..=4).contains(&args.stage) {
        return Err(Error::Config(format!("--stage {} is out of range 1..=4", args.stage)));
    }
    let s = args.stage - 1;
    if cfg.blocks[s] == 0 {
        return Err(Error::Config(format!("stage {} of {} has no blocks", args.stage, cfg.name)));
    }
    if args.head >= cfg.heads[s] {
        return Err(Error::Config(format!(
            "--head {} is out of range for stage {} ({} heads)",
            args.head, args.stage, cfg.heads[s]
        )));
    }
    let model = Model::init(cfg.clone())?;
    let image = load_image(&args.image)?;
    let (_, cap) = model.forward_captured(&image, Some((s, 0, args.head)))?;
    Ok((cfg, cap.expect("capture requested")))
}

fn capture_summary(args: &CaptureArgs, cap: &CapturedHead) -> String {
    format!(
        "stage {} head {} grid {}x{} windows {} edges {}\n",
        args.stage,
        args.head,
        cap.grid_h,
        cap.grid_w,
        cap.trace.graph.windows.len(),
        cap.trace.graph.edges.len()
    )
}

/// Render the captured head's hypergraph as two PPM overlays: a cluster
/// map (each patch colored by its cluster edge's centroid id) and a
/// dilated map (each patch colored by the smallest dilation rate whose
/// edge contains it, so the nested lattices stay visible).
pub fn cmd_hyperedges(args: &CaptureArgs) -> Result<CmdOut> {
    let (cfg, cap) = capture_head(args)?;
    let g = &cap.trace.graph;
    let rate_slot = |rate: usize| cfg.rates.iter().position(|&r| r == rate).unwrap_or(0);

    let mut cluster = vec![INK_NONE; cap.grid_h * cap.grid_w];
    let mut dilated = vec![INK_NONE; cap.grid_h * cap.grid_w];
    for r in 0..cap.grid_h {
        for c in 0..cap.grid_w {
            let v = r * g.field_w + c;
            let cell = r * cap.grid_w + c;
            let mut best_rate: Option<usize> = None;
            for &e in g.incident(v) {
                let edge = &g.edges[e];
                match edge.kind {
                    EdgeKind::Cluster => {
                        cluster[cell] = PALETTE[edge.param % PALETTE.len()];
                    }
                    EdgeKind::Dilated => {
                        if best_rate.is_none_or(|r0| edge.param < r0) {
                            best_rate = Some(edge.param);
                        }
                    }
                }
            }
            if let Some(rate) = best_rate {
                dilated[cell] = PALETTE[rate_slot(rate) % PALETTE.len()];
            }
        }
    }

    // one patch becomes a square of the stage's pixel stride
    let scale = 4usize << (args.stage - 1);
    let render = |cells: &[[u8; 3]]| -> Result<PpmImage> {
        let (w, h) = (cap.grid_w * scale, cap.grid_h * scale);
        let mut px = vec![0u8; 3 * w * h];
        for (cell, ink) in cells.iter().enumerate() {
            let (r0, c0) = (cell / cap.grid_w * scale, cell % cap.grid_w * scale);
            for r in r0..r0 + scale {
                for c in c0..c0 + scale {
                    px[3 * (r * w + c)..3 * (r * w + c) + 3].copy_from_slice(ink);
                }
            }
        }
        PpmImage::new(w, h, px)
    };

    let mut out = CmdOut::ok(capture_summary(args, &cap));
    for (label, cells) in [("cluster", &cluster), ("dilated", &dilated)] {
        let path = PathBuf::from(format!("{}.{label}.ppm", args.out.display()));
        render(cells)?.write(&path)?;
        out.stdout.push_str(&format!("wrote {}\n", path.display()));
    }
    Ok(out)
}

/// Write the captured head's hypergraph in the parseable text form: one
/// `kind window param members...` line per edge, vertex ids row-major over
/// the window-padded grid.
pub fn cmd_dump_hypergraph(args: &CaptureArgs) -> Result<CmdOut> {
    let (_, cap) = capture_head(args)?;
    std::fs::write(&args.out, dump_hypergraph(&cap.trace.graph))?;
    let mut out = CmdOut::ok(capture_summary(args, &cap));
    out.stdout.push_str(&format!("wrote {}\n", args.out.display()));
    Ok(out)
}

// ── gradcheck ──────────────────────────────────────────────────────────────

pub struct GradcheckArgs {
    pub config: String,
    pub seed: u64,
    pub samples: usize,
    /// Test hook: scale the named op's backward rule by 1.5 so the check
    /// demonstrably fails, naming the parameters it poisons.
    pub corrupt_backward: Option<String>,
}

/// Tolerance separating float noise from a wrong derivative.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Compare the tape's gradients against central finite differences on
/// randomly sampled parameter coordinates, spread round-robin over every
/// parameter tensor.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<CmdOut> {
    if args.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let mut cfg = resolve_config(&args.config)?;
    cfg.seed = args.seed;
    let model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(0x5eed));
    let image = Tensor::rand_uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);

    let loss_of = |logits: &Tensor| -> Result<Tensor> {
        let k = logits.shape()[0];
        let w: Vec<f64> = (0..k).map(|i| (0.31 * i as f64 + 0.7).cos()).collect();
        sum(&mul(logits, &Tensor::from_vec(vec![k], w)?)?)
    };

    let tape = Tape::new();
    if let Some(op) = &args.corrupt_backward {
        tape.corrupt_backward(Some(op));
    }
    let watched = model.watched(&tape)?;
    let loss = loss_of(&watched.forward(&image)?)?;
    tape.backward(&loss)?;

    let names: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
    let mut coords: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    let mut slot = 0;
    for _ in 0..args.samples {
        let numel = model.store().expect(&names[slot])?.data().len();
        coords[slot].push(rng.next_u64() as usize % numel);
        slot = (slot + 1) % names.len();
    }

    let mut stdout = String::new();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failed_groups = 0usize;
    for (name, picks) in names.iter().zip(&coords) {
        if picks.is_empty() {
            continue;
        }
        let base = model.store().expect(name)?;
        let analytic = watched
            .store()
            .expect(name)?
            .grad()
            .ok_or_else(|| Error::Config(format!("{name} never reached the tape")))?;
        let fd = finite_diff_grad_at(
            |t| loss_of(&model.with_param(name, t.clone())?.forward(&image)?),
            &base,
            picks,
            1e-5,
        )?;
        let mut group_max = 0.0f64;
        let mut group_sum = 0.0f64;
        for (&i, &n) in picks.iter().zip(&fd) {
            let a = analytic.data()[i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            group_max = group_max.max(rel);
            group_sum += rel;
        }
        let verdict = if group_max < GRADCHECK_TOL { "ok" } else { "FAIL" };
        stdout.push_str(&format!(
            "group {name} coords {} max {group_max:.3e} mean {:.3e} {verdict}\n",
            picks.len(),
            group_sum / picks.len() as f64
        ));
        worst = worst.max(group_max);
        checked += picks.len();
        failed_groups += (verdict == "FAIL") as usize;
    }
    let pass = worst < GRADCHECK_TOL;
    stdout.push_str(&format!("checked {checked} coordinates, max relative error {worst:.3e}\n"));
    stdout.push_str(if pass { "PASS\n" } else { "FAIL\n" });
    let mut out = CmdOut::ok(stdout);
    out.ok = pass;
    if !pass {
        out.notes.push(format!("{failed_groups} parameter groups exceed {GRADCHECK_TOL:e}"));
    }
    Ok(out)
}

// ── bench ──────────────────────────────────────────────────────────────────

pub struct BenchArgs {
    pub method: String,
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub repeats: usize,
}

/// Sweep graph construction over vertex counts; stdout is a CSV table
/// (`method,N,ops,ms`) followed by the fitted log-log slopes as comment
/// lines. The ops column counts similarity evaluations and is exact and
/// machine-independent; the ms column is a median wall time.
pub fn cmd_bench(args: &BenchArgs) -> Result<CmdOut> {
    let method = CostMethod::parse(&args.method)?;
    if args.sizes.len() < 4 {
        return Err(Error::Config(format!(
            "need at least 4 sizes for a slope fit, got {}",
            args.sizes.len()
        )));
    }
    let hcfg = HypergraphConfig {
        window: 7,
        centroids: 4,
        kernel: 3,
        rates: vec![1, 2, 3],
        eps: 1e-12,
    };
    let report = construction_cost(method, &args.sizes, args.dim, args.repeats, 0, &hcfg)?;
    let mut stdout = String::from("method,N,ops,ms\n");
    for r in &report.records {
        stdout.push_str(&format!("{},{},{},{:.3}\n", r.method.as_str(), r.n, r.ops, r.wall_ms));
    }
    stdout.push_str(&format!("# ops_slope {:.4}\n", report.ops_slope));
    stdout.push_str(&format!("# wall_slope {:.4}\n", report.wall_slope));
    Ok(CmdOut::ok(stdout))
}
