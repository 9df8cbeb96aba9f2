use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use dvhgnn_cli::commands::{
    cmd_bench, cmd_dump_hypergraph, cmd_forward, cmd_gradcheck, cmd_hyperedges, BenchArgs,
    CaptureArgs, CmdOut, ForwardArgs, GradcheckArgs,
};
use dvhgnn_cli::RunManifest;

/// Hypergraph image classifier tools. `DVHGNN_THREADS` caps kernel
/// parallelism (0 = sequential); results are identical either way.
#[derive(Parser)]
#[command(name = "dvhgnn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify a P6 PPM image and print the top scoring classes
    Forward {
        /// Preset name (tiny|small|medium|base|toy) or path to a config JSON
        #[arg(long, default_value = "tiny")]
        config: String,
        /// Weight file prefix from a previous save; omitted = seeded random init
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// How many classes to print
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Render one head's cluster and dilated hyperedge maps as PPM overlays
    Hyperedges {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long)]
        image: PathBuf,
        /// Stage to inspect, 1..=4 (block 0 of that stage)
        #[arg(long)]
        stage: usize,
        /// Head to inspect, zero-based
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Output prefix; writes <out>.cluster.ppm and <out>.dilated.ppm
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients against central finite differences
    Gradcheck {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameter coordinates to sample across all tensors
        #[arg(long, default_value_t = 96)]
        samples: usize,
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Benchmark hypergraph construction cost over a vertex-count sweep
    Bench {
        /// cluster_dhgc or knn
        #[arg(long)]
        method: String,
        /// Comma-separated vertex counts, each a perfect square, at least 4
        #[arg(long, value_delimiter = ',', default_value = "196,784,3136,12544")]
        sizes: Vec<usize>,
        /// Feature width of the synthetic vertices
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Timed repeats per size (median reported)
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write one head's hypergraph as a parseable text dump
    DumpHypergraph {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long)]
        image: PathBuf,
        /// Stage to inspect, 1..=4 (block 0 of that stage)
        #[arg(long)]
        stage: usize,
        /// Head to inspect, zero-based
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Output file for the text dump
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> (dvhgnn_core::Result<CmdOut>, RunManifest) {
    let path_str = |p: &PathBuf| p.display().to_string();
    match cmd {
        Cmd::Forward { config, weights, image, topk } => {
            let manifest = RunManifest {
                subcommand: "forward",
                config: Some(config.clone()),
                seed: None,
                input: Some(path_str(&image)),
                output: None,
                wall_ms: 0.0,
            };
            (cmd_forward(&ForwardArgs { config, weights, image, topk }), manifest)
        }
        Cmd::Hyperedges { config, image, stage, head, out } => {
            let manifest = RunManifest {
                subcommand: "hyperedges",
                config: Some(config.clone()),
                seed: None,
                input: Some(path_str(&image)),
                output: Some(path_str(&out)),
                wall_ms: 0.0,
            };
            (cmd_hyperedges(&CaptureArgs { config, image, stage, head, out }), manifest)
        }
        Cmd::Gradcheck { config, seed, samples, corrupt_backward } => {
            let manifest = RunManifest {
                subcommand: "gradcheck",
                config: Some(config.clone()),
                seed: Some(seed),
                input: None,
                output: None,
                wall_ms: 0.0,
            };
            (cmd_gradcheck(&GradcheckArgs { config, seed, samples, corrupt_backward }), manifest)
        }
        Cmd::Bench { method, sizes, dim, repeats } => {
            let manifest = RunManifest {
                subcommand: "bench",
                config: None,
                seed: Some(0),
                input: None,
                output: None,
                wall_ms: 0.0,
            };
            (cmd_bench(&BenchArgs { method, sizes, dim, repeats }), manifest)
        }
        Cmd::DumpHypergraph { config, image, stage, head, out } => {
            let manifest = RunManifest {
                subcommand: "dump-hypergraph",
                config: Some(config.clone()),
                seed: None,
                input: Some(path_str(&image)),
                output: Some(path_str(&out)),
                wall_ms: 0.0,
            };
            (cmd_dump_hypergraph(&CaptureArgs { config, image, stage, head, out }), manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let t0 = Instant::now();
    let (result, mut manifest) = run(cli.cmd);
    manifest.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(out) => {
            for note in &out.notes {
                eprintln!("{note}");
            }
            print!("{}", out.stdout);
            eprintln!("{}", manifest.to_json());
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
