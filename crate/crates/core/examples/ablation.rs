//! Compares the continual-learning methods on an overlapping synthetic stream
//! with a trainable MLP head, averaged over several seeds.
//!
//! cargo run --release --example ablation -- --sep 2.5 --seeds 0,1,2

use clap::Parser;
use slca::dataio::{gen_synthetic, make_split, SyntheticConfig};
use slca::model::HeadConfig;
use slca::optimizer::OptimizerConfig;
use slca::protocol::{seed_sweep, Method, RunConfig, TaskStream};

#[derive(Parser)]
struct Opts {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2.5)]
    sep: f64,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    uniform_lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    out_dim: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "seq_ft_uniform,sl,sl_ca,sl_ca_ln,joint"
    )]
    methods: Vec<Method>,
}

fn main() -> slca::Result<()> {
    let o = Opts::parse();
    let data = gen_synthetic(&SyntheticConfig {
        num_classes: o.classes,
        dim: o.dim,
        train_per_class: o.train_per_class,
        test_per_class: o.test_per_class,
        separation: o.sep,
        seed: o.data_seed,
    })?;
    let split = make_split(&data.benchmark_classes(), o.tasks, o.data_seed)?;
    let stream = TaskStream::from_dataset(&data, &split)?;
    for method in o.methods {
        let config = RunConfig {
            method,
            head: HeadConfig::Mlp {
                hidden: o.hidden,
                out_dim: o.out_dim,
                layers: 2,
            },
            optimizer: OptimizerConfig {
                epochs_per_task: o.epochs,
                ..OptimizerConfig::default()
            },
            uniform_lr: o.uniform_lr,
            ..RunConfig::default()
        };
        let start = std::time::Instant::now();
        let sweep = seed_sweep(&stream, &config, &o.seeds)?;
        println!(
            "{:<16} last {:.4} ± {:.4}  inc {:.4}  per-seed {:?}  ({:.1}s)",
            method.name(),
            sweep.last_acc_mean,
            sweep.last_acc_std,
            sweep.inc_acc_mean,
            sweep
                .last_acc
                .iter()
                .map(|a| (a * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
