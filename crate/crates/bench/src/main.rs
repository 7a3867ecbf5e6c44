use std::process::ExitCode;

use bench::{emit_report, run_trial, Config, Ds, Format};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

/// Stress and validate a lock-free dictionary or the k-CAS array.
#[derive(Parser, Debug)]
#[command(name = "bench-cli", version)]
struct Args {
    #[arg(long, value_enum, default_value = "chromatic")]
    ds: Ds,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 10_000)]
    keyrange: u64,
    /// Percent inserts.
    #[arg(long, default_value_t = 50)]
    insert: u32,
    /// Percent deletes.
    #[arg(long, default_value_t = 50)]
    delete: u32,
    /// Percent successor queries; the rest are lookups.
    #[arg(long, default_value_t = 0)]
    successor: u32,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    /// Per-thread operation budget instead of a time limit.
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Violations tolerated per path by chromatic-k and ravl-k.
    #[arg(long, default_value_t = 4)]
    k_threshold: usize,
    #[arg(long, default_value_t = llxscx::abtree::DEFAULT_A)]
    a: usize,
    #[arg(long, default_value_t = llxscx::abtree::DEFAULT_B)]
    b: usize,
    #[arg(long, default_value_t = 16)]
    kcas_k: usize,
    #[arg(long, default_value_t = 1 << 20)]
    array_size: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, value_enum, default_value = "on")]
    validate: OnOff,
    /// Trials to run; trial i uses seed + i.
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, default_value_t = 30.0)]
    prefill_timeout: f64,
    /// Sample violations against in-flight updates with stop-the-world pauses.
    #[arg(long)]
    sample: bool,
    /// With --sample, run past --seconds until this many samples were taken.
    #[arg(long, default_value_t = 0)]
    min_samples: usize,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let base = Config {
        ds: args.ds,
        threads: args.threads,
        keyrange: args.keyrange,
        insert: args.insert,
        delete: args.delete,
        successor: args.successor,
        seconds: args.seconds,
        ops: args.ops,
        seed: args.seed,
        k_threshold: args.k_threshold,
        a: args.a,
        b: args.b,
        kcas_k: args.kcas_k,
        array_size: args.array_size,
        validate: args.validate == OnOff::On,
        prefill: true,
        prefill_timeout: args.prefill_timeout,
        sample: args.sample,
        min_samples: args.min_samples,
        log_ops: false,
    };
    let mut all_ok = true;
    for i in 0..args.trials {
        let cfg = Config {
            seed: args.seed.wrapping_add(i),
            ..base.clone()
        };
        let rep = match run_trial(&cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        };
        if !rep.checksum_ok {
            eprintln!("trial {i}: checksum mismatch");
        }
        for e in rep.errors.iter().flatten() {
            eprintln!("trial {i}: {e}");
        }
        for f in &rep.sample_failures {
            eprintln!("trial {i}: {f}");
        }
        if args.sample {
            eprintln!("trial {i}: {} samples", rep.samples);
        }
        all_ok &= rep.ok();
        // headers only on the first CSV row
        let row = rep.row(&cfg);
        let out = std::io::stdout().lock();
        let res = match (args.format, i) {
            (Format::Csv, 0) | (Format::Json, _) => emit_report(&[row], args.format, out),
            (Format::Csv, _) => {
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .from_writer(out);
                w.serialize(row)
                    .and_then(|_| w.flush().map_err(Into::into))
                    .map_err(std::io::Error::other)
            }
        };
        if let Err(e) = res {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
