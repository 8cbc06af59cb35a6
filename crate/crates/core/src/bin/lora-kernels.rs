use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lora_kernels::exact::grad_adapters_special;
use lora_kernels::harness::{
    bench_scaling, gen_instance, gen_reduction, read_instance, reduce_check, sweep_gamma,
    write_instance, BenchConfig,
};
use lora_kernels::lowrank::{approx_grad_special, select_degree};
use lora_kernels::oracle::{dense_kron_grad_oracle, fd_grad_pair, pair_rel_err, FD_STEP};
use lora_kernels::{Error, FactorBackend, GradientPair, PolyApproxConfig};

#[derive(Parser)]
#[command(
    name = "lora-kernels",
    version,
    about = "Exact and low-rank LoRA attention gradients"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Poly,
    Svd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded instance bundle.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long = "L")]
        l: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact adapter gradients, written as G_A.mat and G_B.mat.
    Grad {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory; defaults to the input bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximate adapter gradients, written as G_A_approx.mat and
    /// G_B_approx.mat.
    Approx {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Backend::Poly)]
        backend: Backend,
        /// Norm bound; defaults to the bundle's gamma.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Rank of the SVD backend; defaults to L.
        #[arg(long)]
        rank: Option<usize>,
        /// Polynomial degree; defaults to the degree the accuracy target
        /// requires.
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare closed-form, Jacobian-route and finite-difference gradients.
    Check {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Op-count and wall-time scaling of both paths as CSV.
    Bench {
        #[arg(long)]
        seed: u64,
        #[arg(long = "L", value_delimiter = ',', default_value = "512,1024,2048")]
        l: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error and required rank across norm bounds as CSV.
    Sweep {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
        gammas: Vec<f64>,
        #[arg(long = "L", default_value_t = 64)]
        l: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed an attention loss-gradient instance and verify it.
    ReduceCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "L", default_value_t = 8)]
        l: usize,
        #[arg(long, default_value_t = 2)]
        r_red: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        bound: f64,
    },
}

/// Outcome of a command that ran to completion.
enum Verdict {
    Ok,
    Failed,
}

fn write_pair(dir: &Path, pair: &GradientPair, suffix: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    pair.g_a.write_to(dir.join(format!("G_A{suffix}.mat")))?;
    pair.g_b.write_to(dir.join(format!("G_B{suffix}.mat")))?;
    Ok(())
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<Verdict, Error> {
    match cmd {
        Cmd::Gen {
            seed,
            l,
            d,
            r,
            gamma,
            out,
        } => {
            write_instance(&out, &gen_instance(seed, l, d, r, gamma)?)?;
            println!("wrote {}", out.display());
        }
        Cmd::Grad { input, out } => {
            let gi = read_instance(&input)?;
            let g = grad_adapters_special(&gi.inst, &gi.wstar, &gi.adapter)?;
            write_pair(out.as_deref().unwrap_or(&input), &g, "")?;
        }
        Cmd::Approx {
            input,
            backend,
            gamma,
            eps,
            rank,
            degree,
            out,
        } => {
            let gi = read_instance(&input)?;
            let backend = match backend {
                Backend::Svd => FactorBackend::Svd {
                    rank: rank.unwrap_or(gi.inst.seq_len()),
                },
                Backend::Poly => {
                    let cfg = PolyApproxConfig::new(gamma.unwrap_or(gi.meta.gamma), 0, eps)?;
                    let g = match degree {
                        Some(g) => g,
                        None => select_degree(&cfg, gi.inst.head_dim(), gi.inst.seq_len())?,
                    };
                    FactorBackend::Poly(cfg.with_degree(g))
                }
            };
            let g = approx_grad_special(&gi.inst, &gi.wstar, &gi.adapter, &backend)?;
            write_pair(out.as_deref().unwrap_or(&input), &g, "_approx")?;
        }
        Cmd::Check { input } => {
            let gi = read_instance(&input)?;
            let closed = grad_adapters_special(&gi.inst, &gi.wstar, &gi.adapter)?;
            let fd = fd_grad_pair(&gi.inst, &gi.wstar, &gi.adapter, FD_STEP)?;
            let fd_err = pair_rel_err(&closed, &fd)?;
            let mut ok = fd_err <= 1e-5;
            println!("closed-form vs finite differences: max rel err {fd_err:.3e}");
            match dense_kron_grad_oracle(&gi.inst, &gi.wstar, &gi.adapter) {
                Ok(kron) => {
                    let err = closed.max_abs_diff(&kron)?;
                    ok &= err <= 1e-10;
                    println!("closed-form vs Jacobian route: max abs err {err:.3e}");
                }
                Err(Error::Guard { .. }) => println!("Jacobian route: skipped (size guard)"),
                Err(e) => return Err(e),
            }
            println!(
                "{}",
                if ok {
                    "agreement: ok"
                } else {
                    "agreement: FAILED"
                }
            );
            if !ok {
                return Ok(Verdict::Failed);
            }
        }
        Cmd::Bench {
            seed,
            l,
            d,
            r,
            gamma,
            degree,
            repeats,
            out,
        } => {
            let cfg = BenchConfig {
                seed,
                gamma,
                degree,
                repeats,
            };
            emit(out, &bench_scaling(&l, d, r, &cfg)?.bench_csv())?;
        }
        Cmd::Sweep {
            seed,
            gammas,
            l,
            d,
            r,
            eps,
            out,
        } => {
            emit(out, &sweep_gamma(&gammas, l, d, r, eps, seed)?.sweep_csv())?;
        }
        Cmd::ReduceCheck {
            seed,
            l,
            r_red,
            d,
            bound,
        } => {
            let report = reduce_check(&gen_reduction(seed, l, r_red, bound)?, d)?;
            let ok = report.output_err <= 1e-10 && report.grad_rel_err <= 1e-5;
            println!("output subblock max abs err: {:.3e}", report.output_err);
            println!(
                "A-subblock gradient vs finite differences: max rel err {:.3e}",
                report.grad_rel_err
            );
            println!(
                "{}",
                if ok {
                    "reduction: ok"
                } else {
                    "reduction: FAILED"
                }
            );
            if !ok {
                return Ok(Verdict::Failed);
            }
        }
    }
    Ok(Verdict::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Verdict::Ok) => ExitCode::SUCCESS,
        Ok(Verdict::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
