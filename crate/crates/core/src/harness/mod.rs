//! Instance generation, on-disk bundles, the reduction check and the
//! benchmark drivers behind the `lora-kernels` binary.

mod bench;
mod instance;
mod reduction;

pub use bench::{
    bench_scaling, fit_loglog_slope, sweep_gamma, BenchConfig, PathKind, SweepResult, SweepRow,
    BENCH_HEADER, SWEEP_HEADER,
};
pub use instance::{
    gen_general_instance, gen_instance, read_instance, write_instance, GeneratedInstance,
    InstanceMeta,
};
pub use reduction::{
    attlgc_forward, attlgc_loss, embed_attlgc, gen_reduction, reduce_check, ReductionInstance,
    ReductionReport,
};
