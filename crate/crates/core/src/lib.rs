//! Gradient kernels for LoRA-adapted attention.
//!
//! The crate computes exact gradients of the squared attention loss with
//! respect to LoRA adapter factors, plus a low-rank approximate path whose
//! cost is almost linear in sequence length when the attention scores are
//! bounded.
//!
//! ```
//! use lora_kernels::exact::grad_adapters_special;
//! use lora_kernels::harness::gen_instance;
//! use lora_kernels::lowrank::approx_grad_special;
//! use lora_kernels::{FactorBackend, PolyApproxConfig};
//!
//! let gi = gen_instance(1, 256, 4, 2, 0.5)?;
//! let exact = grad_adapters_special(&gi.inst, &gi.wstar, &gi.adapter)?;
//! let cfg = PolyApproxConfig::new(0.5, 3, 1e-3)?;
//! let approx = approx_grad_special(&gi.inst, &gi.wstar, &gi.adapter, &FactorBackend::Poly(cfg))?;
//! assert!(exact.max_abs_diff(&approx)? < 1e-3);
//! # Ok::<(), lora_kernels::Error>(())
//! ```

pub mod attention;
pub mod error;
pub mod exact;
pub mod harness;
pub mod lowrank;
pub mod matrix;
pub mod meter;
pub mod oracle;
mod par;
pub mod tensor;

pub use attention::{AttentionInstance, GeneralInstance, LoraAdapter};
pub use error::{Error, Result};
pub use exact::GradientPair;
pub use lowrank::{FactorBackend, LowRankFactor, PolyApproxConfig};
pub use matrix::DenseMatrix;
pub use meter::Meter;
pub use par::is_parallel;
