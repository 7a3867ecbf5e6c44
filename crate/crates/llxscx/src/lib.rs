//! Lock-free dictionaries built from LLX/SCX.
//!
//! LLX, SCX and VLX are implemented from single-word CAS in [`llx`], using
//! per-thread reusable descriptors from [`descriptor`]. The tree update
//! template lives in [`template`]. Four structures are built on top:
//! [`multiset`], [`chromatic`], [`ravl`] and [`abtree`]. [`kcas`] provides
//! DCSS and k-CAS over the same descriptor machinery.

#[cfg(not(any(target_pointer_width = "64", target_pointer_width = "32")))]
compile_error!("llxscx packs handles into 32- or 64-bit words");

pub mod abtree;
pub(crate) mod bst;
pub mod chromatic;
pub mod descriptor;
pub mod kcas;
pub mod key;
pub mod llx;
pub mod multiset;
pub mod ravl;
pub mod reclaim;
pub mod registry;
pub mod stats;
pub mod stw;
pub mod template;

pub(crate) mod shim;

pub use key::Key;
pub use stats::{Report, TreeStats};
