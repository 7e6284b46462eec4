//! Items every module needs regardless of the `std` feature.
#![allow(unused_imports)]

pub(crate) use alloc::boxed::Box;
pub(crate) use alloc::format;
pub(crate) use alloc::string::{String, ToString};
pub(crate) use alloc::vec;
pub(crate) use alloc::vec::Vec;

// Float methods (`sqrt`, `exp`, ...) come from libm when std is off.
#[cfg(not(feature = "std"))]
pub(crate) use num_traits::Float;
