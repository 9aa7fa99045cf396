//! Reference implementations shared by the integration tests and the
//! acceptance suite. Each includer uses a different subset.
#![allow(dead_code)]

pub mod attention;
pub mod metrics;
