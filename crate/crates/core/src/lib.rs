//! Exact normal forms and numerical KAM-tori diagnostics for Nosé-type
//! thermostats.

pub mod averaging;
pub mod canonical;
pub mod expr;
pub mod jet;
pub mod linalg;
pub mod models;
pub mod normal_form;
pub mod simulate;
