//! Ingress resource-control models.

pub mod htb;
pub mod markers;
