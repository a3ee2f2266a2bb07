//! Context Attribute Provider for a Zero Trust Federation.
//!
//! Context Collectors (a RADIUS server, an MDM, door-access systems, ...)
//! deliver contexts about their own local subjects. The CAP links each
//! context's subject to a federation-wide [`model::CapId`], stores it, and
//! releases it to Relying Parties only under an active consent.

pub mod api;
pub mod audit;
pub mod linking;
pub mod mdm;
pub mod model;
pub mod pki;
pub mod provider;
pub mod radius;
pub mod registry;
pub mod service;
pub mod store;
pub mod webhook;
