//! Line-delimited JSON protocol for measuring models that live in another
//! process.
//!
//! A session opens with `hello` / `capabilities`, then alternates one
//! request with one response. [`serve`] exposes any
//! [`MeasurementTarget`](crate::target::MeasurementTarget) on a byte
//! stream; [`RemoteTarget`] is the other end and is itself a target.

mod client;
mod server;
pub mod wire;

pub use client::{verify_attribution, Client, RemoteTarget, DEFAULT_HANDSHAKE_TIMEOUT, IDENTITY_TOLERANCE};
pub use server::serve;
pub use wire::{Envelope, Message, PROTOCOL_VERSION};
