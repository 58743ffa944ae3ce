//! Secure delegated matrix multiplication over `Z/2^32`.
//!
//! A client that wants `A * B` but not the cost of computing it masks both
//! operands with trapdoored pseudorandom matrices, ships the masked operands
//! to an untrusted server, and unmasks the returned product. The masks are
//! layered LPN instances, so the server learns nothing useful, yet the
//! trapdoor (the subspace chain that generated the masks) lets the client do
//! all of its own arithmetic on thin matrices. Results are exact: the ring is
//! `Z/2^32`, every mask term cancels bit for bit, and replies are verified
//! with probabilistic product checks, so a lying server is caught and the
//! session aborted.
//!
//! Module map:
//!
//! * [`ring_matrix`]: dense and sparse wrapping-arithmetic kernels plus the
//!   operation counter used to certify who paid for what.
//! * [`lpn`]: noise rates, the security table, dimension/noise schedules, and
//!   the deterministic seeded RNG.
//! * [`trapdoor`]: subspace chains, chain product tables, mask expansion, and
//!   the fast masked-product paths.
//! * [`verify`]: probabilistic product checks and the zero-query auditor.
//! * [`protocol`]: client and server state machines for both the single-layer
//!   and the layered delegation protocols.
//! * [`transport`]: the framed wire format, loopback and TCP transports, and
//!   session drivers with exact byte accounting.

pub mod error;
pub mod lpn;
pub mod protocol;
pub mod ring_matrix;
pub mod trapdoor;
pub mod transport;
pub mod verify;

pub use error::Error;
