//! PoP extraction from delay-annotated traceroute edges, PoP geolocation by
//! cross-database majority vote, and evaluation of IP geolocation databases.

pub mod error;
pub mod evaluate;
pub mod extract;
pub mod geo;
pub mod geodb;
pub mod ingest;
pub mod locate;
pub mod par;
pub mod records;
pub mod report;
pub mod synth;

pub use error::{Error, LineError, Result};
