//! Estimation and inference for linear mixed models whose fixed and random
//! effect dimensions both grow, plus the heterogeneous graphical-model and
//! mixed-effects VAR applications built on top of them.

pub mod dataset;
pub mod error;
pub mod graph;
pub mod inference;
pub mod lasso;
pub mod mevar;
pub mod proxy;
pub mod rng;
pub mod sim;
pub mod varcomp;

pub use error::{Error, Result};

/// Parses a JSON config, reporting the offending field as a JSON pointer.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    use serde_path_to_error::Segment;
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            match seg {
                Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                Segment::Map { key } => pointer.push_str(&format!("/{key}")),
                Segment::Enum { variant } => pointer.push_str(&format!("/{variant}")),
                Segment::Unknown => pointer.push_str("/?"),
            }
        }
        if pointer.is_empty() {
            pointer.push('/');
        }
        Error::Config { pointer, msg: e.inner().to_string() }
    })
}
