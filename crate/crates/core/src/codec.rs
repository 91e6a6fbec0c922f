//! Serde adapters that store `f64` values as decimal strings.
//!
//! Values are written with the shortest representation that parses back to the
//! identical bit pattern, so every document round-trips exactly. Non-finite
//! values are rejected on both sides.

use std::fs;
use std::path::Path;

use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub fn format_real(value: f64) -> String {
    format!("{value:e}")
}

pub fn parse_real(text: &str) -> std::result::Result<f64, String> {
    let value: f64 = text
        .trim()
        .parse()
        .map_err(|_| format!("not a decimal real: {text:?}"))?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("non-finite real: {text:?}"))
    }
}

pub mod real {
    use super::*;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !value.is_finite() {
            return Err(serde::ser::Error::custom("non-finite real"));
        }
        s.serialize_str(&format_real(*value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        parse_real(&text).map_err(D::Error::custom)
    }
}

pub mod reals {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(serde::ser::Error::custom("non-finite real"));
        }
        s.collect_seq(values.iter().map(|v| format_real(*v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let texts = Vec::<String>::deserialize(d)?;
        texts
            .iter()
            .map(|t| parse_real(t).map_err(D::Error::custom))
            .collect()
    }
}

/// Writes a decimal string but also accepts a plain JSON number, so that
/// hand-written configuration files can use ordinary numerals.
pub mod lenient_real {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Text(String),
        Number(f64),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        super::real::serialize(value, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Either::deserialize(d)? {
            Either::Text(t) => parse_real(&t).map_err(D::Error::custom),
            Either::Number(v) if v.is_finite() => Ok(v),
            Either::Number(_) => Err(D::Error::custom("non-finite real")),
        }
    }
}

/// Row-major matrices stored as nested arrays of decimal strings.
pub mod matrix {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Row(#[serde(with = "super::reals")] Vec<f64>);

    pub fn serialize<S: Serializer>(
        rows: &[Vec<f64>],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let wrapped: Vec<Row> = rows.iter().map(|r| Row(r.clone())).collect();
        wrapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        Ok(rows.into_iter().map(|r| r.0).collect())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Malformed(format!("{path}: {}", e.into_inner()))
    })
}

/// Reads just the `version` field so callers can reject unknown documents early.
pub(crate) fn check_version(text: &str, expected: u32) -> Result<()> {
    #[derive(Deserialize)]
    struct Probe {
        version: Option<u32>,
    }
    let probe: Probe =
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    match probe.version {
        Some(v) if v == expected => Ok(()),
        Some(found) => Err(Error::Version { found, expected }),
        None => Err(Error::Malformed("missing version field".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn real_text_round_trips_bitwise(bits in any::<u64>()) {
            let value = f64::from_bits(bits);
            prop_assume!(value.is_finite());
            let back = parse_real(&format_real(value)).unwrap();
            prop_assert_eq!(back.to_bits(), value.to_bits());
        }
    }

    #[test]
    fn rejects_non_finite_text() {
        assert!(parse_real("NaN").is_err());
        assert!(parse_real("inf").is_err());
        assert!(parse_real("abc").is_err());
        assert_eq!(parse_real("-0e0").unwrap().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn version_probe() {
        assert!(check_version(r#"{"version":1}"#, 1).is_ok());
        assert!(matches!(
            check_version(r#"{"version":2}"#, 1),
            Err(Error::Version { found: 2, expected: 1 })
        ));
        assert!(check_version(r#"{}"#, 1).is_err());
    }
}
