//! Serde adapters that write matrices as nested JSON arrays.

use ndarray::{Array1, Array2};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
    rows.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    from_rows(rows).map_err(D::Error::custom)
}

pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err("ragged matrix rows".into());
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| v.to_vec())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}
