//! Serde adapters that store `DVector<f64>` lists as nested arrays.

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<&[f64]> = v.iter().map(|p| p.as_slice()).collect();
    rows.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    Ok(rows.into_iter().map(DVector::from_vec).collect())
}
