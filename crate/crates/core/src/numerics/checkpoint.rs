//! JSON checkpoint container: parameter name → shape + raw values, plus the
//! model config and the seed that produced it.
//!
//! Values are written as shortest round-trip decimal strings and parsed with
//! correctly rounded float parsing, so save/load is bit-exact for `f64` and
//! for `f32` (which widens to `f64` losslessly).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Container<C> {
    format: String,
    scalar: String,
    seed: u64,
    config: C,
    params: Vec<StoredParam>,
    #[serde(default)]
    meta: serde_json::Value,
}

const FORMAT: &str = "flatformer-checkpoint/1";

/// Scalar type recorded in a serialized checkpoint.
pub fn stored_scalar(text: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        scalar: String,
    }
    let h: Header = serde_json::from_str(text)?;
    if h.format != FORMAT {
        return Err(config_err!("unsupported checkpoint format {}", h.format));
    }
    Ok(h.scalar)
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T, C> {
    pub config: C,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub meta: serde_json::Value,
}

impl<T: Scalar, C: Serialize + DeserializeOwned> Checkpoint<T, C> {
    pub fn to_json(&self) -> Result<String> {
        let container = Container {
            format: FORMAT.to_string(),
            scalar: T::NAME.to_string(),
            seed: self.seed,
            config: &self.config,
            params: self
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.to_f64_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&container)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container<C> = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(config_err!("unsupported checkpoint format {}", c.format));
        }
        if c.scalar != T::NAME {
            return Err(config_err!(
                "checkpoint holds {} values, loader expects {}",
                c.scalar,
                T::NAME
            ));
        }
        let mut params = ParamStore::new();
        for p in c.params {
            params.insert(p.name, Tensor::from_f64(&p.shape, &p.values)?)?;
        }
        Ok(Checkpoint {
            config: c.config,
            seed: c.seed,
            params,
            meta: c.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip<T: Scalar>(values: Vec<f64>) {
        let mut params = ParamStore::<T>::new();
        let n = values.len();
        params
            .insert("w", Tensor::from_f64(&[n], &values).unwrap())
            .unwrap();
        let ck = Checkpoint {
            config: serde_json::json!({"d": 8}),
            seed: 42,
            params,
            meta: serde_json::Value::Null,
        };
        let back: Checkpoint<T, serde_json::Value> = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let a = ck.params.get("w").unwrap().data();
        let b = back.params.get("w").unwrap().data();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.f64().to_bits(), y.f64().to_bits());
        }
        assert_eq!(back.seed, 42);
    }

    proptest! {
        #[test]
        fn f64_values_roundtrip_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            roundtrip::<f64>(values);
        }

        #[test]
        fn f32_values_roundtrip_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            roundtrip::<f32>(values.into_iter().map(f64::from).collect());
        }
    }

    #[test]
    fn scalar_width_mismatch_is_rejected() {
        let mut params = ParamStore::<f32>::new();
        params.insert("w", Tensor::zeros(&[2])).unwrap();
        let ck = Checkpoint {
            config: serde_json::Value::Null,
            seed: 0,
            params,
            meta: serde_json::Value::Null,
        };
        let json = ck.to_json().unwrap();
        assert!(Checkpoint::<f64, serde_json::Value>::from_json(&json).is_err());
    }
}
