//! Named tensor container holding every layer's weights plus auxiliary
//! prune-mask, index and quantization-scale entries.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prefix of bundle entries that carry metadata strings.
pub const META_PREFIX: &str = "meta/";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.starts_with(META_PREFIX) {
            return Err(Error::InvalidConfig(format!("entry name `{name}` uses the reserved `{META_PREFIX}` prefix")));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("bad entry name length {}", name.len())));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Tensors keyed by name, with metadata folded in as `meta/<key>` byte
    /// tensors. This is the record list the bundle file stores.
    pub(crate) fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (key, value) in &self.metadata {
            let mut bytes: Vec<i16> = value.bytes().map(i16::from).collect();
            // A tensor needs at least one element; empty strings carry a NUL.
            if bytes.is_empty() {
                bytes.push(0);
            }
            let len = bytes.len();
            let t = Tensor::from_i16(vec![len], 0, bytes).expect("1-D byte tensor");
            out.push((format!("{META_PREFIX}{key}"), t));
        }
        out
    }

    pub(crate) fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut bundle = Self::new();
        for (name, tensor) in records {
            if let Some(key) = name.strip_prefix(META_PREFIX) {
                let raw = tensor
                    .as_i16()
                    .ok_or_else(|| Error::InvalidTensor(format!("metadata entry `{key}` is not fixed16")))?;
                let bytes: Vec<u8> = raw
                    .iter()
                    .filter(|&&b| b != 0)
                    .map(|&b| u8::try_from(b))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidTensor(format!("metadata `{key}` not bytes")))?;
                let value = String::from_utf8(bytes)
                    .map_err(|_| Error::InvalidTensor(format!("metadata `{key}` not UTF-8")))?;
                bundle.metadata.insert(key.to_string(), value);
            } else {
                if bundle.entries.contains_key(&name) {
                    return Err(Error::InvalidTensor(format!("duplicate entry `{name}`")));
                }
                bundle.insert(name, tensor)?;
            }
        }
        Ok(bundle)
    }
}
