use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

const MAGIC: &[u8; 4] = b"PFND";
const VERSION: u32 = 1;

/// Named parameters, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<(), NumericsError> {
        if self.params.contains_key(name) {
            return Err(NumericsError::Contract(format!("duplicate parameter `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(NumericsError::Contract("parameter name too long".into()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Serializes to the `PFND` binary layout (float32 payload).
    pub fn write_to(&self, mut w: impl Write) -> Result<(), NumericsError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Format("bad model magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NumericsError::Format(format!("unsupported model version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NumericsError::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| NumericsError::Format(format!("parameter `{name}`: {e}")))?;
            store.insert(&name, t).map_err(|e| NumericsError::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NumericsError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NumericsError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
