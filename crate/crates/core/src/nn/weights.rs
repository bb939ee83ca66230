//! Named weight tensors, their initialization and the `EVHW1` container.
//!
//! Container layout, all integers `u32` little-endian:
//!
//! ```text
//! "EVHW1" | count | count x (name_len, name, rank, dims[rank]) | f32 payloads
//! ```
//!
//! Payloads follow in manifest order.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"EVHW1";

/// Expected name and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding each output unit; 0 for biases.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape,
            fan_in,
        }
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            fan_in: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from tensor name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let tensors = specs
            .iter()
            .map(|s| (s.name.clone(), Tensor::zeros(&s.shape)))
            .collect();
        Self { tensors }
    }

    /// He-uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let t = if s.fan_in == 0 {
                    Tensor::zeros(&s.shape)
                } else {
                    let bound = (6.0 / s.fan_in as f64).sqrt();
                    let data = (0..s.numel())
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::new(s.shape.clone(), data).expect("spec shape")
                };
                (s.name.clone(), t)
            })
            .collect();
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks names and shapes against `specs`; every spec must be present
    /// and no extra tensor is allowed.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            if let Some(extra) = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
            {
                return Err(Error::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        write_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(&mut out, name.len())?;
            out.write_all(name.as_bytes())?;
            write_u32(&mut out, t.rank())?;
            for d in t.shape() {
                write_u32(&mut out, *d)?;
            }
        }
        for t in self.tensors.values() {
            let bytes: Vec<u8> = t
                .data()
                .iter()
                .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
                .collect();
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an EVHW1 weight file".into()));
        }
        let count = read_u32(&mut input)?;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut input)?;
            if len > 4096 {
                return Err(Error::Format(format!("tensor name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut input)?;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u32(&mut input))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = IndexMap::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            if tensors.contains_key(&name) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("a.weight", vec![2, 3], 2),
            ParamSpec::bias("a.bias", 3),
        ]
    }

    #[test]
    fn container_round_trip() {
        let w = Weights::<f32>::init(&specs(), 7);
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"EVHW1");
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        // magic + count + ("a.weight": 4+8+4+8) + ("a.bias": 4+6+4+4) + 9 floats
        assert_eq!(buf.len(), 5 + 4 + 24 + 18 + 36);
        let back = Weights::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Weights::<f64>::init(&specs(), 1);
        assert_eq!(a, Weights::init(&specs(), 1));
        assert_ne!(a, Weights::init(&specs(), 2));
        let bound = 3.0f64.sqrt();
        assert!(a
            .get("a.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < bound));
        assert!(a.get("a.bias").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn validation_names_the_tensor() {
        let mut w = Weights::<f32>::zeros(&specs());
        assert!(w.validate(&specs()).is_ok());
        w.insert("a.bias", Tensor::zeros(&[4]));
        match w.validate(&specs()) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "a.bias"),
            other => panic!("{other:?}"),
        }
        w.insert("a.bias", Tensor::zeros(&[3]));
        w.insert("b.bias", Tensor::zeros(&[3]));
        assert!(matches!(w.validate(&specs()), Err(Error::UnexpectedTensor(n)) if n == "b.bias"));
        let w = Weights::<f32>::zeros(&specs()[..1]);
        assert!(matches!(w.validate(&specs()), Err(Error::MissingTensor(n)) if n == "a.bias"));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Weights::<f32>::read_from(&b"EVHW2\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let mut buf = Vec::new();
        Weights::<f32>::zeros(&specs()).write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            Weights::<f32>::read_from(buf.as_slice()),
            Err(Error::Io(_))
        ));
    }
}
