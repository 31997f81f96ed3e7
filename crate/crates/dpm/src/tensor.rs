//! Dense row-major tensors, the parameter store, and the checkpoint format.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive};

use crate::error::DpmError;

/// Element type for all numeric work. f32 is the training default,
/// f64 is the gradient-checking mode.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, DpmError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DpmError::shape(
                "Tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// C-by-c identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar extraction; panics if not a single element.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }
}

/// Parameter freeze group for the two-step schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FreezeGroup {
    Encoder,
    Hmg,
    Prototype,
}

impl FreezeGroup {
    pub const ALL: [FreezeGroup; 3] = [FreezeGroup::Encoder, FreezeGroup::Hmg, FreezeGroup::Prototype];

    pub fn name(self) -> &'static str {
        match self {
            FreezeGroup::Encoder => "ENCODER",
            FreezeGroup::Hmg => "HMG",
            FreezeGroup::Prototype => "PROTOTYPE",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub group: FreezeGroup,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters with stable insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), index: HashMap::new(), params: Vec::new() }
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: Tensor<T>,
        group: FreezeGroup,
    ) -> Result<(), DpmError> {
        if self.index.contains_key(name) {
            return Err(DpmError::invalid("param", format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(Param { value, trainable: true, group, grad: None });
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(move |n| (n.as_str(), &self.params[self.index[n]]))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.names.iter().zip(self.params.iter_mut()).map(|(n, p)| (n.as_str(), p))
    }

    /// Total scalar count in one freeze group.
    pub fn group_numel(&self, group: FreezeGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast::<U>(), p.group).unwrap();
        }
        out
    }

    /// FNV-1a over the raw little-endian bytes of every parameter, in store order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, p) in self.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in p.value.data() {
                for b in (v.to_f64c() as f64).to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

const CKPT_MAGIC: &[u8; 8] = b"DPMCKPT1";

impl ParamStore<f32> {
    /// Serialize in the DPMCKPT1 layout: magic, count, then per-parameter
    /// (name_len u64, name, rank u64, extents u64..., f32 data), all little-endian.
    pub fn save(&self, path: &Path) -> Result<(), DpmError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (name, p) in self.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(p.value.rank() as u64).to_le_bytes())?;
            for &e in p.value.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load values into an existing store; names and shapes must match the
    /// store built from the run config.
    pub fn load_into(&mut self, path: &Path) -> Result<(), DpmError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(DpmError::Format(format!(
                "bad magic: expected DPMCKPT1, got {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let count = read_u64(&mut r)? as usize;
        if count != self.len() {
            return Err(DpmError::Format(format!(
                "checkpoint has {count} parameters, store expects {}",
                self.len()
            )));
        }
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| DpmError::Format(format!("bad parameter name: {e}")))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            let p = self
                .get_mut(&name)
                .ok_or_else(|| DpmError::Format(format!("unknown parameter {name} in checkpoint")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(DpmError::Format(format!(
                    "parameter {name}: checkpoint shape {:?} != store shape {:?}",
                    shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(shape, data)?;
        }
        Ok(())
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DpmError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
