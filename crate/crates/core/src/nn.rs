//! Parameter storage and the handful of layers the tokenizer and the
//! transformer are built from.
//!
//! Parameters live in a name-sorted map so that iteration order (and thus
//! optimizer updates, gradient norms and checkpoint layout) is deterministic.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

/// A flat, name-addressed collection of trainable tensors.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create a parameter. Panics on a duplicate name, which is a programming error.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut StreamRng) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Number of scalars in parameters whose names start with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Values as f64, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((k.clone(), t.dims().to_vec(), data))
            })
            .collect()
    }

    /// Raw little-endian bytes of one parameter in its native dtype.
    pub fn raw_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let v = self.vars.get(name).ok_or_else(|| config_err!("unknown parameter {name}"))?;
        tensor_le_bytes(v.as_tensor())
    }

    /// Overwrite a parameter from raw little-endian bytes in the store dtype.
    pub fn load_raw(&self, name: &str, shape: &[usize], bytes: &[u8]) -> Result<()> {
        let v = self.vars.get(name).ok_or_else(|| Error::Integrity(format!("unexpected parameter {name}")))?;
        if v.as_tensor().dims() != shape {
            return Err(Error::Integrity(format!(
                "shape mismatch for {name}: stored {shape:?}, model {:?}",
                v.as_tensor().dims()
            )));
        }
        let t = tensor_from_le_bytes(bytes, shape, self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    /// Overwrite a parameter with the given values (converted to the store dtype).
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self.vars.get(name).ok_or_else(|| config_err!("unknown parameter {name}"))?;
        let t = Tensor::from_vec(values.to_vec(), v.as_tensor().dims(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}

pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        other => return Err(config_err!("unsupported dtype {other:?}")),
    })
}

pub fn tensor_from_le_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let dev = Device::Cpu;
    let n: usize = shape.iter().product();
    match dtype {
        DType::F32 => {
            if bytes.len() != 4 * n {
                return Err(Error::Integrity("payload length mismatch".into()));
            }
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(v, shape, &dev)?)
        }
        DType::F64 => {
            if bytes.len() != 8 * n {
                return Err(Error::Integrity("payload length mismatch".into()));
            }
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(v, shape, &dev)?)
        }
        other => Err(config_err!("unsupported dtype {other:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weight has shape `(out, in)`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init, rng: &mut StreamRng) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[output, input], init, rng)?;
        let bias = store.add(&format!("{name}.bias"), &[output], Init::Zeros, rng)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension, optionally with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn affine(store: &mut ParamStore, name: &str, dim: usize, rng: &mut StreamRng) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), &[dim], Init::Ones, rng)?;
        let bias = store.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?;
        Ok(Self { gain: Some(gain), bias: Some(bias), eps: 1e-6 })
    }

    pub fn plain() -> Self {
        Self { gain: None, bias: None, eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let mut y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        if let Some(g) = &self.gain {
            y = y.broadcast_mul(g)?;
        }
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[cout, cin, kernel, kernel], Init::Uniform(bound), rng)?;
        let bias = store.add(&format!("{name}.bias"), &[cout], Init::Uniform(bound), rng)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut StreamRng) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), input, hidden, Init::Normal(0.02), rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, output, Init::Normal(0.02), rng)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Scalar value of a rank-0 or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
