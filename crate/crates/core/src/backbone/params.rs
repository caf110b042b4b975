use std::cell::RefCell;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::noise::keyed_rng;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

/// Seeded parameter factory that registers every tensor it creates in a [`VarMap`].
///
/// Candle's own initializers draw from an unseeded generator; going through this
/// keeps model construction reproducible.
#[derive(Clone)]
pub struct Params {
    vars: VarMap,
    prefix: String,
    rng: Rc<RefCell<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl Params {
    pub fn new(vars: &VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: vars.clone(),
            prefix: String::new(),
            rng: Rc::new(RefCell::new(keyed_rng(seed, 0x7061_7261, 0))),
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.vars
            .data()
            .lock()
            .expect("var map lock poisoned")
            .insert(full, var.clone());
        Ok(var.as_tensor().clone())
    }

    /// Linear layer with uniform `1/sqrt(fan_in)` init, or zero init when `zero` is set.
    pub fn linear(&self, fan_in: usize, fan_out: usize, zero: bool) -> Result<candle_nn::Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w_init = if zero { Init::Zeros } else { Init::Uniform(bound) };
        let w = self.get(&[fan_out, fan_in], "weight", w_init)?;
        let b = self.get(&[fan_out], "bias", Init::Zeros)?;
        Ok(candle_nn::Linear::new(w, Some(b)))
    }
}

/// Copies every tensor of `src` into the same-named variable of `dst`.
pub fn copy_vars(src: &VarMap, dst: &VarMap) -> Result<()> {
    let src = src.data().lock().expect("var map lock poisoned");
    let dst = dst.data().lock().expect("var map lock poisoned");
    for (name, var) in dst.iter() {
        let s = src.get(name).ok_or_else(|| {
            crate::Error::Incompatible(format!("source is missing parameter {name}"))
        })?;
        var.set(s.as_tensor())?;
    }
    Ok(())
}

/// Digest of all parameter values, in name order.
pub fn vars_fingerprint(vars: &VarMap) -> Result<String> {
    let data = vars.data().lock().expect("var map lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let t = data[name].as_tensor().to_dtype(DType::F64)?.flatten_all()?;
        h.update(name.as_bytes());
        for v in t.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
