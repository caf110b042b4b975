//! AdamW with checkpointable state, warm-up + cosine learning-rate schedule and
//! global gradient-norm clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::VarMap;

use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    params: AdamWParams,
    slots: Vec<Slot>,
    step: u64,
}

impl AdamW {
    /// Optimizes every variable of the given maps; `prefixes` name each map so state
    /// can be saved and restored by name.
    pub fn new(groups: &[(&str, &VarMap)], params: AdamWParams) -> Result<Self> {
        let mut slots = Vec::new();
        for (prefix, vars) in groups {
            let data = vars.data().lock().expect("var map lock poisoned");
            let mut names: Vec<&String> = data.keys().collect();
            names.sort();
            for name in names {
                let var = data[name].clone();
                let zeros = var.as_tensor().zeros_like()?;
                slots.push(Slot {
                    name: format!("{prefix}.{name}"),
                    var,
                    m: zeros.clone(),
                    v: zeros,
                });
            }
        }
        Ok(Self { params, slots, step: 0 })
    }

    pub fn params(&self) -> &AdamWParams {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.slots.iter().map(|s| &s.var)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let m = ((&slot.m * p.beta1)? + (g * (1.0 - p.beta1))?)?;
            let v = ((&slot.v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let theta = slot.var.as_tensor();
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            let decayed = (theta * (1.0 - p.lr * p.weight_decay))?;
            slot.var.set(&(decayed - (update * p.lr)?)?)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Named first/second moment tensors plus the step counter.
    pub fn state(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for s in &self.slots {
            out.push((format!("m.{}", s.name), s.m.clone()));
            out.push((format!("v.{}", s.name), s.v.clone()));
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for s in &mut self.slots {
            let m = lookup(&format!("m.{}", s.name));
            let v = lookup(&format!("v.{}", s.name));
            match (m, v) {
                (Some(m), Some(v)) if m.dims() == s.m.dims() && v.dims() == s.v.dims() => {
                    s.m = m.to_dtype(s.m.dtype())?;
                    s.v = v.to_dtype(s.v.dtype())?;
                }
                _ => return Err(invalid!("optimizer state missing or mis-shaped for {}", s.name)),
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Linear warm-up over `warmup_steps` (step 0 gets `base / warmup_steps`), then
/// cosine decay to zero at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / decay as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm<'a>(grads: &GradStore, vars: impl Iterator<Item = &'a Var>) -> Result<f64> {
    let mut sq = 0.0;
    for var in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales the gradients of `vars` so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, vars.iter())?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for var in vars {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn warmup_starts_at_fraction_of_base() {
        assert!((cosine_lr(1e-3, 0, 10, 100) - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 9, 10, 100) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 10, 10, 100) - 1e-3).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 100, 10, 100).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 55, 10, 100) < 1e-3);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::zeros(3, DType::F64, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::zeros(1, DType::F64, &dev).unwrap()).unwrap();
        // Build a store holding gradients (6, 0, 0) and (8): global norm 10.
        let loss = ((a.as_tensor().sum_all().unwrap() * 0.0).unwrap() + (b.as_tensor().sum_all().unwrap() * 0.0).unwrap()).unwrap();
        let mut grads = loss.backward().unwrap();
        grads.insert(a.as_tensor(), Tensor::new(&[6.0f64, 0.0, 0.0], &dev).unwrap());
        grads.insert(b.as_tensor(), Tensor::new(&[8.0f64], &dev).unwrap());
        let vars = vec![a.clone(), b.clone()];
        let before = clip_grad_norm(&mut grads, &vars, 1.0).unwrap();
        assert!((before - 10.0).abs() < 1e-12);
        let after = grad_norm(&grads, vars.iter()).unwrap();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &dev).unwrap()).unwrap();
        vm.data().lock().unwrap().insert("w".into(), v.clone());
        let mut opt = AdamW::new(&[("p", &vm)], AdamWParams { lr: 0.1, ..Default::default() }).unwrap();
        let loss = v.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 2.1).abs() < 1e-6);
    }
}
