//! Named parameter store with gradient slots and optimizer state.
//!
//! Parameters live in a `BTreeMap` so every iteration order (updates,
//! serialization, gradient checks) is deterministic by construction.

use std::collections::BTreeMap;

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors plus per-tensor gradient and optimizer-moment slots.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    /// First-moment (or momentum) buffers, created on first optimizer use.
    opt_m: BTreeMap<String, Tensor>,
    /// Second-moment buffers (Adam only).
    opt_v: BTreeMap<String, Tensor>,
    step: u64,
    grads_ready: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            opt_m: BTreeMap::new(),
            opt_v: BTreeMap::new(),
            step: 0,
            grads_ready: false,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!(
                "parameter '{name}' already registered"
            )));
        }
        self.grads
            .insert(name.to_string(), Tensor::zeros(value.rows(), value.cols()));
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    /// Replaces a parameter value; the shape must match the registered one.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))?;
        if !slot.same_shape(&value) {
            return Err(Error::Shape(format!(
                "parameter '{name}' is {}x{}, new value is {}x{}",
                slot.rows(),
                slot.cols(),
                value.rows(),
                value.cols()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access to a parameter's raw buffer (used by perturbation
    /// harnesses); shape cannot change through this path.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    /// Adds `delta` into the gradient slot for `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))?;
        if !slot.same_shape(delta) {
            return Err(Error::Shape(format!(
                "gradient for '{name}' is {}x{}, delta is {}x{}",
                slot.rows(),
                slot.cols(),
                delta.rows(),
                delta.cols()
            )));
        }
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        slot.check_finite(&format!("gradient of '{name}'"))?;
        Ok(())
    }

    /// Marks gradients as populated (set by a completed backward pass).
    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Clears every gradient slot and the populated flag.
    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.grads_ready = false;
    }

    /// Sorted parameter names.
    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Deterministic (name-sorted) iteration over parameters.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn tensor_count(&self) -> usize {
        self.params.len()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Momentum / first-moment buffer for `name`, created zeroed on demand.
    pub(crate) fn opt_m_mut(&mut self, name: &str) -> &mut Tensor {
        let shape = {
            let p = &self.params[name];
            (p.rows(), p.cols())
        };
        self.opt_m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    /// Second-moment buffer for `name`, created zeroed on demand.
    pub(crate) fn opt_v_mut(&mut self, name: &str) -> &mut Tensor {
        let shape = {
            let p = &self.params[name];
            (p.rows(), p.cols())
        };
        self.opt_v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    /// Largest absolute difference across all parameters of two stores with
    /// identical layouts.
    pub fn max_param_diff(&self, other: &ParamStore) -> Result<f64> {
        if self.names() != other.names() {
            return Err(Error::State("stores hold different parameter sets".into()));
        }
        let mut worst = 0.0f64;
        for (name, p) in self.iter() {
            worst = worst.max(p.max_abs_diff(other.get(name)?)?);
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_duplicate_rejection() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(2, 2)).unwrap();
        assert_eq!(s.get("w").unwrap().len(), 4);
        assert!(matches!(
            s.insert("w", Tensor::zeros(1, 1)),
            Err(Error::State(_))
        ));
        assert!(matches!(s.get("missing"), Err(Error::State(_))));
    }

    #[test]
    fn names_iterate_sorted() {
        let mut s = ParamStore::new();
        s.insert("zeta", Tensor::zeros(1, 1)).unwrap();
        s.insert("alpha", Tensor::zeros(1, 1)).unwrap();
        s.insert("mid", Tensor::zeros(1, 1)).unwrap();
        assert_eq!(s.names(), vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn gradient_accumulation_and_zeroing() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(1, 2)).unwrap();
        s.accumulate_grad("w", &Tensor::row(vec![1.0, 2.0]).unwrap())
            .unwrap();
        s.accumulate_grad("w", &Tensor::row(vec![0.5, 0.5]).unwrap())
            .unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[1.5, 2.5]);
        s.zero_grads();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0, 0.0]);
        assert!(!s.grads_ready());
        let bad = s.accumulate_grad("w", &Tensor::zeros(2, 2));
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn set_preserves_shape_contract() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(2, 3)).unwrap();
        assert!(s.set("w", Tensor::ones(2, 3)).is_ok());
        assert!(matches!(
            s.set("w", Tensor::ones(3, 2)),
            Err(Error::Shape(_))
        ));
    }
}
