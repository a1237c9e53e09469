//! Adam with bias correction.
//!
//! State is keyed by parameter name so it survives checkpointing and is
//! independent of graph construction order. Parameters that received no
//! gradient this step decay their moments toward zero; a parameter whose
//! moments are still zero is left bit-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of updates applied so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over every parameter in the store. Missing gradients count
    /// as zero.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("adam: lr {lr}")));
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let n = store.get(&name)?.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Internal(format!(
                    "adam: stale state for {name}: {} vs {n} values",
                    m.len()
                )));
            }
            let g = grads.get(&name);
            if let Some(t) = g {
                if t.len() != n {
                    return Err(Error::Internal(format!(
                        "adam: gradient for {name} has {} values, param has {n}",
                        t.len()
                    )));
                }
            }
            let p = store.get_mut(&name)?;
            for i in 0..n {
                let gi = g.map_or(0.0, |t| t.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub(crate) fn state(&self) -> (u64, &BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>) {
        (self.t, &self.m, &self.v)
    }

    pub(crate) fn from_state(
        t: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        Self { t, m, v }
    }
}
