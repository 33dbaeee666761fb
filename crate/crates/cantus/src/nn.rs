//! Parameter storage and Adam. Masters are kept in f64 for training and
//! gradient checks; models export f32 snapshots for the decode engine and
//! checkpoints.

use std::collections::BTreeMap;

use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Td, Var};
use crate::tensor::Mat;
use rand_distr::{Distribution, StandardNormal};

pub fn randn_td(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Td {
    let mut t = Td::zeros(rows, cols);
    for v in t.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale;
    }
    t
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameter group with Adam state.
pub struct ParamGroup {
    names: Vec<String>,
    values: Vec<Td>,
    adam: Vec<AdamState>,
    step: usize,
    index: BTreeMap<String, usize>,
}

impl Default for ParamGroup {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamGroup {
    pub fn new() -> Self {
        ParamGroup {
            names: Vec::new(),
            values: Vec::new(),
            adam: Vec::new(),
            step: 0,
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Td) -> usize {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let n = value.data.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.adam.push(AdamState { m: vec![0.0; n], v: vec![0.0; n] });
        self.index.insert(self.names.last().unwrap().clone(), self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> &Td {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Td {
        let i = self.index[name];
        &mut self.values[i]
    }

    pub fn value_at(&self, i: usize) -> &Td {
        &self.values[i]
    }

    pub fn values(&self) -> &[Td] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Register every parameter as a tape leaf, in declaration order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// One Adam update from the gradients of the given leaves.
    pub fn adam_step(&mut self, leaves: &[Var], grads: &Gradients, cfg: AdamCfg) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (i, &leaf) in leaves.iter().enumerate() {
            let Some(g) = grads.get(leaf) else { continue };
            let st = &mut self.adam[i];
            let p = &mut self.values[i];
            for ((pv, gv), (m, v)) in
                p.data.iter_mut().zip(&g.data).zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *pv -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }

    /// f32 snapshots in declaration order, e.g. for checkpoints.
    pub fn to_mats(&self) -> Vec<(String, Mat)> {
        self.names.iter().cloned().zip(self.values.iter().map(Td::to_mat)).collect()
    }

    /// Load masters from named f32 mats; shapes must match.
    pub fn load_mats(&mut self, mats: &[(String, Mat)]) -> crate::Result<()> {
        for (name, m) in mats {
            let Some(&i) = self.index.get(name) else {
                return Err(crate::Error::BadCheckpoint(format!("unknown param {name}")));
            };
            if (self.values[i].rows, self.values[i].cols) != (m.rows, m.cols) {
                return Err(crate::Error::BadCheckpoint(format!("shape mismatch for {name}")));
            }
            self.values[i] = Td::from_mat(m);
        }
        Ok(())
    }

    /// Equal-weight (or weighted) average of several groups with identical
    /// layouts.
    pub fn merge(groups: &[&ParamGroup], weights: &[f64]) -> ParamGroup {
        assert!(!groups.is_empty());
        assert_eq!(groups.len(), weights.len());
        let wsum: f64 = weights.iter().sum();
        let mut out = ParamGroup::new();
        for (i, name) in groups[0].names.iter().enumerate() {
            let mut acc = Td::zeros(groups[0].values[i].rows, groups[0].values[i].cols);
            for (g, &w) in groups.iter().zip(weights) {
                assert_eq!(g.names[i], *name, "param layout mismatch");
                for (a, &x) in acc.data.iter_mut().zip(&g.values[i].data) {
                    *a += w / wsum * x;
                }
            }
            out.add(name, acc);
        }
        out
    }
}
