use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(
            name,
            Param {
                tensor,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    /// Normal entries with the given standard deviation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                std * z
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![v; n])?)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if p.tensor.data.len() != data.len() {
            return Err(Error::Shape {
                op: "set_data",
                left: p.tensor.shape.clone(),
                right: vec![data.len()],
            });
        }
        p.tensor.data = data;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Marks exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = keep(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert_const("a", &[2], 1.0).unwrap();
        assert!(s.insert_const("a", &[3], 1.0).is_err());
    }

    #[test]
    fn glorot_bounds_and_freezing() {
        let mut s = ParamStore::new();
        let mut rng = rng_for(1, "t");
        s.insert_glorot("enc.w", 10, 6, &mut rng).unwrap();
        s.insert_glorot("x.transfer.w", 4, 4, &mut rng).unwrap();
        let a = (6.0f64 / 16.0).sqrt();
        assert!(s.tensor("enc.w").unwrap().data.iter().all(|v| v.abs() < a));
        s.set_trainable(|n| n.contains(".transfer."));
        assert_eq!(s.trainable_names(), vec!["x.transfer.w".to_string()]);
    }
}
