use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{AdError, Tape, Tensor, Var};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.values().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`], using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, AdError> {
        if flat.len() != self.total_len() {
            return Err(AdError::BadLength { shape: vec![self.total_len()], len: flat.len() });
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        out
    }

    /// `self += c * other`, matching entries by name.
    pub fn axpy(&mut self, c: f64, other: &ParamSet) -> Result<(), AdError> {
        for (name, t) in self.entries.iter_mut() {
            let o = other.get(name).ok_or_else(|| AdError::Invalid(format!("missing parameter {name}")))?;
            if o.shape() != t.shape() {
                return Err(AdError::shape("axpy", t.shape(), o.shape()));
            }
            for (a, b) in t.values_mut().iter_mut().zip(o.values()) {
                *a += c * b;
            }
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.values().flat_map(|t| t.values()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Places every entry on `tape` as a differentiable leaf.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> VarSet<'t> {
        VarSet { entries: self.entries.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect() }
    }

    /// Places every entry on `tape` as a constant.
    pub fn to_constants<'t>(&self, tape: &'t Tape) -> VarSet<'t> {
        VarSet { entries: self.entries.iter().map(|(k, t)| (k.clone(), tape.constant(t.clone()))).collect() }
    }
}

/// Tape handles keyed like the [`ParamSet`] they came from.
#[derive(Clone, Debug)]
pub struct VarSet<'t> {
    entries: Vec<(String, Var<'t>)>,
}

impl<'t> VarSet<'t> {
    pub fn from_pairs(entries: Vec<(String, Var<'t>)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, AdError> {
        self.entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| AdError::Invalid(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Current values as a [`ParamSet`].
    pub fn values(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.entries {
            out.insert(k.clone(), (*v.value()).clone());
        }
        out
    }

    /// Pairs raw gradient tensors (in this set's order) back up with names.
    pub fn name_tensors(&self, grads: Vec<Tensor>) -> ParamSet {
        let mut out = ParamSet::new();
        for ((k, _), g) in self.entries.iter().zip(grads) {
            out.insert(k.clone(), g);
        }
        out
    }

    /// Sum of squares of every entry, as a tape scalar.
    pub fn sum_squares(&self) -> Result<Var<'t>, AdError> {
        let mut total: Option<Var<'t>> = None;
        for (_, v) in &self.entries {
            let s = v.square()?.sum_all()?;
            total = Some(match total {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
        total.ok_or_else(|| AdError::Invalid("sum of squares over an empty set".into()))
    }

    /// All entries flattened into one `[1, total_len]` row, in order.
    /// Fresh identity nodes over every entry, so that gradients taken with
    /// respect to the copy ignore other uses of the originals.
    pub fn alias(&self) -> Result<VarSet<'t>, AdError> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.reshape(&v.shape())?)))
            .collect::<Result<Vec<_>, AdError>>()?;
        Ok(VarSet { entries })
    }

    pub fn flatten_row(&self) -> Result<Var<'t>, AdError> {
        let rows = self
            .entries
            .iter()
            .map(|(_, v)| v.reshape(&[1, v.value().len()]))
            .collect::<Result<Vec<_>, _>>()?;
        Var::concat_cols(&rows)
    }

    /// Splits a `[1, total_len]` row back into entries shaped like `self`.
    pub fn unflatten_row(&self, flat: Var<'t>) -> Result<VarSet<'t>, AdError> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (k, v) in &self.entries {
            let shape = v.shape();
            let n: usize = shape.iter().product();
            let piece = flat.slice_cols(offset, offset + n)?.reshape(&shape)?;
            entries.push((k.clone(), piece));
            offset += n;
        }
        Ok(VarSet { entries })
    }

    /// `self - step * grads`, entry by entry.
    pub fn descend(&self, step: f64, grads: &[Var<'t>]) -> Result<VarSet<'t>, AdError> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((k, v), g) in self.entries.iter().zip(grads) {
            entries.push((k.clone(), v.sub(g.scale(step)?)?));
        }
        Ok(VarSet { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Order;

    fn sample() -> ParamSet {
        ParamSet::new()
            .with("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]))
            .with("b", Tensor::row_vector(vec![0.1, f64::MIN_POSITIVE, -7.25]))
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat.len(), 7);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn insertion_order_is_kept() {
        let p = ParamSet::new().with("z", Tensor::scalar(1.0)).with("a", Tensor::scalar(2.0));
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["z", "a"]);
    }

    #[test]
    fn flatten_row_round_trip_on_tape() {
        let tape = Tape::new(Order::First);
        let vars = sample().to_vars(&tape);
        let flat = vars.flatten_row().unwrap();
        assert_eq!(flat.value().values(), sample().flatten().as_slice());
        let back = vars.unflatten_row(flat).unwrap();
        assert_eq!(back.values(), sample());
    }
}
