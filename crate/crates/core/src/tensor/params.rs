use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

/// An ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `name`; replaces the value in place if it already exists.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        for ((a, x), (b, y)) in self.entries.iter().zip(&other.entries) {
            if a != b || x.shape() != y.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "param layout",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
        }
        Err(TensorError::Invalid {
            op: "param layout",
            msg: format!("{} vs {} tensors", self.len(), other.len()),
        })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ParamVars<'t> {
        ParamVars {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self
                .entries
                .iter()
                .map(|(_, t)| if requires_grad { tape.param(t) } else { tape.constant(t) })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct ParamVars<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| TensorError::Invalid {
                op: "param lookup",
                msg: format!("no parameter named {name:?}"),
            })
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Collects gradients into a [`ParamSet`] with the same layout; leaves that
    /// received no gradient read as zero.
    pub fn collect_grads(&self, grads: &mut Gradients) -> ParamSet {
        let entries = self
            .names
            .iter()
            .zip(&self.vars)
            .map(|(n, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (n.clone(), g)
            })
            .collect();
        ParamSet { entries }
    }

    /// True when no leaf of this set appears in `grads`.
    pub fn untouched_by(&self, grads: &Gradients) -> bool {
        self.vars.iter().all(|v| grads.get(*v).is_none())
    }
}
