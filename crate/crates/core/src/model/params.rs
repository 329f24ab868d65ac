use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// What a stored array is used for. Only weights, scales and shifts are
/// trained; running statistics are buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batchnorm scale.
    Scale,
    /// Batchnorm shift.
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamKind::Weight | ParamKind::Bias | ParamKind::Scale | ParamKind::Shift
        )
    }

    /// Weight decay applies to weights only, never to normalization params.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    pub fn from_name(name: &str) -> ParamKind {
        match name.rsplit('.').next() {
            Some("bias") => ParamKind::Bias,
            Some("gamma") => ParamKind::Scale,
            Some("beta") => ParamKind::Shift,
            Some("running_mean") => ParamKind::RunningMean,
            Some("running_var") => ParamKind::RunningVar,
            _ => ParamKind::Weight,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named arrays in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        let kind = ParamKind::from_name(&name);
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.shape().numel())
            .sum()
    }

    /// Replaces every array with the matching entry of `other`, requiring
    /// identical names, order and shapes.
    pub fn assign(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::format(
                "weights",
                format!("{} arrays, expected {}", other.len(), self.params.len()),
            ));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::format(
                    "weights",
                    format!(
                        "array {name} {} does not match {} {}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}
