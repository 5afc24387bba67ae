use crate::tensor::{Scalar, Tensor};

/// Optimizer treatment of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Projection matrices: decayed with the global weight-decay rate.
    Weight,
    /// Layer-norm affines, projection biases, class token, position
    /// embedding: never decayed.
    NoDecay,
    /// Focal attention bias storage: decayed with the bias rate when bias
    /// decay is enabled.
    FocalBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub kind: ParamKind,
    /// Updated by the optimizer; fixed focal biases are not.
    pub trainable: bool,
    pub tensor: Tensor<T>,
}

/// Ordered, named parameter collection. Order is creation order and fixes
/// checkpoint layout and optimizer iteration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        trainable: bool,
        tensor: Tensor<T>,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            kind,
            trainable,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn as_slice(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    trainable: p.trainable,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

impl<'a, T: Scalar> IntoIterator for &'a ParamStore<T> {
    type Item = &'a Param<T>;
    type IntoIter = std::slice::Iter<'a, Param<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}
