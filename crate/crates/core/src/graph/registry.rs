use std::collections::HashMap;

use crate::error::{contract_err, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Index of a parameter inside its [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Decoder(usize),
}

impl Group {
    /// Name prefix used for parameters of this group.
    pub fn prefix(&self) -> String {
        match self {
            Group::Encoder => "encoder".to_string(),
            Group::Decoder(i) => format!("decoder{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub trainable: bool,
    pub group: Group,
    /// Logical rank when serialized: 1 for per-channel vectors, 4 for kernels.
    pub ndim: u8,
}

impl<T: Scalar> Param<T> {
    /// Dims as written to disk (trailing singleton axes dropped for vectors).
    pub fn logical_dims(&self) -> Vec<usize> {
        let d = self.value.dims();
        match self.ndim {
            1 => vec![d.count()],
            _ => d.as_array().to_vec(),
        }
    }
}

/// Ordered name → parameter map. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: String,
        value: Tensor4<T>,
        trainable: bool,
        group: Group,
        ndim: u8,
    ) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return contract_err(format!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor4::zeros(value.dims());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
            group,
            ndim,
        });
        Ok(id)
    }

    /// Adds a per-channel vector stored as a `(1, 1, 1, len)` tensor.
    pub fn add_vector(
        &mut self,
        name: String,
        values: Vec<T>,
        trainable: bool,
        group: Group,
    ) -> Result<ParamId> {
        let v = Tensor4::from_vec(Dims::new(1, 1, 1, values.len()), values)?;
        self.add(name, v, trainable, group, 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].grad
    }

    /// Adds `g` into the gradient buffer of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.len() != g.len() {
            return contract_err(format!(
                "gradient of {} elements for parameter {} of {}",
                g.len(),
                p.name,
                p.value.dims()
            ));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn zero_group_grads(&mut self, group: Group) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.grad.fill(T::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies every value of `group_from` onto the same-named parameter of
    /// `group_to` (names differ only in the group prefix).
    pub fn copy_group(&mut self, from: Group, to: Group) -> Result<()> {
        let (pf, pt) = (from.prefix(), to.prefix());
        let pairs: Vec<(usize, usize)> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == from)
            .map(|(i, p)| {
                let target = format!("{pt}{}", &p.name[pf.len()..]);
                self.index.get(&target).map(|id| (i, id.0)).ok_or_else(|| {
                    crate::Error::Contract(format!("no counterpart {target} for {}", p.name))
                })
            })
            .collect::<Result<_>>()?;
        for (i, j) in pairs {
            let v = self.params[i].value.clone();
            if v.dims() != self.params[j].value.dims() {
                return contract_err(format!(
                    "cannot copy {} onto {}: dims differ",
                    self.params[i].name, self.params[j].name
                ));
            }
            self.params[j].value = v;
        }
        Ok(())
    }
}
