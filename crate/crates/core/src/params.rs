//! Parameter containers shared by every module.
//!
//! Containers are generic over the leaf type: `Tensor` for storage and
//! checkpoints, [`Var`] once bound onto a [`Graph`]. `try_map_leaves` walks the
//! leaves in a fixed order with dotted names, which drives binding,
//! serialization, and optimizer updates alike.

use std::collections::BTreeMap;
use std::convert::Infallible;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Visitor over named leaves.
pub trait ParamTree<T> {
    type Mapped<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Self::Mapped<U>, E>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        match self.try_map_leaves::<U, Infallible>(prefix, &mut |n, t| Ok(f(n, t))) {
            Ok(v) => v,
            Err(never) => match never {},
        }
    }

    fn leaves(&self, prefix: &str) -> Vec<(String, T)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map_leaves(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers every tensor as a graph leaf, trainable or constant.
pub fn bind<P: ParamTree<Tensor>>(g: &mut Graph, params: &P, trainable: bool) -> P::Mapped<Var> {
    params.map_leaves("", &mut |_, t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

/// Rebuilds a container from a name -> tensor map, checking each shape
/// against `template`.
pub fn load_from<P: ParamTree<Tensor, Mapped<Tensor> = P>>(
    template: &P,
    prefix: &str,
    named: &BTreeMap<String, Tensor>,
) -> Result<P> {
    template.try_map_leaves(prefix, &mut |name, t| {
        let found = named
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if found.shape() != t.shape() {
            return shape_err(format!(
                "parameter {name}: expected {:?}, found {:?}",
                t.shape(),
                found.shape()
            ));
        }
        Ok(found.clone())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> ParamTree<T> for ConvParams<T> {
    type Mapped<U> = ConvParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ConvParams<U>, E> {
        Ok(ConvParams {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }
}

impl ConvParams<Tensor> {
    /// Uniform init with variance `gain / fan_in`; zero bias.
    pub fn init(cout: usize, cin: usize, k: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        let bound = (3.0 * gain / fan_in).sqrt();
        Self {
            weight: uniform(&[cout, cin, k, k], bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T, const N: usize> ParamTree<T> for [ConvParams<T>; N] {
    type Mapped<U> = [ConvParams<U>; N];

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<[ConvParams<U>; N], E> {
        let mut out = Vec::with_capacity(N);
        for (i, c) in self.iter().enumerate() {
            out.push(c.try_map_leaves(&join(prefix, &i.to_string()), f)?);
        }
        Ok(out.try_into().unwrap_or_else(|_| unreachable!("length is N")))
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Option<P::Mapped<U>>, E> {
        self.as_ref().map(|p| p.try_map_leaves(prefix, f)).transpose()
    }
}

/// Rebuilds `template` with `values` taken in leaf order.
pub fn with_values<P: ParamTree<Tensor, Mapped<Tensor> = P>>(template: &P, values: Vec<Tensor>) -> Result<P> {
    let expected = template.leaves("").len();
    if values.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} parameter tensors, got {}",
            values.len()
        )));
    }
    let mut it = values.into_iter();
    template.try_map_leaves("", &mut |name, t| {
        let v = it.next().expect("length checked");
        if v.shape() != t.shape() {
            return shape_err(format!(
                "parameter {name}: expected {:?}, got {:?}",
                t.shape(),
                v.shape()
            ));
        }
        Ok(v)
    })
}

pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Applies a conv layer recorded on the graph with "same" padding.
pub fn conv_same(g: &mut Graph, x: Var, p: &ConvParams<Var>) -> Result<Var> {
    let k = g.shape(p.weight)[2];
    g.conv2d(x, p.weight, p.bias, 1, k / 2)
}
