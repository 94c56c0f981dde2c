//! Named parameter storage and the small layer set the models are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Real, Tensor, Var};

/// Trainable tensors keyed by dotted names (`blocks.0.bright.ln1.gamma`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Renames every parameter under `from.` to `to.` and vice versa.
    pub fn swap_prefixes(&mut self, from: &str, to: &str) {
        let (a, b) = (format!("{from}."), format!("{to}."));
        let old = std::mem::take(&mut self.tensors);
        self.tensors = old
            .into_iter()
            .map(|(k, v)| {
                let k = if let Some(rest) = k.strip_prefix(&a) {
                    format!("{b}{rest}")
                } else if let Some(rest) = k.strip_prefix(&b) {
                    format!("{a}{rest}")
                } else if let Some(pos) = k.find(&format!(".{a}")) {
                    format!("{}.{b}{}", &k[..pos], &k[pos + a.len() + 1..])
                } else if let Some(pos) = k.find(&format!(".{b}")) {
                    format!("{}.{a}{}", &k[..pos], &k[pos + b.len() + 1..])
                } else {
                    k
                };
                (k, v)
            })
            .collect();
    }
}

/// One forward pass: binds stored parameters to graph nodes on first use.
pub struct Ctx<'g, 'p, T: Real> {
    graph: &'g Graph<T>,
    params: &'p ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var<'g, T>>>,
    trainable: bool,
}

impl<'g, 'p, T: Real> Ctx<'g, 'p, T> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(graph: &'g Graph<T>, params: &'p ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            graph,
            params,
            bound: RefCell::new(BTreeMap::new()),
            trainable,
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<Var<'g, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?
            .clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    /// Gradients of every parameter used in this pass.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Fully connected layer over the last axis; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / (self.din as f64).sqrt();
        store.insert(self.weight_name(), uniform(rng, &[self.din, self.dout], bound));
        if self.bias {
            store.insert(self.bias_name(), uniform(rng, &[self.dout], bound));
        }
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight_name(), Tensor::zeros(&[self.din, self.dout]));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.dout]));
        }
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let din = *shape
            .last()
            .ok_or_else(|| Error::Contract("linear on a scalar".into()))?;
        if din != self.din {
            return Err(Error::shape("linear", &shape, &[self.din, self.dout]));
        }
        let x = if shape.len() == 1 { x.reshape(&[1, din])? } else { x };
        let mut y = x.matmul(&ctx.param(&self.weight_name())?)?;
        if self.bias {
            y = y.add(&ctx.param(&self.bias_name())?)?;
        }
        if shape.len() == 1 {
            y = y.reshape(&[self.dout])?;
        }
        Ok(y)
    }
}

/// 2-D convolution layer, weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Stride 1, "same" padding.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn strided(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / ((self.cin * self.k * self.k) as f64).sqrt();
        store.insert(
            self.weight_name(),
            uniform(rng, &[self.cout, self.cin, self.k, self.k], bound),
        );
        store.insert(self.bias_name(), uniform(rng, &[self.cout], bound));
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(
            self.weight_name(),
            Tensor::zeros(&[self.cout, self.cin, self.k, self.k]),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&self.bias_name())?;
        x.conv2d(&w, Some(&b), self.stride, self.pad)
    }
}

/// Layer norm over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "gamma"), Tensor::ones(&[self.dim]));
        store.insert(join(&self.name, "beta"), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = ctx.param(&join(&self.name, "gamma"))?;
        let b = ctx.param(&join(&self.name, "beta"))?;
        x.layer_norm(&g, &b)
    }
}

/// `[B,C,H,W]` to raster-order tokens `[B, H·W, C]`.
pub fn to_tokens<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [B,C,H,W], got {s:?}")));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<'g, T: Real>(x: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("from_tokens", &s, &[h, w]));
    }
    x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new("fc", 2, 3, true);
        store.insert(
            "fc.weight",
            Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        store.insert("fc.bias", Tensor::from_f64(&[3], &[0.5, 0.0, -0.5]).unwrap());
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, true);
        let x = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap());
        let y = lin.forward(&ctx, x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3]);
        assert_eq!(y.value().data(), &[-2.5, -3.0, -3.5]);
    }

    #[test]
    fn missing_parameter_is_checkpoint_error() {
        let store = ParamStore::<f64>::new();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, true);
        assert!(matches!(ctx.param("nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tokens_round_trip() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.constant(uniform(&mut rng, &[2, 3, 4, 5], 1.0));
        let t = to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![2, 20, 3]);
        // token (b=1, y=2, x=3) channel 1
        assert_eq!(t.value().at(&[1, 2 * 5 + 3, 1]), x.value().at(&[1, 1, 2, 3]));
        let back = from_tokens(t, 4, 5).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn swap_prefixes_exchanges_branches() {
        let mut s = ParamStore::<f64>::new();
        s.insert("blocks.0.bright.w", Tensor::scalar(1.0));
        s.insert("blocks.0.sem.w", Tensor::scalar(2.0));
        s.insert("stem.w", Tensor::scalar(3.0));
        s.swap_prefixes("bright", "sem");
        assert_eq!(s.get("blocks.0.bright.w").unwrap().item(), 2.0);
        assert_eq!(s.get("blocks.0.sem.w").unwrap().item(), 1.0);
        assert_eq!(s.get("stem.w").unwrap().item(), 3.0);
    }
}
