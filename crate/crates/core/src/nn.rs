//! Parameter storage, basic layers and the Adam optimizer.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds a parameter into `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph, id: ParamId) -> Var<'g> {
        graph.param(id.0, self.tensors[id.0].clone())
    }

    /// Replaces every tensor, checking names and shapes match.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                named.len()
            )));
        }
        for (slot, (name, tensor)) in named.into_iter().enumerate() {
            if name != self.names[slot] {
                return Err(Error::InvalidArgument(format!(
                    "parameter {slot}: expected {}, found {name}",
                    self.names[slot]
                )));
            }
            if tensor.shape() != self.tensors[slot].shape() {
                return Err(Error::shape(self.tensors[slot].shape(), tensor.shape()));
            }
            self.tensors[slot] = tensor;
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[output, input], bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(&[output], bound, rng)),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.linear(store.bind(g, self.weight), store.bind(g, self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[output, input, kernel, kernel], bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(&[output], bound, rng)),
            padding: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.conv2d(store.bind(g, self.weight), store.bind(g, self.bias), self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.group_norm(self.groups, store.bind(g, self.gamma), store.bind(g, self.beta), Self::EPS)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, in parameter order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !ok(&m, &self.m) || !ok(&v, &self.v) {
            return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. Missing gradients count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, param) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let grad = grads[slot].as_ref();
            for i in 0..param.len() {
                let gv = grad.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gv;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gv * gv;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                param.data_mut()[i] -= update;
            }
        }
    }
}
