//! Executors binding the [`Exec`] block interface to real computation.

use std::collections::HashMap;
use std::rc::Rc;

use crate::blocks::{BlockParams, Exec, BN_EPSILON, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{kernels, ConvSpec, Element, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Records every operation on a [`Graph`]; parameters become leaves on first
/// use. In train mode batch normalisation uses batch statistics and updates
/// the running statistics stored in `params`.
pub struct GraphExec<'a, T: Element> {
    pub graph: Graph<T>,
    params: &'a mut BlockParams<T>,
    leaves: HashMap<String, Var>,
    mode: Mode,
    requires_grad: bool,
}

impl<'a, T: Element> GraphExec<'a, T> {
    pub fn new(params: &'a mut BlockParams<T>, mode: Mode, requires_grad: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            leaves: HashMap::new(),
            mode,
            requires_grad,
        }
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let value = self.params.value(name)?.clone();
        let v = self.graph.leaf(value, self.requires_grad);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created so far, by name.
    pub fn leaves(&self) -> &HashMap<String, Var> {
        &self.leaves
    }

    pub fn into_parts(self) -> (Graph<T>, HashMap<String, Var>) {
        (self.graph, self.leaves)
    }
}

impl<T: Element> Exec for GraphExec<'_, T> {
    type Value = Var;

    fn dims(&self, v: &Var) -> [usize; 4] {
        self.graph.value(*v).dims4("dims").expect("feature maps are rank 4")
    }

    fn conv(&mut self, name: &str, x: &Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(*x, w, b, spec)
    }

    fn conv_transpose(&mut self, name: &str, x: &Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.graph.conv_transpose2d(*x, w, b, spec)
    }

    fn batch_norm(&mut self, name: &str, x: &Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.weight"))?;
        let beta = self.param(&format!("{name}.bias"))?;
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        match self.mode {
            Mode::Train => {
                let (y, cache) = self.graph.batchnorm_train(*x, gamma, beta, BN_EPSILON)?;
                let unbias = cache.count as f64 / (cache.count as f64 - 1.0);
                let batch_mean = cache.batch_mean.clone();
                let batch_var: Vec<f64> = cache.batch_var.iter().map(|v| v * unbias).collect();
                update_running(self.params, &mean_name, &batch_mean)?;
                update_running(self.params, &var_name, &batch_var)?;
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.value(&mean_name)?.clone();
                let rv = self.params.value(&var_name)?.clone();
                self.graph.batchnorm_eval(*x, gamma, beta, &rm, &rv, BN_EPSILON)
            }
        }
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Ok(self.graph.relu(*x))
    }

    fn max_pool(&mut self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.graph.maxpool2d(*x, kernel, stride, padding)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }

    fn upsample(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.graph.upsample_bilinear(*x, out_h, out_w)
    }
}

fn update_running<T: Element>(params: &mut BlockParams<T>, name: &str, batch: &[f64]) -> Result<()> {
    let p = params
        .get_mut(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
    for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
        let old = r.to_f64().unwrap();
        *r = T::lit((1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * b);
    }
    Ok(())
}

/// Tape-free evaluation-mode executor. Intermediate maps are freed as soon
/// as the block code drops them.
pub struct InferExec<'a, T: Element> {
    params: &'a BlockParams<T>,
}

impl<'a, T: Element> InferExec<'a, T> {
    pub fn new(params: &'a BlockParams<T>) -> Self {
        Self { params }
    }
}

impl<T: Element> Exec for InferExec<'_, T> {
    type Value = Rc<Tensor<T>>;

    fn dims(&self, v: &Self::Value) -> [usize; 4] {
        v.dims4("dims").expect("feature maps are rank 4")
    }

    fn conv(&mut self, name: &str, x: &Self::Value, spec: &ConvSpec) -> Result<Self::Value> {
        let w = self.params.value(&format!("{name}.weight"))?;
        let b = if spec.has_bias {
            Some(self.params.value(&format!("{name}.bias"))?)
        } else {
            None
        };
        Ok(Rc::new(kernels::conv2d(x, w, b, spec)?))
    }

    fn conv_transpose(&mut self, name: &str, x: &Self::Value, spec: &ConvSpec) -> Result<Self::Value> {
        let w = self.params.value(&format!("{name}.weight"))?;
        let b = if spec.has_bias {
            Some(self.params.value(&format!("{name}.bias"))?)
        } else {
            None
        };
        Ok(Rc::new(kernels::conv_transpose2d(x, w, b, spec)?))
    }

    fn batch_norm(&mut self, name: &str, x: &Self::Value) -> Result<Self::Value> {
        let p = |s: &str| self.params.value(&format!("{name}.{s}"));
        let (y, _) = kernels::batchnorm2d_eval(x, p("weight")?, p("bias")?, p("running_mean")?, p("running_var")?, BN_EPSILON)?;
        Ok(Rc::new(y))
    }

    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(kernels::relu(x)))
    }

    fn max_pool(&mut self, x: &Self::Value, kernel: usize, stride: usize, padding: usize) -> Result<Self::Value> {
        Ok(Rc::new(kernels::maxpool2d(x, kernel, stride, padding)?.0))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(kernels::add(a, b)?))
    }

    fn upsample(&mut self, x: &Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value> {
        Ok(Rc::new(kernels::upsample_bilinear(x, out_h, out_w)?))
    }
}
