use super::{Init, Module, Param};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d<E: Element = f32> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut Init,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init.kaiming_uniform(vec![c_out, c_in, kernel, kernel], fan_in),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(name: &str, c_in: usize, c_out: usize, init: &mut Init) -> Self {
        Self::new(name, c_in, c_out, 3, 1, 1, init)
    }

    pub fn pointwise(name: &str, c_in: usize, c_out: usize, init: &mut Init) -> Self {
        Self::new(name, c_in, c_out, 1, 1, 0, init)
    }

    /// Zero weights and bias, for layers that close a residual branch.
    pub fn zeroed(name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(vec![c_out, c_in, kernel, kernel])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(self.weight.value(), Some(self.bias.value()), self.stride, self.padding)
    }
}

impl<E: Element> Module<E> for Conv2d<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<E: Element = f32> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub groups: usize,
}

impl<E: Element> GroupNorm<E> {
    pub const EPS: f64 = 1e-5;

    /// Groups of `s` channels, `s` the largest divisor of `channels` not
    /// exceeding 8.
    pub fn new(name: &str, channels: usize) -> Self {
        let size = (1..=channels.min(8)).rev().find(|s| channels % s == 0).unwrap_or(1);
        let groups = channels / size;
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.group_norm(self.gamma.value(), self.beta.value(), self.groups, Self::EPS)
    }
}

impl<E: Element> Module<E> for GroupNorm<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<E: Element = f32> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), init.kaiming_uniform(vec![d_out, d_in], d_in)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.linear(self.weight.value(), Some(self.bias.value()))
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
