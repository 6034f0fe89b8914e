//! Parameterized building blocks: convolution and affine layers with
//! Kaiming-uniform weight init and zero bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Param, Var};
use crate::ops;
use crate::tensor::{Element, Tensor};

fn kaiming_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Clone)]
pub struct Conv2d<E: Element> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            ),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var<E>) -> Var<E> {
        ops::conv2d(x, &self.weight.var(), &self.bias.var(), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<Param<E>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone)]
pub struct Linear<E: Element> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.w"),
                kaiming_uniform(rng, &[out_dim, in_dim], in_dim),
            ),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, x: &Var<E>) -> Var<E> {
        ops::affine(x, &self.weight.var(), &self.bias.var())
    }

    pub fn params(&self) -> Vec<Param<E>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}
