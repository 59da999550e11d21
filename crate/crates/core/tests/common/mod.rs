//! Plain-tensor reference helpers shared by the integration tests. Every
//! oracle here is written against `Tensor` values directly, never through
//! the tape.
#![allow(dead_code)]

use eavl::nn::Builder;
use eavl::tensor::{kernels, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// Builds a module into a fresh store.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> eavl::tensor::Result<M>) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = f(&mut Builder::new(&mut store, &mut r)).unwrap();
    (store, m)
}

pub fn param(ps: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    let id = ps.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.value(id).clone()
}

pub fn set(ps: &mut ParamStore<f64>, name: &str, value: Tensor<f64>) {
    let id = ps.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.set_value(id, value).unwrap();
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

/// `x·W` over the last axis.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let c = *shape.last().unwrap();
    let rows = x.numel() / c;
    let y = kernels::matmul(&x.reshape(&[rows, c]).unwrap(), w).unwrap();
    let mut out = shape;
    *out.last_mut().unwrap() = w.shape()[1];
    y.reshape(&out).unwrap()
}

pub fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, |x, y| x * y).unwrap()
}

/// Multiplies every row of the last axis by the vector `v`.
pub fn mul_rows(a: &Tensor<f64>, v: &[f64]) -> Tensor<f64> {
    let c = v.len();
    let data: Vec<f64> = a.data().iter().enumerate().map(|(i, x)| x * v[i % c]).collect();
    t64(a.shape(), &data)
}

/// Concatenation along the last axis.
pub fn concat_last(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let lead: Vec<usize> = parts[0].shape()[..parts[0].rank() - 1].to_vec();
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let mut data = Vec::new();
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead;
    shape.push(widths.iter().sum());
    t64(&shape, &data)
}

pub fn conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    kernels::conv2d(x, k, b).unwrap()
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b).unwrap()
}
