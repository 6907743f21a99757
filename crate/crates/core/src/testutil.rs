use crate::rng::Rng;
use crate::tensor::{numel, Element, Tensor};

pub fn randn<T: Element>(r: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_vec((0..numel(shape)).map(|_| T::cast(r.normal())).collect(), shape).unwrap()
}

pub fn fill<T: Element>(t: &Tensor<T>, v: f64) {
    t.data_mut().iter_mut().for_each(|x| *x = T::cast(v));
}
