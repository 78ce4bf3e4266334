//! Minimal f64 neural-network stack: tensors, layers, and an optimizer.
//!
//! Everything runs single-threaded in double precision with fixed reduction
//! order, so a given seed reproduces training bit-for-bit on one machine.
//! Layers own their parameters and forward caches; `backward` consumes the
//! most recent forward.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod rng;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use ops::{GlobalAvgPool, Relu, UpsampleNearest};
pub use rng::Rng;

use ndarray::ArrayD;

/// A named-by-path tensor: trainable weight or persistent buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        Param {
            value,
            grad: None,
            trainable: true,
        }
    }

    /// A persistent non-trainable tensor (e.g. batch-norm running stats).
    pub fn buffer(value: ArrayD<f64>) -> Self {
        Param {
            value,
            grad: None,
            trainable: false,
        }
    }

    /// Gradient accumulator, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut ArrayD<f64> {
        if self.grad.is_none() {
            self.grad = Some(ArrayD::zeros(self.value.raw_dim()));
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Anything that owns parameters, visited in a fixed order under
/// slash-separated paths. The visit order defines serialization and
/// optimizer-state layout.
pub trait Module {
    fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param));
}

/// Joins a parent path and a child name.
pub fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}/{name}")
    }
}

/// Number of trainable scalars in a module.
pub fn count_parameters(module: &mut dyn Module) -> usize {
    let mut total = 0usize;
    module.visit("", &mut |_, p| {
        if p.trainable {
            total += p.numel();
        }
    });
    total
}

/// Clears every gradient accumulator in a module.
pub fn zero_grads(module: &mut dyn Module) {
    module.visit("", &mut |_, p| p.zero_grad());
}

/// True when every parameter and buffer is finite.
pub fn all_finite(module: &mut dyn Module) -> bool {
    let mut ok = true;
    module.visit("", &mut |_, p| ok &= p.is_finite());
    ok
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    struct Pair {
        a: Param,
        b: Param,
    }

    impl Module for Pair {
        fn visit(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(path, "a"), &mut self.a);
            f(&join(path, "b"), &mut self.b);
        }
    }

    #[test]
    fn count_skips_buffers() {
        let mut m = Pair {
            a: Param::new(ArrayD::zeros(IxDyn(&[2, 3]))),
            b: Param::buffer(ArrayD::zeros(IxDyn(&[5]))),
        };
        assert_eq!(count_parameters(&mut m), 6);
    }

    #[test]
    fn grad_is_lazy() {
        let mut p = Param::new(ArrayD::zeros(IxDyn(&[4])));
        assert!(p.grad.is_none());
        p.zero_grad();
        assert!(p.grad.is_none());
        p.grad_mut()[[0]] = 1.0;
        p.zero_grad();
        assert_eq!(p.grad.as_ref().unwrap()[[0]], 0.0);
    }

    #[test]
    fn visit_paths_are_prefixed() {
        let mut m = Pair {
            a: Param::new(ArrayD::zeros(IxDyn(&[1]))),
            b: Param::new(ArrayD::zeros(IxDyn(&[1]))),
        };
        let mut seen = Vec::new();
        m.visit("root", &mut |path, _| seen.push(path.to_string()));
        assert_eq!(seen, vec!["root/a", "root/b"]);
    }
}
