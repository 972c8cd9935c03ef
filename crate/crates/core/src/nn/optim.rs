use super::network::{Gradients, NetworkState};

/// SGD with (optionally Nesterov) momentum, matching the common
/// `v = m·v + g; step = g + m·v` formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub nesterov: bool,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(state: &NetworkState, momentum: f32, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            velocity: state.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, state: &mut NetworkState, grads: &Gradients, lr: f32) {
        let m = self.momentum;
        for ((p, v), g) in state.params_mut().iter_mut().zip(&mut self.velocity).zip(&grads.tensors) {
            for ((w, vel), &gr) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = m * *vel + gr;
                let step = if self.nesterov { gr + m * *vel } else { *vel };
                *w -= lr * step;
            }
        }
    }
}
