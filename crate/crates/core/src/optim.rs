//! Plain optimizers over lists of parameter arrays.

use ndarray::ArrayD;

/// SGD with optional momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Option<Vec<ArrayD<f32>>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayD<f32>], grads: &[ArrayD<f32>]) {
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                p.zip_mut_with(g, |pv, gv| *pv -= self.lr * gv);
            }
            return;
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            v.zip_mut_with(g, |vv, gv| *vv = *vv * self.momentum + gv);
            p.zip_mut_with(v, |pv, vv| *pv -= self.lr * vv);
        }
    }
}

/// Adam with the usual defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Option<Vec<ArrayD<f32>>>,
    v: Option<Vec<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayD<f32>], grads: &[ArrayD<f32>]) {
        self.t += 1;
        let m = self
            .m
            .get_or_insert_with(|| grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect());
        let v = self
            .v
            .get_or_insert_with(|| grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect());
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut())
        {
            mi.zip_mut_with(g, |mv, gv| *mv = *mv * self.beta1 + (1.0 - self.beta1) * gv);
            vi.zip_mut_with(g, |vv, gv| *vv = *vv * self.beta2 + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(p)
                .and(&*mi)
                .and(&*vi)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
