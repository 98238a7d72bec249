use crate::numerics::{ParamBlock, Tensor};

/// Adam with bias correction. Row-sparse blocks are updated lazily: only
/// rows touched since the last `zero_grad` move, and their moments decay
/// only when touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params`, which must be passed in the same order every call.
    pub fn step(&mut self, params: &mut [&mut ParamBlock]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter list changed between Adam steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        };
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            match p.touched_rows().map(<[usize]>::to_vec) {
                Some(rows) => {
                    let cols = p.value.cols();
                    for r in rows {
                        let span = r * cols..(r + 1) * cols;
                        let g = p.grad.data()[span.clone()].to_vec();
                        update(
                            &mut p.value.data_mut()[span.clone()],
                            &g,
                            &mut m.data_mut()[span.clone()],
                            &mut v.data_mut()[span],
                        );
                    }
                }
                None => {
                    let ParamBlock { value, grad, .. } = &mut **p;
                    update(value.data_mut(), grad.data(), m.data_mut(), v.data_mut());
                }
            }
        }
    }
}
