use sar_vit::params::decays;
use sar_vit::Params;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Params,
    pub v: Params,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        let decay = params.layout().iter().map(|(n, s)| decays(n, s)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: params.zeros_like(), v: params.zeros_like(), decay }
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`, decay only on matrices.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g = grads.flatten();
        let mut m = self.m.flatten();
        let mut v = self.v.flatten();
        for ((m, v), g) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let (mut offset, mut idx) = (0, 0);
        let (eps, wd, decay) = (self.eps, self.weight_decay, &self.decay);
        params.for_each_mut(|_, p| {
            let wd = if decay[idx] { wd } else { 0.0 };
            for (i, x) in p.iter_mut().enumerate() {
                let mh = m[offset + i] / c1;
                let vh = v[offset + i] / c2;
                *x -= lr * (mh / (vh.sqrt() + eps) + wd * *x);
            }
            offset += p.len();
            idx += 1;
        });
        unflatten(&mut self.m, &m);
        unflatten(&mut self.v, &v);
    }
}

pub(crate) fn unflatten(p: &mut Params, flat: &[f64]) {
    let mut offset = 0;
    p.for_each_mut(|_, v| {
        v.copy_from_slice(&flat[offset..offset + v.len()]);
        offset += v.len();
    });
    assert_eq!(offset, flat.len(), "parameter layouts differ");
}

/// Half-cosine decay from `lr` at step 0 to `lr * min_ratio` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr: f64,
    pub min_ratio: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr;
        }
        let frac = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        let min = self.lr * self.min_ratio;
        min + (self.lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
