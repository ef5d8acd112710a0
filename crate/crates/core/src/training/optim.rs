use crate::model::Parameters;

/// Linear warmup to `peak`, then inverse square-root decay:
/// `peak · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if warmup == 0 {
        return peak / (step as f64).sqrt();
    }
    let s = step as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Parameters,
    pub second: Parameters,
    /// Number of updates applied so far.
    pub updates: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            updates: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.updates += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.updates as i32);
        let c2 = 1.0 - beta2.powi(self.updates as i32);
        let g = grads.named();
        let m = self.first.named_mut();
        let v = self.second.named_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(g).zip(m).zip(v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_schedule(0, 500, 5e-4), 0.0);
        assert!((lr_schedule(500, 500, 5e-4) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(2000, 500, 5e-4) - 2.5e-4).abs() < 1e-15);
        assert!((lr_schedule(250, 500, 5e-4) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_continuous_and_decays() {
        let w = 500;
        let before = lr_schedule(w - 1, w, 1.0);
        let at = lr_schedule(w, w, 1.0);
        let after = lr_schedule(w + 1, w, 1.0);
        assert!((at - before).abs() < 3.0 / w as f64);
        assert!((at - after).abs() < 3.0 / w as f64);
        let mut prev = at;
        for s in (w + 1)..(20 * w) {
            let lr = lr_schedule(s, w, 1.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
