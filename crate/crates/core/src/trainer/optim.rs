use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::{NamedTensors, Tensor};

/// Adam with bias-corrected moments, kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates applied so far.
    pub t: u64,
    m: NamedTensors<f32>,
    v: NamedTensors<f32>,
}

impl Adam {
    pub fn new(params: &NamedTensors<f32>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`. Parameters are untouched if
    /// any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut NamedTensors<f32>,
        grads: &NamedTensors<f32>,
        lr: f64,
    ) -> Result<()> {
        params.check_same_layout(grads)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient for `{name}`")));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let p = p.data_mut();
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                p[i] = (p[i] as f64 - lr * (mi / c1) / ((vi / c2).sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    pub fn check_layout(&self, params: &NamedTensors<f32>) -> Result<()> {
        params.check_same_layout(&self.m)
    }

    /// Moments as `m/<name>` and `v/<name>`.
    pub fn state(&self) -> Result<NamedTensors<f32>> {
        let mut out = NamedTensors::new();
        for (prefix, store) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in store.iter() {
                out.insert(format!("{prefix}/{name}"), t.clone())?;
            }
        }
        Ok(out)
    }

    pub fn restore(&mut self, state: &NamedTensors<f32>, t: u64) -> Result<()> {
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        for (prefix, store) in [("m", &mut m), ("v", &mut v)] {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in names {
                store.replace(&name, state.get(&format!("{prefix}/{name}"))?.clone())?;
            }
        }
        if state.len() != m.len() + v.len() {
            return Err(Error::Format {
                what: "optimizer state".into(),
                detail: format!("{} tensors, expected {}", state.len(), m.len() + v.len()),
            });
        }
        (self.m, self.v, self.t) = (m, v, t);
        Ok(())
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut NamedTensors<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Element-wise mean of checkpoints with identical layouts, accumulated in
/// f64. Config and step come from the newest input.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Training("no checkpoints to average".into()))?;
    for c in &checkpoints[1..] {
        first.params.check_same_layout(&c.params)?;
    }
    let newest = checkpoints
        .iter()
        .rev()
        .max_by_key(|c| c.step)
        .expect("non-empty");
    let n = checkpoints.len() as f64;
    let mut params = NamedTensors::new();
    for (name, t) in first.params.iter() {
        let mut acc = vec![0f64; t.len()];
        for c in checkpoints {
            for (a, &x) in acc.iter_mut().zip(c.params.get(name)?.data()) {
                *a += x as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        params.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Checkpoint::new(params, newest.config.clone(), newest.step)
}
