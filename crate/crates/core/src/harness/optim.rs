//! Noam learning-rate schedule, AdamW and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::Contract(format!(
            "noam_lr needs step ≥ 1 and warmup ≥ 1 (step {step}, warmup {warmup})"
        )));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Whether decoupled weight decay applies to each parameter.
    pub decay: Vec<bool>,
}

impl<T: Real> AdamState<T> {
    /// Decay applies to matrices, except the SSM `A_log`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let ids: Vec<ParamId> = store.ids().collect();
        AdamState {
            step: 0,
            m: ids
                .iter()
                .map(|&i| Tensor::zeros(store.get(i).shape()))
                .collect(),
            v: ids
                .iter()
                .map(|&i| Tensor::zeros(store.get(i).shape()))
                .collect(),
            decay: ids
                .iter()
                .map(|&i| store.get(i).ndim() >= 2 && !store.name(i).ends_with(".a_log"))
                .collect(),
        }
    }
}

/// Outcome of one optimiser call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// Decoupled-decay Adam with bias correction. Missing gradients count as
/// zero. A non-finite gradient anywhere skips the whole step.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> StepOutcome {
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay = if state.decay[k] {
            T::of(1.0 - lr * cfg.weight_decay)
        } else {
            T::one()
        };
        let p = store.get_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = grads.get(k).and_then(|g| g.as_ref());
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / T::of(bc1);
            let vh = v[j] / T::of(bc2);
            p[j] = p[j] * decay - T::of(lr) * mh / (vh.sqrt() + eps);
        }
    }
    StepOutcome::Applied
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_examples() {
        let peak = noam_lr(4000, 1024, 4000).unwrap();
        assert!((peak - 1024f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!((noam_lr(2000, 1024, 4000).unwrap() - peak / 2.0).abs() < 1e-15);
        let late = noam_lr(8000, 1024, 4000).unwrap();
        assert!((late - 3.494e-4).abs() < 1e-6);
        assert!(matches!(noam_lr(0, 8, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn noam_rises_then_falls() {
        let lrs: Vec<f64> = (1..=200).map(|s| noam_lr(s, 64, 50).unwrap()).collect();
        assert!(lrs[..50].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[49..].windows(2).all(|w| w[1] < w[0]));
    }

    fn one_param(x: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let n = x.len();
        let id = s.add("p", Tensor::new([1, n], x).unwrap());
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let (mut s, id) = one_param(vec![1.0, -2.0]);
        let mut st = AdamState::new(&s);
        adamw_step(
            &mut s,
            &[Some(Tensor::zeros([1, 2]))],
            &mut st,
            0.1,
            &AdamConfig::default(),
        );
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (mut s, id) = one_param(vec![0.5, 0.5]);
        let mut st = AdamState::new(&s);
        let g = Tensor::new([1, 2], vec![0.2, -3.0]).unwrap();
        let cfg = AdamConfig::default();
        adamw_step(&mut s, &[Some(g.clone())], &mut st, 0.01, &cfg);
        for (p, g) in s.get(id).data().iter().zip(g.data()) {
            let want = 0.5 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let (mut s, id) = one_param(vec![1.0, 1.0]);
        let mut st = AdamState::new(&s);
        let g = Tensor::new([1, 2], vec![f64::NAN, 1.0]).unwrap();
        let out = adamw_step(&mut s, &[Some(g)], &mut st, 0.1, &AdamConfig::default());
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let target = [0.5, -0.3, 0.2];
        let (mut s, id) = one_param(vec![0.0; 3]);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        for k in 0..100 {
            let p = s.get(id).data().to_vec();
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            let lr = 0.1 * 0.97f64.powi(k);
            adamw_step(
                &mut s,
                &[Some(Tensor::new([1, 3], g).unwrap())],
                &mut st,
                lr,
                &cfg,
            );
        }
        for (x, t) in s.get(id).data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::<f64>::new([2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let g0 = g[0].as_ref().unwrap();
        assert!((g0.data()[0] - 0.6).abs() < 1e-12 && (g0.data()[1] - 0.8).abs() < 1e-12);
    }
}
