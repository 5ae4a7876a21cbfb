use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::NumArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<NumArray>,
    v: Vec<NumArray>,
    step: u64,
}

impl AdamState {
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = &'p NumArray>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (NumArray::zeros(p.rows(), p.cols()), NumArray::zeros(p.rows(), p.cols())))
            .unzip();
        AdamState { config, m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(
    params: &mut [&mut NumArray],
    grads: &[Option<&NumArray>],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (k, p) in params.iter().enumerate() {
        if p.shape() != state.m[k].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {k}: {:?} vs moments {:?}", p.shape(), state.m[k].shape()),
            ));
        }
        if let Some(g) = grads[k] {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        let pd = p.as_mut_slice();
        match grads[k] {
            Some(g) => {
                for (((pi, mi), vi), &gi) in pd.iter_mut().zip(m).zip(v).zip(g.as_slice()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let mh = *mi / bc1;
                    let vh = *vi / bc2;
                    *pi -= lr * mh / (vh.sqrt() + eps);
                }
            }
            None => {
                for ((pi, mi), vi) in pd.iter_mut().zip(m).zip(v) {
                    *mi *= beta1;
                    *vi *= beta2;
                    if *mi != 0.0 {
                        *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = NumArray::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        let g = NumArray::zeros(1, 3);
        adam_step(&mut [&mut p], &[Some(&g)], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn degenerate_betas_give_sign_steps() {
        let cfg = AdamConfig {
            lr: 0.5,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut p = NumArray::from_vec(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let g = NumArray::from_vec(1, 3, vec![2.0, -0.25, 0.0]).unwrap();
        let mut st = AdamState::new(cfg, [&p]);
        adam_step(&mut [&mut p], &[Some(&g)], &mut st).unwrap();
        let expect: Vec<f64> = [0.0, 0.0, 1.0]
            .iter()
            .zip(g.as_slice())
            .map(|(x, gi): (&f64, &f64)| x - 0.5 * gi / (gi.abs() + 1e-8))
            .collect();
        assert_eq!(p.as_slice(), expect.as_slice());
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let mut x = NumArray::from_vec(1, 2, vec![3.0, -2.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&x]);
        let mut steps = 0;
        while x.norm() >= 1e-3 && steps < 500 {
            let g = x.map(|v| 2.0 * v);
            adam_step(&mut [&mut x], &[Some(&g)], &mut st).unwrap();
            steps += 1;
        }
        assert!(x.as_slice().iter().all(|v| v.abs() < 1e-3), "{x:?} after {steps}");
        assert_eq!(st.step(), steps as u64);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = NumArray::zeros(2, 2);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        let g = NumArray::zeros(1, 4);
        assert!(adam_step(&mut [&mut p], &[Some(&g)], &mut st).is_err());
    }
}
