use serde::{Deserialize, Serialize};

use super::{Gradients, Layer, Network, ParamGrad};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// `lr(iter) = base · (1 + gamma · iter)^(−power)`; `gamma = 0` keeps it fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    pub gamma: f32,
    pub power: f32,
}

impl LrSchedule {
    pub fn fixed(base: f32) -> Self {
        LrSchedule {
            base,
            gamma: 0.0,
            power: 0.0,
        }
    }

    pub fn at(&self, iter: u64) -> f32 {
        if self.gamma == 0.0 {
            return self.base;
        }
        (self.base as f64 * (1.0 + self.gamma as f64 * iter as f64).powf(-self.power as f64)) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: LrSchedule {
                base: 0.01,
                gamma: 1e-4,
                power: 0.75,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers plus the iteration counter driving the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub iter: u64,
    velocity: Vec<Option<ParamGrad>>,
}

impl SgdState {
    pub fn new(net: &Network, config: SgdConfig) -> Self {
        let velocity = (0..net.layers().len())
            .map(|i| {
                net.param_sizes(i).map(|(w, b)| ParamGrad {
                    weight: vec![0.0; w],
                    bias: vec![0.0; b],
                })
            })
            .collect();
        SgdState {
            config,
            iter: 0,
            velocity,
        }
    }

    pub fn learning_rate(&self) -> f32 {
        self.config.lr.at(self.iter)
    }

    pub fn velocity(&self, idx: usize) -> Option<&ParamGrad> {
        self.velocity.get(idx).and_then(Option::as_ref)
    }
}

/// Additional per-layer weight gradient (regularizers); biases are never touched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtraGrad {
    pub layers: Vec<Option<Tensor4>>,
}

impl ExtraGrad {
    pub fn for_network(net: &Network) -> Self {
        ExtraGrad {
            layers: vec![None; net.layers().len()],
        }
    }
}

/// `v ← μv − lr(g + wd·w + extra)`, `w ← w + v`; biases get no decay. Masked
/// convolution coordinates are re-zeroed in both weights and velocity.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut SgdState,
    extra: Option<&ExtraGrad>,
) -> Result<()> {
    let n = net.layers().len();
    if grads.layers.len() != n || state.velocity.len() != n {
        return Err(Error::dim("gradients or optimizer state built for another network"));
    }
    if let Some(e) = extra {
        if e.layers.len() != n {
            return Err(Error::dim("extra gradient built for another network"));
        }
    }
    let lr = state.learning_rate();
    let SgdConfig {
        momentum,
        weight_decay,
        ..
    } = state.config;
    for idx in 0..n {
        let Some((wsize, bsize)) = net.param_sizes(idx) else {
            continue;
        };
        let g = grads.layers[idx]
            .as_ref()
            .ok_or_else(|| Error::dim(format!("missing gradient for layer {idx}")))?;
        let v = state.velocity[idx].as_mut().expect("velocity for parametric layer");
        if g.weight.len() != wsize || g.bias.len() != bsize {
            return Err(Error::dim(format!("gradient shape mismatch at layer {idx}")));
        }
        let extra_w = match extra.and_then(|e| e.layers[idx].as_ref()) {
            Some(t) if t.data().len() != wsize => {
                return Err(Error::dim(format!("extra gradient shape mismatch at layer {idx}")))
            }
            Some(t) => Some(t.data()),
            None => None,
        };
        let (w, b) = net.params_mut(idx).expect("parametric layer");
        for k in 0..wsize {
            let mut step = g.weight[k];
            if let Some(e) = extra_w {
                step += e[k];
            }
            step += weight_decay * w[k];
            v.weight[k] = momentum * v.weight[k] - lr * step;
            w[k] += v.weight[k];
        }
        for k in 0..bsize {
            v.bias[k] = momentum * v.bias[k] - lr * g.bias[k];
            b[k] += v.bias[k];
        }
        if let Layer::Conv(c) = &mut net.layers_mut()[idx] {
            let per_t = c.kernel.group_stride();
            let masks = c.pattern.masks();
            for (row, vrow) in c
                .kernel
                .data_mut()
                .chunks_mut(per_t)
                .zip(v.weight.chunks_mut(per_t))
            {
                for ((wv, vv), &live) in row.iter_mut().zip(vrow.iter_mut()).zip(masks) {
                    if !live {
                        *wv = 0.0;
                        *vv = 0.0;
                    }
                }
            }
        }
    }
    state.iter += 1;
    Ok(())
}
