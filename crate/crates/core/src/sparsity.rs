//! Kernel groups `Γ_ijs = K(i, j, s, :)` and the regularizers acting on them.

use crate::error::{Error, Result};
use crate::lowering::{GroupCoord, SparsityPatternSet};
use crate::tensor::Tensor4;

/// Group norms below this are treated as zero when forming `K / ‖Γ‖`.
pub const NORM_GUARD: f32 = 1e-12;

/// `‖Γ_ijs‖₂` for every group, laid out `[(s * d + i) * d + j]` like pattern masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormField {
    d: usize,
    in_maps: usize,
    values: Vec<f32>,
}

impl GroupNormField {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, s: usize, i: usize, j: usize) -> f32 {
        self.values[(s * self.d + i) * self.d + j]
    }

    /// Norms of groups still alive under `q`.
    pub fn live_values(&self, q: &SparsityPatternSet) -> Vec<f32> {
        self.values
            .iter()
            .zip(q.masks())
            .filter(|(_, &live)| live)
            .map(|(&v, _)| v)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    L21,
    TruncatedL21,
    L1,
}

impl std::str::FromStr for RegularizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l21" => Ok(RegularizerMode::L21),
            "truncated_l21" => Ok(RegularizerMode::TruncatedL21),
            "l1" => Ok(RegularizerMode::L1),
            other => Err(Error::input(format!("unknown regularizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegularizerConfig {
    pub lambda: f32,
    pub theta: f32,
    pub mode: RegularizerMode,
}

impl RegularizerConfig {
    pub fn new(mode: RegularizerMode, lambda: f32, theta: f32) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(theta >= 0.0) {
            return Err(Error::input(format!("theta must be >= 0, got {theta}")));
        }
        Ok(RegularizerConfig {
            lambda,
            theta,
            mode,
        })
    }

    pub fn l21(lambda: f32) -> Result<Self> {
        Self::new(RegularizerMode::L21, lambda, f32::INFINITY)
    }

    pub fn l1(lambda: f32) -> Result<Self> {
        Self::new(RegularizerMode::L1, lambda, f32::INFINITY)
    }

    pub fn truncated(lambda: f32, theta: f32) -> Result<Self> {
        Self::new(RegularizerMode::TruncatedL21, lambda, theta)
    }

    pub fn gradient(&self, k: &Tensor4) -> Tensor4 {
        match self.mode {
            RegularizerMode::L21 => l21_grad(k, self.lambda),
            RegularizerMode::TruncatedL21 => truncated_l21_grad(k, self.lambda, self.theta),
            RegularizerMode::L1 => l1_grad(k, self.lambda),
        }
    }

    pub fn penalty(&self, k: &Tensor4) -> f64 {
        match self.mode {
            RegularizerMode::L21 => l21_penalty(k, self.lambda),
            RegularizerMode::TruncatedL21 => {
                let n = group_norms(k);
                self.lambda as f64
                    * n.values
                        .iter()
                        .map(|&v| v.min(self.theta) as f64)
                        .sum::<f64>()
            }
            RegularizerMode::L1 => {
                self.lambda as f64 * k.data().iter().map(|v| v.abs() as f64).sum::<f64>()
            }
        }
    }
}

fn group_norms_f64(k: &Tensor4) -> Vec<f64> {
    let per_t = k.group_stride();
    let mut sq = vec![0.0f64; per_t];
    for row in k.data().chunks(per_t) {
        for (acc, &v) in sq.iter_mut().zip(row) {
            *acc += v as f64 * v as f64;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn group_norms(k: &Tensor4) -> GroupNormField {
    GroupNormField {
        d: k.d(),
        in_maps: k.in_maps(),
        values: group_norms_f64(k).into_iter().map(|v| v as f32).collect(),
    }
}

/// `λ Σ ‖Γ_ijs‖₂`.
pub fn l21_penalty(k: &Tensor4, lambda: f32) -> f64 {
    lambda as f64 * group_norms_f64(k).iter().sum::<f64>()
}

fn scaled_groups(k: &Tensor4, lambda: f32, keep: impl Fn(f32) -> bool) -> Tensor4 {
    let norms = group_norms(k);
    let per_t = k.group_stride();
    let scale: Vec<f32> = norms
        .values
        .iter()
        .map(|&n| if n > NORM_GUARD && keep(n) { lambda / n } else { 0.0 })
        .collect();
    let data = k
        .data()
        .chunks(per_t)
        .flat_map(|row| row.iter().zip(&scale).map(|(&v, &c)| v * c))
        .collect();
    Tensor4::from_vec(k.d(), k.in_maps(), k.out_maps(), data).expect("same shape")
}

/// `λ K / ‖Γ‖`, zero on groups at the origin.
pub fn l21_grad(k: &Tensor4, lambda: f32) -> Tensor4 {
    scaled_groups(k, lambda, |_| true)
}

/// Gradient of `λ Σ min(‖Γ‖, θ)`: the group-lasso gradient for `‖Γ‖ < θ`, zero otherwise.
pub fn truncated_l21_grad(k: &Tensor4, lambda: f32, theta: f32) -> Tensor4 {
    scaled_groups(k, lambda, |n| n < theta)
}

/// `λ sign(K)` with `sign(0) = 0`.
pub fn l1_grad(k: &Tensor4, lambda: f32) -> Tensor4 {
    let data = k
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                lambda
            } else if v < 0.0 {
                -lambda
            } else {
                0.0
            }
        })
        .collect();
    Tensor4::from_vec(k.d(), k.in_maps(), k.out_maps(), data).expect("same shape")
}

/// Zero every `K(i, j, s, :)` whose mask bit is off.
pub fn apply_pattern(k: &mut Tensor4, q: &SparsityPatternSet) {
    let per_t = k.group_stride();
    for row in k.data_mut().chunks_mut(per_t) {
        for (v, &live) in row.iter_mut().zip(q.masks()) {
            if !live {
                *v = 0.0;
            }
        }
    }
}

/// Number of groups removed when pruning `total` groups down to density `tau`.
pub fn pruned_count(total: usize, tau: f64) -> usize {
    // Tolerate representation error so that e.g. 500·(1−0.95) counts as 25.
    let raw = total as f64 * (1.0 - tau);
    ((raw + 1e-9).floor() as usize).min(total)
}

/// Zero the `floor(d²S(1−τ))` smallest-norm groups of `k` and return the surviving pattern.
pub fn prune_smallest_groups(k: &mut Tensor4, tau: f64) -> Result<SparsityPatternSet> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::input(format!("density must lie in [0, 1], got {tau}")));
    }
    let norms = group_norms(k);
    let d = k.d();
    let mut order: Vec<(f32, GroupCoord)> = Vec::with_capacity(norms.values.len());
    for s in 0..k.in_maps() {
        for i in 0..d {
            for j in 0..d {
                order.push((norms.get(s, i, j), GroupCoord { s, i, j }));
            }
        }
    }
    // Stable sort on norm alone keeps the (s, i, j) order among ties.
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut q = SparsityPatternSet::full(d, k.in_maps());
    for (_, c) in order.iter().take(pruned_count(order.len(), tau)) {
        q.set(c.s, c.i, c.j, false);
    }
    apply_pattern(k, &q);
    Ok(q)
}

/// Lower empirical quantile: the smallest `v` in `norms` with at least
/// `fraction` of the values `≤ v`.
pub fn quantile_threshold(norms: &[f32], fraction: f64) -> Result<f32> {
    if norms.is_empty() {
        return Err(Error::input("quantile of an empty norm collection"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!("quantile fraction must lie in [0, 1], got {fraction}")));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(sorted[quantile_rank(sorted.len(), fraction) - 1])
}

/// 1-based rank selected by [`quantile_threshold`] in a collection of `m` values.
pub(crate) fn quantile_rank(m: usize, fraction: f64) -> usize {
    ((fraction * m as f64 - 1e-9).ceil() as usize).clamp(1, m)
}
