//! Training-time samplers for the interpolation scale and the position offset.
//!
//! Each iteration draws a scale `g` from `{1, …, g_max}` and then an offset
//! `t` from `[0, g·L − R]`, the headroom between the interpolated window and
//! the trained window. The first `sink_count` positions always keep offset 0.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rope::{OffsetMap, RopeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDistribution {
    /// Uniform over `{1, …, g_max}`.
    Uniform,
    /// Always the configured `fixed_scale` (the "no augmentation on g" ablation).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetDistribution {
    /// Uniform over `{0, …, t_max}`.
    Uniform,
    /// Always 0 (the "no augmentation on t" ablation).
    Zero,
}

impl FromStr for ScaleDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown scale distribution `{other}`"))),
        }
    }
}

impl FromStr for OffsetDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown offset distribution `{other}`"))),
        }
    }
}

impl fmt::Display for ScaleDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Fixed => "fixed",
        })
    }
}

impl fmt::Display for OffsetDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub g_max: u32,
    pub scale_distribution: ScaleDistribution,
    /// Scale used when `scale_distribution` is `Fixed`.
    pub fixed_scale: u32,
    pub offset_distribution: OffsetDistribution,
    pub sink_count: usize,
    /// Pretrained context window `L`.
    pub base_window: usize,
    /// Fine-tuning sequence length `R`.
    pub trained_window: usize,
    /// Draw a separate plan for every sequence of a batch instead of one per
    /// iteration.
    pub per_sample: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            g_max: 20,
            scale_distribution: ScaleDistribution::Uniform,
            fixed_scale: 1,
            offset_distribution: OffsetDistribution::Uniform,
            sink_count: 4,
            base_window: 128,
            trained_window: 128,
            per_sample: false,
        }
    }
}

impl AugmentPolicy {
    /// The degenerate policy that always yields plain RoPE.
    pub fn standard(window: usize) -> Self {
        Self {
            g_max: 1,
            base_window: window,
            trained_window: window,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_max < 1 {
            return Err(Error::Config("policy.g_max must be >= 1".into()));
        }
        if self.base_window < 1 || self.trained_window < 1 {
            return Err(Error::Config("windows must be >= 1".into()));
        }
        if self.scale_distribution == ScaleDistribution::Fixed && !(1..=self.g_max).contains(&self.fixed_scale) {
            return Err(Error::Constraint {
                first: "policy.fixed_scale",
                second: "policy.g_max",
                msg: format!("fixed scale {} outside 1..={}", self.fixed_scale, self.g_max),
            });
        }
        if self.trained_window as u64 > self.g_max as u64 * self.base_window as u64 {
            return Err(Error::Constraint {
                first: "train.trained_window",
                second: "policy.g_max",
                msg: format!(
                    "R = {} exceeds g_max·L = {}·{}",
                    self.trained_window, self.g_max, self.base_window
                ),
            });
        }
        Ok(())
    }

    /// Largest scale this policy can emit.
    pub fn max_scale(&self) -> u32 {
        match self.scale_distribution {
            ScaleDistribution::Uniform => self.g_max,
            ScaleDistribution::Fixed => self.fixed_scale,
        }
    }
}

/// One iteration's RoPE modification.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    pub scale: u32,
    pub body_offset: u64,
    pub offsets: OffsetMap,
}

impl IterationPlan {
    pub fn rope(&self, head_dim: usize, base: f64) -> Result<RopeParams> {
        RopeParams::new(head_dim, base, self.scale as f64, self.offsets.clone())
    }
}

pub fn sample_scale<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> u32 {
    match policy.scale_distribution {
        ScaleDistribution::Uniform => rng.random_range(1..=policy.g_max.max(1)),
        ScaleDistribution::Fixed => policy.fixed_scale,
    }
}

/// `max(0, g·L − R)`: how far the trained window can slide inside the
/// interpolated window `g·L`.
pub fn max_offset(scale: u32, policy: &AugmentPolicy) -> u64 {
    (scale as u64 * policy.base_window as u64).saturating_sub(policy.trained_window as u64)
}

pub fn sample_offset<R: Rng + ?Sized>(policy: &AugmentPolicy, t_max: u64, rng: &mut R) -> u64 {
    match policy.offset_distribution {
        OffsetDistribution::Uniform if t_max > 0 => rng.random_range(0..=t_max),
        _ => 0,
    }
}

pub fn build_iteration_plan<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> IterationPlan {
    let scale = sample_scale(policy, rng);
    let body_offset = sample_offset(policy, max_offset(scale, policy), rng);
    IterationPlan {
        scale,
        body_offset,
        offsets: OffsetMap::with_sinks(policy.trained_window, policy.sink_count, body_offset),
    }
}

/// Plans for one batch: a single shared plan, or one per sequence when the
/// policy asks for per-sample augmentation.
pub fn plans_for_batch<R: Rng + ?Sized>(policy: &AugmentPolicy, batch: usize, rng: &mut R) -> Vec<IterationPlan> {
    if policy.per_sample {
        (0..batch).map(|_| build_iteration_plan(policy, rng)).collect()
    } else {
        vec![build_iteration_plan(policy, rng); batch]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk(g_max: u32) -> AugmentPolicy {
        AugmentPolicy {
            g_max,
            ..AugmentPolicy::default()
        }
    }

    #[test]
    fn singleton_scale_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = desk(1);
        for _ in 0..100 {
            let plan = build_iteration_plan(&p, &mut rng);
            assert_eq!((plan.scale, plan.body_offset), (1, 0));
            assert!(plan.offsets.is_all_zero());
        }
    }

    #[test]
    fn max_offset_examples() {
        let big = AugmentPolicy {
            base_window: 4096,
            trained_window: 4096,
            ..desk(20)
        };
        assert_eq!(max_offset(5, &big), 16384);
        assert_eq!(5 * 4096, 20480);
        assert_eq!(max_offset(1, &big), 0);
        assert_eq!(max_offset(8, &desk(8)), 896);
    }

    #[test]
    fn offset_sampler_range_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = desk(8);
        assert!((0..100).all(|_| sample_offset(&p, 0, &mut rng) == 0));
        let n = 200_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let t = sample_offset(&p, 16384, &mut rng);
            assert!(t <= 16384);
            sum += t;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 8192.0).abs() < 0.01 * 8192.0, "{mean}");
    }

    #[test]
    fn sinks_are_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = desk(8);
        for _ in 0..1000 {
            let plan = build_iteration_plan(&p, &mut rng);
            assert_eq!(plan.offsets.get(2), 0);
            for m in 0..p.trained_window {
                let want = if m < 4 { 0 } else { plan.body_offset };
                assert_eq!(plan.offsets.get(m), want);
            }
        }
    }

    #[test]
    fn seeded_plans_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = desk(8);
        for _ in 0..10_000 {
            let plan = build_iteration_plan(&p, &mut rng);
            assert!((1..=8).contains(&plan.scale));
            assert!(plan.body_offset <= (plan.scale as u64 - 1) * 128);
            for m in 0..p.trained_window {
                let pos = (m as u64 + plan.offsets.get(m)) as f64 / plan.scale as f64;
                assert!(pos < p.base_window as f64);
            }
        }
    }

    #[test]
    fn determinism_per_seed() {
        let p = desk(20);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| build_iteration_plan(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn ablation_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let no_t = AugmentPolicy {
            offset_distribution: OffsetDistribution::Zero,
            ..desk(8)
        };
        let no_g = AugmentPolicy {
            scale_distribution: ScaleDistribution::Fixed,
            fixed_scale: 2,
            ..desk(8)
        };
        for _ in 0..500 {
            assert_eq!(build_iteration_plan(&no_t, &mut rng).body_offset, 0);
            let plan = build_iteration_plan(&no_g, &mut rng);
            assert_eq!(plan.scale, 2);
            assert!(plan.body_offset <= 128);
        }
    }

    #[test]
    fn per_sample_plans_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shared = plans_for_batch(&desk(8), 4, &mut rng);
        assert!(shared.windows(2).all(|w| w[0] == w[1]));
        let p = AugmentPolicy {
            per_sample: true,
            ..desk(8)
        };
        let plans = plans_for_batch(&p, 16, &mut rng);
        assert!(plans.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn validation() {
        assert!(AugmentPolicy {
            trained_window: 256,
            ..desk(1)
        }
        .validate()
        .is_err());
        assert!("gamma".parse::<ScaleDistribution>().is_err());
        assert!(AugmentPolicy {
            scale_distribution: ScaleDistribution::Fixed,
            fixed_scale: 9,
            ..desk(8)
        }
        .validate()
        .is_err());
        assert!(desk(20).validate().is_ok());
    }
}
