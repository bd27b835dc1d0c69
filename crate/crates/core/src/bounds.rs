//! Monte Carlo evaluation of the attention attack's advantage lower bound and of
//! the separation condition under which it applies.

use rand::Rng;
use rayon::prelude::*;

use crate::attack_attn::compute_bar_delta;
use crate::data::{measure_stats, DataSource, TokenDistribution};
use crate::error::{AmiError, Result};
use crate::rng::{child_rng, Stream};

pub const DEFAULT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCheck {
    pub rhs: f64,
    pub ratio: f64,
    pub holds: bool,
}

/// `delta` against `2/(beta l) + ln(2 (l-1) l beta M^2) / beta`.
pub fn check_condition(delta: f64, beta: f64, l_x: usize, m: f64) -> ConditionCheck {
    let l = l_x as f64;
    let rhs = 2.0 / (beta * l) + (2.0 * (l - 1.0) * l * beta * m * m).ln() / beta;
    if !(rhs > 0.0) {
        return ConditionCheck { rhs, ratio: f64::INFINITY, holds: true };
    }
    let ratio = delta / rhs;
    ConditionCheck { rhs, ratio, holds: ratio >= 1.0 }
}

/// `p + p^(2 n l) - p_box - 1`; negative values mean the bound is vacuous.
pub fn eval_lower_bound(p_proj: f64, p_box: f64, n: usize, l_x: usize) -> f64 {
    p_proj + p_proj.powf((2 * n * l_x) as f64) - p_box - 1.0
}

/// Mean token of the distribution, known by symmetry.
pub fn distribution_center(dist: TokenDistribution, d_x: usize) -> Vec<f64> {
    match dist {
        TokenDistribution::OneHot => vec![1.0 / d_x as f64; d_x],
        TokenDistribution::Spherical | TokenDistribution::Gaussian => vec![0.0; d_x],
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Paired samples: the projection `|x.v| / |v|` of independent tokens and the
/// box distance `max_i |x_i - c_i|` of `x` to the distribution center.
/// One-hot pairs are conditioned on `x != v`.
#[derive(Debug, Clone)]
pub struct BoundSamples {
    pub projections: Vec<f64>,
    pub box_distances: Vec<f64>,
}

impl BoundSamples {
    pub fn draw<R: Rng + ?Sized>(dist: TokenDistribution, d_x: usize, samples: usize, rng: &mut R) -> Result<Self> {
        if samples == 0 {
            return Err(AmiError::Config("bounds need at least one sample".into()));
        }
        if dist == TokenDistribution::OneHot && d_x < 2 {
            return Err(AmiError::Config("distinct one-hot pairs need d_x >= 2".into()));
        }
        let center = distribution_center(dist, d_x);
        let mut x = vec![0.0; d_x];
        let mut v = vec![0.0; d_x];
        let mut projections = Vec::with_capacity(samples);
        let mut box_distances = Vec::with_capacity(samples);
        for _ in 0..samples {
            dist.sample_token(rng, &mut x);
            let vn = loop {
                dist.sample_token(rng, &mut v);
                let vn = norm(&v);
                if vn > 0.0 && !(dist == TokenDistribution::OneHot && v == x) {
                    break vn;
                }
            };
            let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            projections.push(dot.abs() / vn);
            box_distances.push(x.iter().zip(&center).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max));
        }
        Ok(BoundSamples { projections, box_distances })
    }

    pub fn p_proj(&self, delta_arg: f64) -> f64 {
        fraction_at_most(&self.projections, delta_arg)
    }

    pub fn p_box(&self, half_width: f64) -> f64 {
        fraction_at_most(&self.box_distances, half_width)
    }
}

fn fraction_at_most(values: &[f64], t: f64) -> f64 {
    values.iter().filter(|&&v| v <= t).count() as f64 / values.len() as f64
}

/// Probability that two independent tokens have projection at most `delta_arg`.
pub fn estimate_p_proj<R: Rng + ?Sized>(dist: TokenDistribution, d_x: usize, delta_arg: f64, samples: usize, rng: &mut R) -> Result<f64> {
    Ok(BoundSamples::draw(dist, d_x, samples, rng)?.p_proj(delta_arg))
}

/// Probability that a token lies in the cube of half-width `half_width` around the mean token.
pub fn estimate_p_box<R: Rng + ?Sized>(dist: TokenDistribution, d_x: usize, half_width: f64, samples: usize, rng: &mut R) -> Result<f64> {
    Ok(BoundSamples::draw(dist, d_x, samples, rng)?.p_box(half_width))
}

/// Three binomial standard errors.
pub fn error_bar(p: f64, samples: usize) -> f64 {
    3.0 * (p * (1.0 - p) / samples as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaRule {
    /// 10 for one-hot and spherical tokens, `10 / d_x` for Gaussian ones.
    Table,
    Fixed(f64),
}

impl BetaRule {
    pub fn beta(&self, dist: TokenDistribution, d_x: usize) -> f64 {
        match (self, dist) {
            (BetaRule::Fixed(b), _) => *b,
            (BetaRule::Table, TokenDistribution::Gaussian) => 10.0 / d_x as f64,
            (BetaRule::Table, _) => 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    /// Mean separation of the distribution: `d_x` for Gaussian tokens, 1 otherwise.
    Expected,
    /// Minimum separation measured on a generated dataset.
    EmpiricalMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sources: Vec<TokenDistribution>,
    pub l_x: Vec<usize>,
    pub d_x: Vec<usize>,
    pub samples: usize,
    /// Batch size in the bound's exponent; also the size of the dataset measured for `M`.
    pub n: usize,
    pub beta_rule: BetaRule,
    pub delta_mode: DeltaMode,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.l_x.is_empty() || self.d_x.is_empty() {
            return Err(AmiError::Config("bounds grid lists must be nonempty".into()));
        }
        if self.samples == 0 || self.n == 0 {
            return Err(AmiError::Config("bounds.samples and bounds.n must be >= 1".into()));
        }
        if self.l_x.iter().any(|&l| l < 2) {
            return Err(AmiError::Config("bounds.l_x entries must be >= 2".into()));
        }
        if let BetaRule::Fixed(b) = self.beta_rule {
            if !(b > 0.0) {
                return Err(AmiError::Config(format!("bounds beta must be > 0, got {b}")));
            }
        }
        for &dist in &self.sources {
            for &d in &self.d_x {
                for &l in &self.l_x {
                    DataSource::synthetic(dist, l, d)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub source: TokenDistribution,
    pub d_x: usize,
    pub l_x: usize,
    pub n: usize,
    pub beta: f64,
    pub m: f64,
    pub delta: f64,
    pub p_proj: f64,
    pub p_proj_err: f64,
    pub p_proj_iid: f64,
    pub p_box: f64,
    pub p_box_err: f64,
    pub bar_delta: f64,
    pub lower_bound: f64,
    pub condition_ratio: f64,
    pub condition_holds: bool,
    pub samples: usize,
}

fn grid_index(source: usize, d_idx: usize, l_idx: usize) -> u64 {
    ((source as u64) << 40) | ((d_idx as u64) << 20) | l_idx as u64
}

fn separation_and_norm(cfg: &SweepConfig, dist: TokenDistribution, d_x: usize, l_x: usize, index: u64) -> Result<(f64, f64)> {
    let expected_delta = match dist {
        TokenDistribution::Gaussian => d_x as f64,
        _ => 1.0,
    };
    let needs_data = cfg.delta_mode == DeltaMode::EmpiricalMin || dist == TokenDistribution::Gaussian;
    if !needs_data {
        return Ok((expected_delta, 1.0));
    }
    let mut rng = child_rng(cfg.seed, index, Stream::Reference);
    let batch = DataSource::synthetic(dist, l_x, d_x)?.sample_batch(cfg.n, &mut rng)?;
    let stats = measure_stats(&batch)?;
    let m = match dist {
        TokenDistribution::Gaussian => stats.m,
        _ => 1.0,
    };
    let delta = match cfg.delta_mode {
        DeltaMode::Expected => expected_delta,
        DeltaMode::EmpiricalMin => stats.delta,
    };
    Ok((delta, m))
}

/// Evaluates the bound on the `sources x d_x x l_x` grid. Samples are shared across `l_x`.
pub fn sweep_grid(cfg: &SweepConfig) -> Result<Vec<BoundEstimate>> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = (0..cfg.sources.len())
        .flat_map(|s| (0..cfg.d_x.len()).map(move |d| (s, d)))
        .collect();
    let blocks: Vec<Result<Vec<BoundEstimate>>> = cells
        .into_par_iter()
        .map(|(si, di)| {
            let dist = cfg.sources[si];
            let d_x = cfg.d_x[di];
            let mut rng = child_rng(cfg.seed, grid_index(si, di, 0), Stream::Bounds);
            let draws = BoundSamples::draw(dist, d_x, cfg.samples, &mut rng)?;
            let beta = cfg.beta_rule.beta(dist, d_x);
            cfg.l_x
                .iter()
                .enumerate()
                .map(|(li, &l_x)| {
                    let (delta, m) = separation_and_norm(cfg, dist, d_x, l_x, grid_index(si, di, li))?;
                    let cond = check_condition(delta, beta, l_x, m);
                    let bar_delta = if delta > 0.0 {
                        compute_bar_delta(m, l_x, beta, delta)?.value
                    } else {
                        f64::NAN
                    };
                    let delta_arg = 1.0 / (beta * l_x as f64 * m);
                    let p_proj = draws.p_proj(delta_arg);
                    let p_box = draws.p_box(3.0 * bar_delta);
                    let p_proj_iid = match dist {
                        TokenDistribution::OneHot if delta_arg < 1.0 => 1.0 - 1.0 / d_x as f64,
                        _ => p_proj,
                    };
                    Ok(BoundEstimate {
                        source: dist,
                        d_x,
                        l_x,
                        n: cfg.n,
                        beta,
                        m,
                        delta,
                        p_proj,
                        p_proj_err: error_bar(p_proj, cfg.samples),
                        p_proj_iid,
                        p_box,
                        p_box_err: error_bar(p_box, cfg.samples),
                        bar_delta,
                        lower_bound: eval_lower_bound(p_proj, p_box, cfg.n, l_x),
                        condition_ratio: cond.ratio,
                        condition_holds: cond.holds,
                        samples: cfg.samples,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}
