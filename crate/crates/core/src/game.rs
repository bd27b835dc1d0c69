//! The membership game: the server crafts a layer from a target `T`, a client
//! computes gradients on a batch that holds `T` with probability one half, and
//! the server guesses from the gradients.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::attack_attn::{attn_guess, auto_gamma, craft_attn, crafting_beta, AttnAttackConfig, Gamma};
use crate::attack_fc::{auto_tau, craft_fc, fc_guess, flatten_sequences, flatten_target, FcAttackConfig, FcVariant, Tau, TAU_FALLBACK};
use crate::bounds::check_condition;
use crate::data::{measure_stats, DataSource, Sequence, SourceKind, TokenBatch, Vocabulary, MAX_RESAMPLES};
use crate::error::{AmiError, Result};
use crate::ldp::{perturb_ids, DpConfig, Mechanism};
use crate::metrics::{compute_metrics, Labeled, Metrics};
use crate::nn::linalg::from_columns;
use crate::nn::{attn_backward, fc_backward, AttnParams, FcParams, Guess};
use crate::rng::{child_rng, Stream};

/// Sequences drawn to calibrate `tau` and `gamma`.
pub const REFERENCE_SEQUENCES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum AttackConfig {
    Fc(FcAttackConfig),
    Attn(AttnAttackConfig),
}

impl AttackConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Fc(_) => "fc",
            AttackConfig::Attn(_) => "attn",
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            AttackConfig::Fc(c) => c.variant.as_str(),
            AttackConfig::Attn(_) => "-",
        }
    }

    /// Token of `T` the attack keys on; negatives never contain it.
    pub fn target_token(&self) -> usize {
        match self {
            AttackConfig::Fc(c) => c.token_index,
            AttackConfig::Attn(c) => c.target_token_index,
        }
    }
}

impl fmt::Display for AttackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackConfig::Fc(c) => write!(f, "fc-{}", c.variant),
            AttackConfig::Attn(_) => f.write_str("attn"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameConfig {
    pub trials: usize,
    pub n: usize,
    pub seed: u64,
    pub source: DataSource,
    /// Embedding table for index-level DP; one-hot sources default to the identity table.
    pub vocab: Option<Arc<Vocabulary>>,
    pub attack: AttackConfig,
    pub dp: DpConfig,
}

impl GameConfig {
    pub fn new(source: DataSource, attack: AttackConfig, trials: usize, n: usize, seed: u64) -> Self {
        GameConfig { trials, n, seed, source, vocab: None, attack, dp: DpConfig::none() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameOutcome {
    pub trial_index: usize,
    pub b: u8,
    pub b_prime: u8,
    pub score: f64,
    pub wall_ns: u64,
}

/// Where an automatic `tau` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauOrigin {
    Explicit,
    Vocabulary,
    ReferenceSample,
    Fallback,
}

/// Attack hyper-parameters after automatic selection.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    Fc { variant: FcVariant, token_index: usize, tau: f64, origin: TauOrigin },
    Attn { beta: f64, gamma: f64, target_token_index: usize, condition_ratio: f64, condition_holds: bool },
}

impl Resolved {
    pub fn tau(&self) -> f64 {
        match self {
            Resolved::Fc { tau, .. } => *tau,
            Resolved::Attn { .. } => f64::NAN,
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Resolved::Attn { beta, .. } => *beta,
            Resolved::Fc { .. } => f64::NAN,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Resolved::Attn { gamma, .. } => *gamma,
            Resolved::Fc { .. } => f64::NAN,
        }
    }

    pub fn condition_ratio(&self) -> f64 {
        match self {
            Resolved::Attn { condition_ratio, .. } => *condition_ratio,
            Resolved::Fc { .. } => f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameRun {
    pub outcomes: Vec<GameOutcome>,
    pub metrics: Metrics,
}

impl GameRun {
    pub fn from_outcomes(outcomes: Vec<GameOutcome>) -> Self {
        let items: Vec<Labeled> = outcomes
            .iter()
            .map(|o| Labeled { b: o.b, b_prime: o.b_prime, score: o.score })
            .collect();
        GameRun { metrics: compute_metrics(&items), outcomes }
    }

    pub fn wall_ns(&self) -> u64 {
        self.outcomes.iter().map(|o| o.wall_ns).sum()
    }
}

enum Crafted {
    Fc(FcParams),
    Attn(AttnParams),
}

fn token_key(tok: &[f64]) -> Vec<u64> {
    tok.iter().map(|v| v.to_bits()).collect()
}

fn seq_key(s: &Sequence) -> Vec<u64> {
    token_key(&s.values)
}

/// Validated game with resolved hyper-parameters, ready to run trials.
#[derive(Debug, Clone)]
pub struct GameEngine {
    cfg: GameConfig,
    vocab: Option<Arc<Vocabulary>>,
    resolved: Resolved,
}

impl GameEngine {
    pub fn new(cfg: GameConfig) -> Result<Self> {
        if cfg.trials == 0 || cfg.n == 0 {
            return Err(AmiError::Config("game.trials and game.n must be >= 1".into()));
        }
        let l_x = cfg.source.l_x();
        let d_x = cfg.source.d_x();
        let vocab = match (&cfg.vocab, cfg.source.kind()) {
            (Some(v), _) => Some(v.clone()),
            (None, SourceKind::OneHot) => Some(Arc::new(Vocabulary::identity(d_x))),
            _ => None,
        };
        if let Some(v) = &vocab {
            if v.d_x() != d_x {
                return Err(AmiError::Config(format!("vocabulary dimension {} != d_x = {d_x}", v.d_x())));
            }
        }
        Self::validate_dp(&cfg.dp, vocab.as_deref())?;
        let resolved = match &cfg.attack {
            AttackConfig::Fc(c) => {
                c.validate(l_x)?;
                Self::resolve_fc(&cfg, c, vocab.as_deref())?
            }
            AttackConfig::Attn(c) => {
                c.validate(l_x)?;
                if d_x < 2 {
                    return Err(AmiError::Config("the attention attack needs d_x >= 2".into()));
                }
                Self::resolve_attn(&cfg, c)?
            }
        };
        Ok(GameEngine { cfg, vocab, resolved })
    }

    fn validate_dp(dp: &DpConfig, vocab: Option<&Vocabulary>) -> Result<()> {
        dp.validate()?;
        if dp.mechanism == Mechanism::None {
            return Ok(());
        }
        let v = vocab.ok_or_else(|| {
            AmiError::Config(format!("dp.mechanism = {} needs a vocabulary (onehot or index_file data)", dp.mechanism))
        })?;
        if v.k() != dp.k {
            return Err(AmiError::Config(format!("dp.k = {} but the vocabulary has {} entries", dp.k, v.k())));
        }
        Ok(())
    }

    fn reference_batch(cfg: &GameConfig) -> Result<TokenBatch> {
        let count = match &cfg.source {
            DataSource::Pool(b) => REFERENCE_SEQUENCES.min(b.n()),
            DataSource::Synthetic { .. } => REFERENCE_SEQUENCES,
        };
        let mut rng = child_rng(cfg.seed, u64::MAX, Stream::Reference);
        match cfg.source.sample_batch(count, &mut rng) {
            Ok(b) => Ok(b),
            // tiny domains cannot supply a full reference sample
            Err(AmiError::Config(_)) => cfg.source.sample_batch(cfg.n.min(count), &mut rng),
            Err(e) => Err(e),
        }
    }

    fn resolve_fc(cfg: &GameConfig, c: &FcAttackConfig, vocab: Option<&Vocabulary>) -> Result<Resolved> {
        let (tau, origin) = match c.tau {
            Tau::Value(t) => (t, TauOrigin::Explicit),
            Tau::Auto => {
                let has_dictionary = matches!(cfg.source.kind(), SourceKind::OneHot | SourceKind::IndexFile);
                match (c.variant, has_dictionary, vocab) {
                    (FcVariant::Token, true, Some(v)) => {
                        let rows: Vec<&[f64]> = v.rows().collect();
                        (auto_tau(&rows)?, TauOrigin::Vocabulary)
                    }
                    (FcVariant::Full, true, _) => {
                        let reference = Self::reference_batch(cfg)?;
                        let seqs: Vec<&[f64]> = reference.sequences().collect();
                        (auto_tau(&seqs)?, TauOrigin::ReferenceSample)
                    }
                    _ => {
                        log::warn!("no finite dictionary for {} data; using tau = {TAU_FALLBACK}", cfg.source.kind());
                        (TAU_FALLBACK, TauOrigin::Fallback)
                    }
                }
            }
        };
        Ok(Resolved::Fc { variant: c.variant, token_index: c.token_index, tau, origin })
    }

    fn resolve_attn(cfg: &GameConfig, c: &AttnAttackConfig) -> Result<Resolved> {
        let l_x = cfg.source.l_x();
        let stats = measure_stats(&Self::reference_batch(cfg)?)?;
        let gamma = match c.gamma {
            Gamma::Value(g) => g,
            Gamma::Auto => auto_gamma(&stats, c.beta, l_x)?,
        };
        let cond = check_condition(stats.delta, c.beta, l_x, stats.m);
        if !cond.holds {
            log::warn!(
                "separation condition fails (ratio {:.4}); the attention attack runs without its guarantee",
                cond.ratio
            );
        }
        Ok(Resolved::Attn {
            beta: c.beta,
            gamma,
            target_token_index: c.target_token_index,
            condition_ratio: cond.ratio,
            condition_holds: cond.holds,
        })
    }

    pub fn config(&self) -> &GameConfig {
        &self.cfg
    }

    pub fn resolved(&self) -> &Resolved {
        &self.resolved
    }

    pub fn vocab(&self) -> Option<&Arc<Vocabulary>> {
        self.vocab.as_ref()
    }

    /// Draws `D`, the hidden bit and the target. Negatives are resampled until
    /// `T` is not in `D` and the attacked token of `T` occurs in no sequence of `D`.
    fn draw(&self, trial: usize) -> Result<(Vec<Sequence>, u8, Sequence)> {
        let (seed, t) = (self.cfg.seed, trial as u64);
        let src = &self.cfg.source;
        let (l_x, d_x) = (src.l_x(), src.d_x());
        let data = src.sample_distinct(self.cfg.n, &mut child_rng(seed, t, Stream::Data))?;
        let b = child_rng(seed, t, Stream::Bit).random_bool(0.5) as u8;
        let mut rng = child_rng(seed, t, Stream::Target);
        let target = if b == 1 {
            data[rng.random_range(0..data.len())].clone()
        } else {
            let j = self.cfg.attack.target_token();
            let members: HashSet<Vec<u64>> = data.iter().map(seq_key).collect();
            let tokens: HashSet<Vec<u64>> = data
                .iter()
                .flat_map(|s| (0..l_x).map(move |p| token_key(s.token(p, d_x))))
                .collect();
            let mut tries = 0usize;
            loop {
                let cand = src.sample_sequence(&mut rng);
                if !members.contains(&seq_key(&cand)) && !tokens.contains(&token_key(cand.token(j, d_x))) {
                    break cand;
                }
                tries += 1;
                if tries > MAX_RESAMPLES {
                    return Err(AmiError::Config(format!(
                        "no non-member target found after {MAX_RESAMPLES} resamples; domain too small for n = {}",
                        self.cfg.n
                    )));
                }
            }
        };
        let inside = data.iter().any(|s| s.values == target.values);
        if inside != (b == 1) {
            return Err(AmiError::Contract(format!("trial {trial}: b = {b} but target membership is {inside}")));
        }
        Ok((data, b, target))
    }

    fn craft(&self, trial: usize, target: &Sequence) -> Result<Crafted> {
        let (l_x, d_x) = (self.cfg.source.l_x(), self.cfg.source.d_x());
        match &self.resolved {
            Resolved::Fc { variant, token_index, tau, .. } => {
                let t = flatten_target(*variant, &target.values, l_x, d_x, *token_index)?;
                Ok(Crafted::Fc(craft_fc(&t, *tau)?))
            }
            Resolved::Attn { beta, gamma, target_token_index, .. } => {
                let v = target.token(*target_token_index, d_x);
                let mut rng = child_rng(self.cfg.seed, trial as u64, Stream::Craft);
                Ok(Crafted::Attn(craft_attn(v, crafting_beta(*beta, d_x), *gamma, &mut rng)?))
            }
        }
    }

    fn privatize(&self, trial: usize, data: &[Sequence], dp: &DpConfig) -> Result<Vec<Vec<f64>>> {
        if dp.mechanism == Mechanism::None {
            return Ok(data.iter().map(|s| s.values.clone()).collect());
        }
        let vocab = self.vocab.as_ref().ok_or_else(|| AmiError::Config("DP needs a vocabulary".into()))?;
        let l_x = self.cfg.source.l_x();
        let ids: Vec<u32> = data
            .iter()
            .map(|s| s.ids.as_deref().ok_or_else(|| AmiError::Config("DP needs token ids".into())))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let mut rng = child_rng(self.cfg.seed, trial as u64, Stream::Dp);
        let noisy = perturb_ids(&ids, l_x, dp, &mut rng)?;
        noisy.chunks_exact(l_x).map(|c| vocab.lookup(c)).collect()
    }

    fn observe(&self, crafted: &Crafted, batch: &[Vec<f64>]) -> Result<Guess> {
        let (l_x, d_x) = (self.cfg.source.l_x(), self.cfg.source.d_x());
        let seqs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        match (crafted, &self.resolved) {
            (Crafted::Fc(p), Resolved::Fc { variant, .. }) => {
                let xs = flatten_sequences(*variant, &seqs, l_x, d_x)?;
                fc_guess(&fc_backward(p, &xs)?)
            }
            (Crafted::Attn(p), _) => {
                let xs: Vec<_> = seqs.iter().map(|s| from_columns(s, d_x, l_x)).collect();
                attn_guess(&attn_backward(p, &xs)?)
            }
            _ => Err(AmiError::Contract("crafted layer does not match the attack".into())),
        }
    }

    /// One trial evaluated under each DP configuration. Data, bit, target and
    /// crafted layer are shared; DP noise uses the same stream for every entry.
    pub fn run_trial_multi(&self, trial: usize, dps: &[DpConfig]) -> Result<Vec<GameOutcome>> {
        let (data, b, target) = self.draw(trial)?;
        let crafted = self.craft(trial, &target)?;
        dps.iter()
            .map(|dp| {
                let batch = self.privatize(trial, &data, dp)?;
                let start = Instant::now();
                let guess = self.observe(&crafted, &batch)?;
                let wall_ns = start.elapsed().as_nanos() as u64;
                Ok(GameOutcome { trial_index: trial, b, b_prime: guess.bit, score: guess.score, wall_ns })
            })
            .collect()
    }

    pub fn run_trial(&self, trial: usize) -> Result<GameOutcome> {
        Ok(self.run_trial_multi(trial, std::slice::from_ref(&self.cfg.dp))?.remove(0))
    }

    /// All trials under each DP configuration, in parallel on the current rayon pool.
    pub fn run_multi(&self, dps: &[DpConfig]) -> Result<Vec<GameRun>> {
        for dp in dps {
            Self::validate_dp(dp, self.vocab.as_deref())?;
        }
        let per_trial: Vec<Result<Vec<GameOutcome>>> = (0..self.cfg.trials)
            .into_par_iter()
            .map(|t| self.run_trial_multi(t, dps))
            .collect();
        let mut columns: Vec<Vec<GameOutcome>> = vec![Vec::with_capacity(self.cfg.trials); dps.len()];
        for r in per_trial {
            for (col, o) in columns.iter_mut().zip(r?) {
                col.push(o);
            }
        }
        Ok(columns.into_iter().map(GameRun::from_outcomes).collect())
    }

    pub fn run(&self) -> Result<GameRun> {
        Ok(self.run_multi(std::slice::from_ref(&self.cfg.dp))?.remove(0))
    }
}

pub fn run_trial(cfg: &GameConfig, trial_index: usize) -> Result<GameOutcome> {
    GameEngine::new(cfg.clone())?.run_trial(trial_index)
}

pub fn run_games(cfg: &GameConfig) -> Result<(Vec<GameOutcome>, Metrics)> {
    let run = GameEngine::new(cfg.clone())?.run()?;
    Ok((run.outcomes, run.metrics))
}
