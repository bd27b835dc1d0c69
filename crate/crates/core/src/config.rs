//! Declarative run configuration read from a TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;

use crate::attack_attn::{default_beta, AttnAttackConfig, Gamma};
use crate::attack_fc::{FcAttackConfig, FcVariant, Tau};
use crate::bounds::{BetaRule, DeltaMode, SweepConfig, DEFAULT_SAMPLES};
use crate::data::{load_embed_file, load_vocab_file, DataSource, SourceKind, TokenDistribution, Vocabulary};
use crate::error::{AmiError, Result};
use crate::game::{AttackConfig, GameConfig};
use crate::ldp::{DpConfig, Mechanism, DEFAULT_THE_THETA};

/// A number or the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AutoOr {
    #[default]
    Auto,
    Value(f64),
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = AutoOr;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"auto\"")
            }
            fn visit_str<E: de::Error>(self, s: &str) -> std::result::Result<AutoOr, E> {
                match s {
                    "auto" => Ok(AutoOr::Auto),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

fn parse_with<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr<Err = AmiError>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(|e: AmiError| de::Error::custom(e.to_string()))
}

fn parse_list<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr<Err = AmiError>,
{
    Vec::<String>::deserialize(d)?
        .iter()
        .map(|s| s.parse().map_err(|e: AmiError| de::Error::custom(e.to_string())))
        .collect()
}

fn parse_opt_list<'de, D, T>(d: D) -> std::result::Result<Option<Vec<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr<Err = AmiError>,
{
    parse_list(d).map(Some)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(deserialize_with = "parse_with")]
    pub source: SourceKind,
    pub l_x: Option<usize>,
    pub d_x: Option<usize>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    #[serde(deserialize_with = "parse_with", default = "no_mechanism")]
    pub mechanism: Mechanism,
    pub epsilon: Option<f64>,
    pub k: Option<usize>,
    pub the_theta: Option<f64>,
    pub dbit_d: Option<usize>,
    #[serde(default)]
    pub split_budget: bool,
}

fn no_mechanism() -> Mechanism {
    Mechanism::None
}

impl Default for DpSection {
    fn default() -> Self {
        DpSection { mechanism: Mechanism::None, epsilon: None, k: None, the_theta: None, dbit_d: None, split_budget: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    FcFull,
    FcToken,
    Attn,
}

impl FromStr for AttackKind {
    type Err = AmiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc-full" | "fc" => Ok(AttackKind::FcFull),
            "fc-token" => Ok(AttackKind::FcToken),
            "attn" => Ok(AttackKind::Attn),
            other => Err(AmiError::Config(format!("unknown attack `{other}` (fc-full, fc-token, attn)"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(deserialize_with = "parse_with", default = "default_attack")]
    pub kind: AttackKind,
    pub variant: Option<String>,
    #[serde(default)]
    pub token_index: usize,
    #[serde(default)]
    pub tau: AutoOr,
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: AutoOr,
    #[serde(default)]
    pub target_token_index: usize,
}

fn default_attack() -> AttackKind {
    AttackKind::FcFull
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: AttackKind::FcFull,
            variant: None,
            token_index: 0,
            tau: AutoOr::Auto,
            beta: None,
            gamma: AutoOr::Auto,
            target_token_index: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_trials() -> usize {
    200
}

fn default_n() -> usize {
    40
}

impl Default for GameSection {
    fn default() -> Self {
        GameSection { trials: default_trials(), n: default_n() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(deserialize_with = "parse_list")]
    pub sources: Vec<SourceKind>,
    pub l_x: Vec<usize>,
    pub d_x: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "one")]
    pub n: usize,
    /// `"table"` or a fixed number.
    pub beta: Option<BetaSetting>,
    #[serde(default)]
    pub delta_mode: DeltaSetting,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Named(BetaName),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaName {
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSetting {
    #[default]
    Expected,
    EmpiricalMin,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(deserialize_with = "parse_list")]
    pub mechanisms: Vec<Mechanism>,
    pub epsilons: Vec<f64>,
    #[serde(deserialize_with = "parse_list")]
    pub attacks: Vec<AttackKind>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DpCheckSection {
    #[serde(default, deserialize_with = "parse_opt_list")]
    pub mechanisms: Option<Vec<Mechanism>>,
    pub epsilons: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub trials: Option<u64>,
    /// Shifts every analytic rate; a negative control for the checker itself.
    #[serde(default)]
    pub expected_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = AmiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(AmiError::Config(format!("unknown report format `{other}` (csv, json)"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
}

/// The whole configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub game: GameSection,
    pub bounds: Option<BoundsSection>,
    pub sweep: Option<SweepSection>,
    pub dp_check: Option<DpCheckSection>,
    #[serde(default)]
    pub report: ReportSection,
    /// Directory relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AmiError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| AmiError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            AmiError::Config(m) => AmiError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn data_section(&self) -> Result<&DataSection> {
        self.data.as_ref().ok_or_else(|| AmiError::Config("missing [data] section".into()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Data source plus the embedding table when the data has one.
    pub fn data_source(&self) -> Result<(DataSource, Option<Arc<Vocabulary>>)> {
        let d = self.data_section()?;
        let file = || -> Result<PathBuf> {
            let p = d.path.as_ref().ok_or_else(|| AmiError::Config(format!("data.path is required for {}", d.source)))?;
            Ok(self.resolve(p))
        };
        match d.source {
            SourceKind::EmbedFile => Ok((DataSource::pool(load_embed_file(file()?)?)?, None)),
            SourceKind::IndexFile => {
                let vf = load_vocab_file(file()?)?;
                let batch = vf.to_batch()?;
                Ok((DataSource::pool(batch)?, Some(Arc::new(vf.vocab))))
            }
            kind => {
                let (l_x, d_x) = match (d.l_x, d.d_x) {
                    (Some(l), Some(x)) => (l, x),
                    _ => return Err(AmiError::Config(format!("data.l_x and data.d_x are required for {kind} data"))),
                };
                if d.path.is_some() {
                    return Err(AmiError::Config(format!("data.path is not used by {kind} data")));
                }
                let dist = TokenDistribution::from_kind(kind).expect("synthetic kind");
                Ok((DataSource::synthetic(dist, l_x, d_x)?, None))
            }
        }
    }

    /// DP settings with `k` defaulting to the vocabulary size.
    pub fn dp_config(&self, mechanism: Mechanism, epsilon: Option<f64>, vocab_k: Option<usize>) -> Result<DpConfig> {
        if mechanism == Mechanism::None {
            return Ok(DpConfig::none());
        }
        let epsilon = epsilon.ok_or_else(|| AmiError::Config(format!("dp.epsilon is required for mechanism {mechanism}")))?;
        let k = self
            .dp
            .k
            .or(vocab_k)
            .ok_or_else(|| AmiError::Config("dp.k is required without a vocabulary".into()))?;
        let mut cfg = DpConfig::new(mechanism, epsilon, k);
        cfg.the_theta = self.dp.the_theta.unwrap_or(DEFAULT_THE_THETA);
        if let Some(dd) = self.dp.dbit_d {
            cfg.dbit_d = dd;
        }
        cfg.split_budget = self.dp.split_budget;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attack_config(&self, kind: AttackKind, source: SourceKind, d_x: usize) -> Result<AttackConfig> {
        let a = &self.attack;
        let positive = |name: &str, v: f64| -> Result<f64> {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(AmiError::Config(format!("attack.{name} must be > 0, got {v}")))
            }
        };
        match kind {
            AttackKind::FcFull | AttackKind::FcToken => {
                let variant = match kind {
                    AttackKind::FcToken => FcVariant::Token,
                    _ => FcVariant::Full,
                };
                let mut c = FcAttackConfig::new(variant);
                c.token_index = a.token_index;
                c.tau = match a.tau {
                    AutoOr::Auto => Tau::Auto,
                    AutoOr::Value(t) => Tau::Value(positive("tau", t)?),
                };
                Ok(AttackConfig::Fc(c))
            }
            AttackKind::Attn => {
                let beta = positive("beta", a.beta.unwrap_or_else(|| default_beta(source, d_x)))?;
                let mut c = AttnAttackConfig::new(beta);
                c.gamma = match a.gamma {
                    AutoOr::Auto => Gamma::Auto,
                    AutoOr::Value(g) => Gamma::Value(positive("gamma", g)?),
                };
                c.target_token_index = a.target_token_index;
                Ok(AttackConfig::Attn(c))
            }
        }
    }

    /// Attack named by `[attack]`, with `variant` overriding the FC flavour.
    pub fn primary_attack(&self) -> Result<AttackKind> {
        match (self.attack.kind, self.attack.variant.as_deref()) {
            (AttackKind::Attn, None) => Ok(AttackKind::Attn),
            (AttackKind::Attn, Some(v)) => Err(AmiError::Config(format!("attack.variant `{v}` only applies to fc"))),
            (k, None) => Ok(k),
            (_, Some(v)) => match v.parse::<FcVariant>()? {
                FcVariant::Full => Ok(AttackKind::FcFull),
                FcVariant::Token => Ok(AttackKind::FcToken),
            },
        }
    }

    pub fn game_config(&self, kind: AttackKind, dp: DpConfig) -> Result<GameConfig> {
        let (source, vocab) = self.data_source()?;
        self.game_config_with(&source, vocab, kind, dp)
    }

    pub fn game_config_with(
        &self,
        source: &DataSource,
        vocab: Option<Arc<Vocabulary>>,
        kind: AttackKind,
        dp: DpConfig,
    ) -> Result<GameConfig> {
        let attack = self.attack_config(kind, source.kind(), source.d_x())?;
        let mut g = GameConfig::new(source.clone(), attack, self.game.trials, self.game.n, self.seed);
        g.vocab = vocab;
        g.dp = dp;
        if g.trials == 0 || g.n == 0 {
            return Err(AmiError::Config("game.trials and game.n must be >= 1".into()));
        }
        Ok(g)
    }

    /// Vocabulary size for DP defaults: the file's table, or `d_x` for one-hot data.
    pub fn vocab_size(source: &DataSource, vocab: Option<&Vocabulary>) -> Option<usize> {
        match (vocab, source.kind()) {
            (Some(v), _) => Some(v.k()),
            (None, SourceKind::OneHot) => Some(source.d_x()),
            _ => None,
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let b = self.bounds.as_ref().ok_or_else(|| AmiError::Config("missing [bounds] section".into()))?;
        let sources = b
            .sources
            .iter()
            .map(|&k| {
                TokenDistribution::from_kind(k)
                    .ok_or_else(|| AmiError::Config(format!("bounds.sources: {k} is not a synthetic distribution")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = SweepConfig {
            sources,
            l_x: b.l_x.clone(),
            d_x: b.d_x.clone(),
            samples: b.samples,
            n: b.n,
            beta_rule: match b.beta {
                None | Some(BetaSetting::Named(BetaName::Table)) => BetaRule::Table,
                Some(BetaSetting::Fixed(v)) => BetaRule::Fixed(v),
            },
            delta_mode: match b.delta_mode {
                DeltaSetting::Expected => DeltaMode::Expected,
                DeltaSetting::EmpiricalMin => DeltaMode::EmpiricalMin,
            },
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
