//! Run configuration: flat `key = value` files with every model, loss and
//! training knob. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("unknown time variant `{0}`")]
    UnknownTimeVariant(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Router input of the temporal mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeVariant {
    /// Interval embedding and absolute-time cosine.
    #[default]
    Both,
    IntervalOnly,
    AbsoluteOnly,
    /// Trainable cosine of the interval in place of the interval table.
    CosInterval,
}

impl TimeVariant {
    pub fn name(self) -> &'static str {
        match self {
            TimeVariant::Both => "both",
            TimeVariant::IntervalOnly => "interval_only",
            TimeVariant::AbsoluteOnly => "absolute_only",
            TimeVariant::CosInterval => "cos_interval",
        }
    }

    pub fn all() -> [TimeVariant; 4] {
        [TimeVariant::Both, TimeVariant::IntervalOnly, TimeVariant::AbsoluteOnly, TimeVariant::CosInterval]
    }
}

impl FromStr for TimeVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::all().into_iter().find(|v| v.name() == s).ok_or_else(|| ConfigError::UnknownTimeVariant(s.into()))
    }
}

/// Item vectors the scores are taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CatalogSide {
    /// Projected features and ID embeddings, before any mixture.
    #[default]
    Initial,
    /// The same vectors passed through the interactive mixture.
    Interactive,
}

impl FromStr for CatalogSide {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initial" => Ok(Self::Initial),
            "interactive" => Ok(Self::Interactive),
            _ => Err(ConfigError::Invalid(format!("catalog_side must be initial or interactive, got `{s}`"))),
        }
    }
}

impl fmt::Display for CatalogSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Initial => "initial",
            Self::Interactive => "interactive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub d: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub causal: bool,
    pub k1: usize,
    pub k2: usize,
    pub mu: f64,
    pub freq: f64,
    pub p_max: usize,
    pub time_variant: TimeVariant,
    pub alpha_init: f64,
    pub init_std: f64,
    pub catalog_side: CatalogSide,
    pub tau: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub enable_cp: bool,
    pub enable_idcl: bool,
    pub enable_pcl: bool,
    pub enable_imoe: bool,
    pub enable_tmoe: bool,
    pub enable_text: bool,
    pub enable_image: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub per_target: bool,
    /// Expected feature widths; 0 accepts whatever the files hold.
    pub d_txt: usize,
    pub d_img: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 64,
            max_len: 50,
            n_layers: 2,
            n_heads: 2,
            dropout: 0.2,
            causal: true,
            k1: 4,
            k2: 4,
            mu: 100.0,
            freq: 10000.0,
            p_max: 2200,
            time_variant: TimeVariant::Both,
            alpha_init: 0.1,
            init_std: 0.02,
            catalog_side: CatalogSide::Initial,
            tau: 0.2,
            beta: 0.3,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            enable_cp: true,
            enable_idcl: true,
            enable_pcl: true,
            enable_imoe: true,
            enable_tmoe: true,
            enable_text: true,
            enable_image: true,
            lr: 1e-3,
            batch_size: 256,
            epochs: 200,
            patience: 10,
            seed: 42,
            grad_clip: 5.0,
            per_target: true,
            d_txt: 0,
            d_img: 0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { line, key: key.into(), value: value.into() })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue { line, key: key.into(), value: value.into() }),
    }
}

impl Config {
    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_string())
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "d" => self.d = parse_value(line, key, v)?,
            "L" => self.max_len = parse_value(line, key, v)?,
            "n_layers" => self.n_layers = parse_value(line, key, v)?,
            "n_heads" => self.n_heads = parse_value(line, key, v)?,
            "dropout" => self.dropout = parse_value(line, key, v)?,
            "causal" => self.causal = parse_bool(line, key, v)?,
            "k1" => self.k1 = parse_value(line, key, v)?,
            "k2" => self.k2 = parse_value(line, key, v)?,
            "mu" => self.mu = parse_value(line, key, v)?,
            "freq" => self.freq = parse_value(line, key, v)?,
            "P_max" => self.p_max = parse_value(line, key, v)?,
            "time_variant" => self.time_variant = v.parse()?,
            "alpha_init" => self.alpha_init = parse_value(line, key, v)?,
            "init_std" => self.init_std = parse_value(line, key, v)?,
            "catalog_side" => self.catalog_side = v.parse()?,
            "tau" => self.tau = parse_value(line, key, v)?,
            "beta" => self.beta = parse_value(line, key, v)?,
            "lambda1" => self.lambda1 = parse_value(line, key, v)?,
            "lambda2" => self.lambda2 = parse_value(line, key, v)?,
            "lambda3" => self.lambda3 = parse_value(line, key, v)?,
            "enable_cp" => self.enable_cp = parse_bool(line, key, v)?,
            "enable_idcl" => self.enable_idcl = parse_bool(line, key, v)?,
            "enable_pcl" => self.enable_pcl = parse_bool(line, key, v)?,
            "enable_imoe" => self.enable_imoe = parse_bool(line, key, v)?,
            "enable_tmoe" => self.enable_tmoe = parse_bool(line, key, v)?,
            "enable_text" => self.enable_text = parse_bool(line, key, v)?,
            "enable_image" => self.enable_image = parse_bool(line, key, v)?,
            "lr" => self.lr = parse_value(line, key, v)?,
            "batch_size" => self.batch_size = parse_value(line, key, v)?,
            "epochs" => self.epochs = parse_value(line, key, v)?,
            "patience" => self.patience = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "grad_clip" => self.grad_clip = parse_value(line, key, v)?,
            "per_target" => self.per_target = parse_bool(line, key, v)?,
            "d_txt" => self.d_txt = parse_value(line, key, v)?,
            "d_img" => self.d_img = parse_value(line, key, v)?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.d == 0 || self.max_len == 0 || self.n_heads == 0 || self.k1 == 0 || self.k2 == 0 {
            return fail("d, L, n_heads, k1 and k2 must be positive".into());
        }
        if self.d % self.n_heads != 0 {
            return fail(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1)", self.beta));
        }
        if !(self.tau > 0.0) || !(self.mu > 0.0) || !(self.freq > 1.0) || self.p_max == 0 {
            return fail("tau and mu must be positive, freq above 1 and P_max positive".into());
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.lr >= 0.0) || !(self.grad_clip >= 0.0) || !(self.init_std >= 0.0) {
            return fail("lr, grad_clip and init_std must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        match variant {
            Variant::Full => {}
            Variant::NoImoe => self.enable_imoe = false,
            Variant::NoTmoe => {
                self.enable_tmoe = false;
                self.enable_pcl = false;
                self.lambda3 = 0.0;
            }
            Variant::NoCp => {
                self.enable_cp = false;
                self.lambda1 = 0.0;
            }
            Variant::NoIdcl => {
                self.enable_idcl = false;
                self.lambda2 = 0.0;
            }
            Variant::NoPcl => {
                self.enable_pcl = false;
                self.lambda3 = 0.0;
            }
            Variant::NoText => self.enable_text = false,
            Variant::NoImage => self.enable_image = false,
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self;
        let lines: [(&str, String); 36] = [
            ("d", c.d.to_string()),
            ("L", c.max_len.to_string()),
            ("n_layers", c.n_layers.to_string()),
            ("n_heads", c.n_heads.to_string()),
            ("dropout", c.dropout.to_string()),
            ("causal", c.causal.to_string()),
            ("k1", c.k1.to_string()),
            ("k2", c.k2.to_string()),
            ("mu", c.mu.to_string()),
            ("freq", c.freq.to_string()),
            ("P_max", c.p_max.to_string()),
            ("time_variant", c.time_variant.name().to_string()),
            ("alpha_init", c.alpha_init.to_string()),
            ("init_std", c.init_std.to_string()),
            ("catalog_side", c.catalog_side.to_string()),
            ("tau", c.tau.to_string()),
            ("beta", c.beta.to_string()),
            ("lambda1", c.lambda1.to_string()),
            ("lambda2", c.lambda2.to_string()),
            ("lambda3", c.lambda3.to_string()),
            ("enable_cp", c.enable_cp.to_string()),
            ("enable_idcl", c.enable_idcl.to_string()),
            ("enable_pcl", c.enable_pcl.to_string()),
            ("enable_imoe", c.enable_imoe.to_string()),
            ("enable_tmoe", c.enable_tmoe.to_string()),
            ("enable_text", c.enable_text.to_string()),
            ("enable_image", c.enable_image.to_string()),
            ("lr", c.lr.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("epochs", c.epochs.to_string()),
            ("patience", c.patience.to_string()),
            ("seed", c.seed.to_string()),
            ("grad_clip", c.grad_clip.to_string()),
            ("per_target", c.per_target.to_string()),
            ("d_txt", c.d_txt.to_string()),
            ("d_img", c.d_img.to_string()),
        ];
        for (k, v) in lines {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Ablations: each removes one component of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoImoe,
    NoTmoe,
    NoCp,
    NoIdcl,
    NoPcl,
    NoText,
    NoImage,
}

impl Variant {
    pub fn all() -> [Variant; 8] {
        use Variant::*;
        [Full, NoImoe, NoTmoe, NoCp, NoIdcl, NoPcl, NoText, NoImage]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoImoe => "-IMoE",
            Variant::NoTmoe => "-TMoE",
            Variant::NoCp => "-CP",
            Variant::NoIdcl => "-IDCL",
            Variant::NoPcl => "-PCL",
            Variant::NoText => "-Text",
            Variant::NoImage => "-Image",
        }
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    /// Case-insensitive; the leading `-` is optional.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let want = s.trim_start_matches('-').to_ascii_lowercase();
        Self::all()
            .into_iter()
            .find(|v| v.name().trim_start_matches('-').to_ascii_lowercase() == want)
            .ok_or_else(|| ConfigError::UnknownVariant(s.into()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
