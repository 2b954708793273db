//! Training configuration (TOML, unknown keys rejected).

use serde::{Deserialize, Serialize};

use crate::densify::DensifyConfig;
use crate::error::{Error, Result};
use crate::raster::RasterConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Iterative,
    Deform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowLoss {
    /// Uncertainty-weighted (KL) loss with learnable confidences.
    Kl,
    /// Plain L1 over candidates.
    L1,
    None,
}

/// Which dynamic map weights the colour loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicMap {
    /// From the prior flow magnitude.
    Raw,
    /// From learned velocities.
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterMode {
    Exact,
    Default,
    Fast,
}

impl RasterMode {
    pub fn config(self) -> RasterConfig {
        match self {
            RasterMode::Exact => RasterConfig::exact(),
            RasterMode::Default => RasterConfig::default(),
            RasterMode::Fast => RasterConfig::fast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub static_iters: usize,
    pub per_frame: usize,
    pub coarse: usize,
    pub fine: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            static_iters: 300,
            per_frame: 60,
            coarse: 200,
            fine: 600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub confidence: f64,
    pub hexplane: f64,
    pub decoder: f64,
    pub velocity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1e-3,
            rotation: 5e-3,
            scale: 5e-3,
            opacity: 2e-2,
            sh: 1e-2,
            confidence: 1e-3,
            hexplane: 5e-3,
            decoder: 1e-3,
            velocity: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub warmup_frac: f64,
    pub flow: FlowLoss,
    /// Velocity head supervision (deformation paradigm).
    pub injector: bool,
    pub dynamic_map: DynamicMap,
    /// Motion floor (px) of the refined dynamic map.
    pub refine_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_c: 0.25,
            lambda_p: 10.0,
            lambda_max: 0.003,
            lambda_min: 0.001,
            warmup_frac: 0.2,
            flow: FlowLoss::Kl,
            injector: true,
            dynamic_map: DynamicMap::Refined,
            refine_floor: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrConfig {
    pub k: usize,
    pub tau_dyn: f64,
    pub m: usize,
    pub alpha_floor: f64,
}

impl Default for CorrConfig {
    fn default() -> Self {
        CorrConfig {
            k: 4,
            tau_dyn: 0.3,
            m: 8,
            alpha_floor: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub f_dim: usize,
    pub resolutions: Vec<usize>,
    pub width: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            f_dim: 8,
            resolutions: vec![16, 32],
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Std-dev of the jitter applied to seed points (world units).
    pub jitter: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            jitter: 0.02,
            opacity: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub raster: RasterMode,
    pub budgets: Budgets,
    pub lr: LearningRates,
    pub loss: LossConfig,
    pub corr: CorrConfig,
    pub densify: DensifyConfig,
    pub field: FieldConfig,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            paradigm: Paradigm::Deform,
            seed: 0,
            raster: RasterMode::Fast,
            budgets: Budgets::default(),
            lr: LearningRates::default(),
            loss: LossConfig::default(),
            corr: CorrConfig::default(),
            densify: DensifyConfig::default(),
            field: FieldConfig::default(),
            init: InitConfig::default(),
        }
    }
}

/// Named ablation settings of the flow supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// KL flow loss, velocity injector, refined dynamic map.
    Full,
    /// Plain L1 flow loss instead of KL.
    L1Flow,
    /// No velocity injector; raw-flow dynamic map.
    NoInjector,
    /// No flow supervision at all (λ_f = 0, plain colour loss).
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::L1Flow, Variant::NoInjector, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::L1Flow => "l1_flow",
            Variant::NoInjector => "no_injector",
            Variant::Baseline => "baseline",
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are TOML literals; bare words are taken as strings.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let cfg: TrainConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.lr;
        let rates = [
            l.position,
            l.rotation,
            l.scale,
            l.opacity,
            l.sh,
            l.confidence,
            l.hexplane,
            l.decoder,
            l.velocity,
        ];
        if rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let s = &self.loss;
        if !(0.0..=1.0).contains(&s.lambda_c) || !(0.0..1.0).contains(&s.warmup_frac) {
            return Err(Error::Config("lambda_c must be in [0, 1] and warmup_frac in [0, 1)".into()));
        }
        if s.lambda_max < 0.0 || s.lambda_min < 0.0 || s.lambda_p < 0.0 || !(s.refine_floor > 0.0) {
            return Err(Error::Config("loss weights must be nonnegative and refine_floor positive".into()));
        }
        if self.corr.k == 0 {
            return Err(Error::Config("corr.k must be at least 1".into()));
        }
        if self.field.resolutions.iter().any(|&r| r < 2) || self.field.f_dim == 0 || self.field.width == 0 {
            return Err(Error::Config("field needs f_dim, width >= 1 and resolutions >= 2".into()));
        }
        Ok(())
    }

    /// Applies an ablation variant to the loss settings.
    pub fn with_variant(mut self, v: Variant) -> Self {
        let l = &mut self.loss;
        match v {
            Variant::Full => {
                l.flow = FlowLoss::Kl;
                l.injector = true;
                l.dynamic_map = DynamicMap::Refined;
            }
            Variant::L1Flow => {
                l.flow = FlowLoss::L1;
                l.injector = true;
                l.dynamic_map = DynamicMap::Refined;
            }
            Variant::NoInjector => {
                l.flow = FlowLoss::Kl;
                l.injector = false;
                l.dynamic_map = DynamicMap::Raw;
            }
            Variant::Baseline => {
                l.flow = FlowLoss::None;
                l.injector = false;
                l.lambda_max = 0.0;
                l.lambda_min = 0.0;
                l.lambda_c = 0.0;
            }
        }
        self
    }

    /// True when any flow-derived term can be active.
    pub fn uses_flow(&self) -> bool {
        self.loss.lambda_max > 0.0 && (self.loss.flow != FlowLoss::None || self.loss.injector)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
