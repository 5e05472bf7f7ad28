//! Training configuration: defaults, then a TOML or JSON file, then flags.

use std::path::Path;

use ariign_core::corpus::Modality;
use ariign_core::{Error, FusionMode, Result, TrainConfig};
use clap::{Args, ValueEnum};

pub const SEED_ENV: &str = "ARIIGN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    Tgan,
    Imcl,
    Iccl,
}

/// Flags shared by `train` and `sweep`. Each one, when given, overrides
/// the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML or JSON file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Disable a loss component; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Component>,
    /// Comma-separated subset of t, a, v.
    #[arg(long)]
    pub modalities: Option<String>,
    /// add, concat or cross_modal.
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Falls back to the config file, then to $ARIIGN_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub gan_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Hidden width.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
}

pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut chars = t.chars();
            match (chars.next().and_then(Modality::from_short), chars.next()) {
                (Some(m), None) => Ok(m),
                _ => Err(Error::Config(format!("unknown modality {t:?} (expected t, a or v)"))),
            }
        })
        .collect()
}

/// File contents as a JSON value, so that keys the file sets can be told
/// apart from defaults.
fn read_file(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    Ok(value)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let (mut config, file_seed) = match &self.config {
            Some(path) => {
                let value = read_file(path)?;
                let has_seed = value.get("seed").is_some();
                let config: TrainConfig = serde_json::from_value(value)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                (config, has_seed)
            }
            None => (TrainConfig::default(), false),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        } else if !file_seed {
            if let Some(seed) = env_seed()? {
                config.seed = seed;
            }
        }
        for c in &self.ablate {
            match c {
                Component::Tgan => config.use_tgan = false,
                Component::Imcl => config.use_imcl = false,
                Component::Iccl => config.use_iccl = false,
            }
        }
        if let Some(m) = &self.modalities {
            config.modalities = parse_modalities(m)?;
        }
        if let Some(f) = &self.fusion {
            config.fusion_mode = f.parse::<FusionMode>()?;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            )*};
        }
        set!(beta, lambda, epochs, batch_size, lr, dropout, d, window);
        if let Some(g) = self.gan_epochs {
            config.gan_epochs = Some(g);
        }
        config.validate()?;
        Ok(config)
    }
}
