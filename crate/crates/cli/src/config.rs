//! Run configuration: an optional TOML file whose keys mirror the flags.
//! Flags win over the file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hopper::analyze::DEFAULT_FD_STEP;
use hopper::{ModelParams, PdGains, Variant};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Single,
    Double,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Single => Variant::SingleSpring,
            VariantArg::Double => Variant::DoubleSpring,
        }
    }
}

/// Keys shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model parameter JSON (defaults to the shipped nominal set).
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
    /// Comma-separated foot clearances in metres.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    pub heights: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub hops: Option<usize>,
    /// PD gains on the mover as `kp,kd`.
    #[arg(long, global = true, value_parser = parse_gains)]
    pub pd: Option<PdGains>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub fd_step: Option<f64>,
    /// Collocation knots per segment.
    #[arg(long, global = true)]
    pub knots: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    params: Option<PathBuf>,
    variant: Option<VariantArg>,
    heights: Option<Vec<f64>>,
    hops: Option<usize>,
    pd: Option<[f64; 2]>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    fd_step: Option<f64>,
    knots: Option<usize>,
}

fn parse_gains(text: &str) -> Result<PdGains, String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [kp, kd] = parts.as_slice() else {
        return Err("expected two comma-separated gains, e.g. 100,30".into());
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("'{s}': {e}"));
    Ok(PdGains { kp: num(kp)?, kd: num(kd)? })
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub variant: Option<Variant>,
    pub heights: Vec<f64>,
    pub hops: usize,
    pub pd: Option<PdGains>,
    pub out: PathBuf,
    pub seed: u64,
    pub fd_step: f64,
    pub knots: Option<usize>,
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => {
                let text = read_text(path)?;
                toml::from_str::<FileConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        // A relative params path in the config file is taken relative to the
        // file; the output directory is relative to the working directory.
        let base = args.config.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
        let params_file = args.params.clone().or(file.params.map(|p| base.join(p)));
        let params = match &params_file {
            Some(path) => ModelParams::from_json(&read_text(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            None => ModelParams::nominal(Variant::DoubleSpring),
        };
        let heights = args.heights.clone().or(file.heights).unwrap_or_default();
        if let Some(h) = heights.iter().find(|h| !(**h > 0.0 && **h <= 1.0)) {
            return Err(CliError::Config(format!("height {h} is outside (0, 1] m")));
        }
        let fd_step = args.fd_step.or(file.fd_step).unwrap_or(DEFAULT_FD_STEP);
        if !(fd_step > 0.0) {
            return Err(CliError::Config(format!("fd_step {fd_step} must be positive")));
        }
        Ok(Self {
            params,
            variant: args.variant.or(file.variant).map(Variant::from),
            heights,
            hops: args.hops.or(file.hops).unwrap_or(10),
            pd: args.pd.or(file.pd.map(|[kp, kd]| PdGains { kp, kd })),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            seed: args.seed.or(file.seed).unwrap_or(0),
            fd_step,
            knots: args.knots.or(file.knots),
        })
    }

    /// Parameters for `variant` (the file's own variant when none is given).
    pub fn params_for(&self, variant: Option<Variant>) -> ModelParams {
        match variant.or(self.variant) {
            Some(v) => self.params.with_variant(v),
            None => self.params,
        }
    }

    pub fn require_heights(&self) -> Result<&[f64], CliError> {
        if self.heights.is_empty() {
            return Err(CliError::Config("no heights given (use --heights)".into()));
        }
        Ok(&self.heights)
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gains_parse() {
        let g = parse_gains("100, 30").unwrap();
        assert_eq!((g.kp, g.kd), (100.0, 30.0));
        assert!(parse_gains("1").is_err());
        assert!(parse_gains("a,b").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "heights = [0.2, 0.3]\nhops = 4\nout = \"res\"\nvariant = \"single\"\n").unwrap();
        let args = CommonArgs { config: Some(cfg), hops: Some(7), ..Default::default() };
        let rc = RunConfig::resolve(&args).unwrap();
        assert_eq!(rc.heights, vec![0.2, 0.3]);
        assert_eq!(rc.hops, 7);
        assert_eq!(rc.out, PathBuf::from("res"));
        assert_eq!(rc.variant, Some(Variant::SingleSpring));
    }

    #[test]
    fn rejects_out_of_range_height() {
        let args = CommonArgs { heights: Some(vec![0.3, 1.5]), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&args), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "height = 0.2\n").unwrap();
        let args = CommonArgs { config: Some(cfg), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&args), Err(CliError::Config(_))));
    }
}
