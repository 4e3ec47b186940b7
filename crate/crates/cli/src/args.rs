use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use ldla_core::atlas::percent_to_normalized;

#[derive(Debug, Parser)]
#[command(name = "ldla", version, about = "Locally-controlled face aging with latent diffusion")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic wrinkle corpus and its manifest.
    GenCorpus(GenCorpusArgs),
    /// Train the denoiser and ScoreNet.
    Train(TrainArgs),
    /// Age a face zone by zone.
    Age(AgeArgs),
    /// FID and score MAE between two manifests.
    Eval(EvalArgs),
    /// Serve the HTTP API for the editor UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output directory; receives the crops and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON corpus config layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub n_per_zone: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated zone subset.
    #[arg(long, value_delimiter = ',')]
    pub zones: Option<Vec<String>>,
    /// Zone registry JSON; the bundled registry otherwise.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lambda_full: Option<f64>,
    #[arg(long)]
    pub lambda_zone: Option<f64>,
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
    #[arg(long)]
    pub lambda_score: Option<f64>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    /// Flags as overrides, applied after `--set`.
    pub fn flag_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(s) = self.steps {
            out.push(format!("steps={s}"));
        }
        for (key, v) in [
            ("lambda_full", self.lambda_full),
            ("lambda_zone", self.lambda_zone),
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_score", self.lambda_score),
        ] {
            if let Some(v) = v {
                out.push(format!("weights.{key}={v}"));
            }
        }
        if let Some(p) = &self.checkpoint_out {
            out.push(format!("checkpoint_out={}", json_path(p)));
        }
        if let Some(p) = &self.loss_log {
            out.push(format!("loss_log={}", json_path(p)));
        }
        out
    }
}

/// A path as a JSON string, so overrides never reinterpret it.
fn json_path(p: &Path) -> String {
    serde_json::to_string(&p.display().to_string()).expect("string serializes")
}

/// Requested targets as normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Uniform(f64),
    PerZone(BTreeMap<String, f64>),
}

pub fn parse_targets(s: &str) -> Result<TargetSpec, String> {
    if let Some(p) = s.strip_prefix("uniform:") {
        let percent: u32 = p
            .trim()
            .parse()
            .map_err(|_| format!("`{p}` is not an integer percent"))?;
        return percent_to_normalized(percent)
            .map(TargetSpec::Uniform)
            .map_err(|e| e.to_string());
    }
    let map: BTreeMap<String, u32> = serde_json::from_str(s).map_err(|e| {
        format!("expected `uniform:<percent>` or a JSON object of zone_id -> percent: {e}")
    })?;
    map.into_iter()
        .map(|(k, p)| percent_to_normalized(p).map(|n| (k, n)))
        .collect::<Result<_, _>>()
        .map(TargetSpec::PerZone)
        .map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct AgeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input face PNG.
    #[arg(long)]
    pub face: PathBuf,
    /// `uniform:<percent>` or a JSON object such as `{"forehead": 60}`.
    #[arg(long, value_parser = parse_targets)]
    pub targets: TargetSpec,
    #[arg(long)]
    pub ethnicity: String,
    #[arg(long, default_value_t = 0.2)]
    pub gamma_n: f64,
    #[arg(long, default_value_t = 40)]
    pub gamma_inf: usize,
    #[arg(long, default_value_t = 0.8)]
    pub gamma_g: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the whole-face refiner pass.
    #[arg(long)]
    pub no_refiner: bool,
    #[arg(long, default_value_t = ldla_core::inference::DEFAULT_REFINER_STRENGTH)]
    pub refiner_strength: f64,
    /// Landmark JSON for the face; default zone boxes otherwise.
    #[arg(long, conflicts_with = "landmark_detector")]
    pub landmarks: Option<PathBuf>,
    /// Program reading a PNG on stdin and printing landmark JSON.
    #[arg(long)]
    pub landmark_detector: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest of real crops.
    #[arg(long)]
    pub real: PathBuf,
    /// Manifest of generated crops; its scores are the requested targets.
    #[arg(long)]
    pub generated: PathBuf,
    /// Also report FID between two random halves of the real set.
    #[arg(long)]
    pub split_reference: bool,
    /// Score generated crops with this checkpoint's ScoreNet instead of the
    /// wrinkle-density oracle.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature grid of the pooled-colour extractor.
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "LDLA_PORT", default_value_t = ldla_service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = ldla_service::DEFAULT_WORKERS)]
    pub workers: usize,
    /// Allowed UI origin; any origin when absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Use the identity refiner.
    #[arg(long)]
    pub no_refiner: bool,
    #[arg(long, default_value_t = ldla_core::inference::DEFAULT_REFINER_STRENGTH)]
    pub refiner_strength: f64,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn target_specs() {
        assert_eq!(parse_targets("uniform:85"), Ok(TargetSpec::Uniform(0.85)));
        assert_eq!(parse_targets("{}"), Ok(TargetSpec::PerZone(BTreeMap::new())));
        let TargetSpec::PerZone(m) = parse_targets(r#"{"forehead": 60, "glabellar": 5}"#).unwrap() else {
            panic!()
        };
        assert_eq!(m["forehead"], 0.6);
        assert_eq!(m["glabellar"], 0.05);
        assert!(parse_targets("uniform:101").is_err());
        assert!(parse_targets("uniform:x").is_err());
        assert!(parse_targets(r#"{"forehead": 0.5}"#).is_err());
        assert!(parse_targets("forehead=10").is_err());
    }

    #[test]
    fn train_flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "ldla",
            "train",
            "--lambda-cycle",
            "0",
            "--lambda-score",
            "0",
            "--steps",
            "5",
            "--checkpoint-out",
            "out dir/a.ckpt",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(
            t.flag_overrides(),
            [
                "steps=5",
                "weights.lambda_cycle=0",
                "weights.lambda_score=0",
                r#"checkpoint_out="out dir/a.ckpt""#
            ]
        );
    }
}
