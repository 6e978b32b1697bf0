use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use openvad::config::Config;
use openvad::types::Split;

#[derive(Parser, Debug)]
#[command(name = "openvad", version, about = "Open-world video anomaly detection on precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic feature dataset.
    Synth(SynthArgs),
    /// Build the nearest-normal-neighbour index used by video synthesis.
    Knn(KnnArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint under protocol 1 or 2.
    Eval(EvalArgs),
    /// Score one video under a definition file.
    Score(ScoreArgs),
    /// Serve the scoring API over HTTP.
    Serve(ServeArgs),
}

/// Declares one optional flag per `Config` field plus the documented default,
/// which a unit test checks against `Config::default()`.
macro_rules! config_args {
    ($( $field:ident : $ty:ty = $default:literal, $help:literal; )*) => {
        /// Overrides for every `Config` field; unset flags keep the base value.
        #[derive(Args, Debug, Clone, Default)]
        pub struct ConfigArgs {
            /// JSON config file used as the base instead of the defaults.
            #[arg(long, value_name = "FILE")]
            pub config: Option<PathBuf>,
            $(
                #[arg(long, value_name = stringify!($ty), help = concat!($help, " [default: ", $default, "]"))]
                pub $field: Option<$ty>,
            )*
        }

        impl ConfigArgs {
            pub fn apply(&self, cfg: &mut Config) {
                $( if let Some(v) = self.$field { cfg.$field = v; } )*
            }

            #[cfg(test)]
            pub fn documented_defaults() -> Vec<(&'static str, &'static str)> {
                vec![$( (stringify!($field), $default) ),*]
            }
        }
    };
}

config_args! {
    hidden_size: usize = "512", "Model width";
    encoder_layers: usize = "2", "Temporal encoder blocks";
    fusion_layers: usize = "2", "Cross-modal fusion blocks";
    conv_kernel: usize = "9", "Detection-head kernel size (odd)";
    tau: f64 = "0.02", "Contrastive temperature";
    eta: f64 = "0.02", "Foreground/background aggregation temperature";
    theta: f64 = "0.7", "Synthesis probability";
    alpha: f64 = "0.5", "Normal-anchor probability";
    delta_m: usize = "5", "Maximum synthesized segments";
    knn_n: usize = "200", "Neighbours kept per video";
    batch_size: usize = "64", "Batch size";
    learning_rate: f64 = "0.00005", "AdamW learning rate";
    epochs: usize = "40", "Training epochs";
    topk_divisor: usize = "16", "Top-k size is L / divisor + 1";
    mil_align_temperature: f64 = "0.07", "MIL-align temperature";
    seed: u64 = "0", "Random seed";
    use_dvs: bool = "true", "Enable the synthesis loss";
    use_neg: bool = "true", "Enable the contrastive loss";
    language_guided: bool = "true", "Condition detection on the definition";
    restrict_dvs_third_term_to_m_gt_1: bool = "false", "Pseudo-label term only for multi-segment samples";
    adam_beta1: f64 = "0.9", "AdamW first-moment decay";
    adam_beta2: f64 = "0.999", "AdamW second-moment decay";
    adam_eps: f64 = "0.00000001", "AdamW epsilon";
    weight_decay: f64 = "0.01", "AdamW decoupled weight decay";
    grad_clip: f64 = "0", "Global gradient-norm clip (0 disables)";
    lr_decay: f64 = "1", "Per-epoch learning-rate multiplier";
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Abnormal categories [default: 5]
    #[arg(long)]
    pub num_categories: Option<usize>,
    /// Training videos [default: 200]
    #[arg(long)]
    pub train_videos: Option<usize>,
    /// Validation videos [default: 50]
    #[arg(long)]
    pub val_videos: Option<usize>,
    /// Test videos [default: 50]
    #[arg(long)]
    pub test_videos: Option<usize>,
    /// Feature width [default: 32]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Minimum steps per video [default: 20]
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Maximum steps per video [default: 60]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Anomalous fraction range of an abnormal video, as LOW,HIGH [default: 0.2,0.6]
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LOW,HIGH")]
    pub anomaly_fraction: Option<Vec<f64>>,
    /// Probability that a video is abnormal [default: 0.5]
    #[arg(long)]
    pub abnormal_ratio: Option<f64>,
    /// Feature noise standard deviation [default: 0.05]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Frames per feature step [default: 8]
    #[arg(long)]
    pub stride_frames: Option<u32>,
    /// Frame rate [default: 30]
    #[arg(long)]
    pub fps: Option<f32>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct KnnArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Feature repository directory.
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Output index (JSON).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Neighbour index; built on the fly when absent.
    #[arg(long, value_name = "FILE")]
    pub knn: Option<PathBuf>,
    /// Prototype table for the toy text encoder; without it class embeddings
    /// must come from --taxonomy.
    #[arg(long, value_name = "FILE")]
    pub prototypes: Option<PathBuf>,
    /// Class-name definition used in class-name batches [default: from prototypes or manifest labels]
    #[arg(long, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,
    /// Best checkpoint (by validation AUC; last epoch without validation).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the last-epoch checkpoint here.
    #[arg(long, value_name = "FILE")]
    pub last: Option<PathBuf>,
    /// JSONL training log [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// 1: cross-manifest evaluation; 2: concept drift over class subsets.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub protocol: u8,
    /// Protocol 1: JSON array of evaluation sets.
    #[arg(long, value_name = "FILE", required_if_eq("protocol", "1"))]
    pub sets: Option<PathBuf>,
    /// Protocol 2: test manifest.
    #[arg(long, value_name = "FILE", required_if_eq("protocol", "2"))]
    pub manifest: Option<PathBuf>,
    /// Protocol 2: feature repository.
    #[arg(long, value_name = "DIR", required_if_eq("protocol", "2"))]
    pub features: Option<PathBuf>,
    /// Protocol 2: base definition the subsets are drawn from.
    #[arg(long, value_name = "FILE", required_if_eq("protocol", "2"))]
    pub definition: Option<PathBuf>,
    /// Protocol 2: subset file.
    #[arg(long, value_name = "FILE", required_if_eq("protocol", "2"))]
    pub subsets: Option<PathBuf>,
    /// Protocol 2: manifest split [default: test]
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Per-video score dump (JSONL).
    #[arg(long, value_name = "FILE")]
    pub scores: Option<PathBuf>,
    /// Report destination [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    #[arg(long, value_name = "ID")]
    pub video: String,
    #[arg(long, value_name = "FILE")]
    pub definition: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Manifest supplying ground truth and the served video list.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Serve only this manifest split.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Allowed CORS origin [default: any]
    #[arg(long, value_name = "ORIGIN")]
    pub cors_origin: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (train, val, test)")),
    }
}
