//! Argument parsing and mapping of flags onto config keys.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use ternary_llm::Result;

use crate::commands;
use crate::config::{parse_assignment, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ternary", version, about = "Ternary quantization-aware training toolkit")]
pub struct Cli {
    /// JSON file of dotted config keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    #[arg(long, global = true)]
    pub corpus: Option<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Quantizer {
    Twn,
    Dlt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureKd {
    Off,
    Mse,
    MseClamp,
    MseSkip,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Ste {
    Paper,
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlphaGrad {
    Analytic,
    Paper,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct QuantFlags {
    #[arg(long, value_enum)]
    pub quantizer: Option<Quantizer>,
    /// Group size along the input dimension; 0 means one group per row.
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long, value_enum)]
    pub ste: Option<Ste>,
    #[arg(long, value_enum)]
    pub alpha_grad: Option<AlphaGrad>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the generated training corpus to a file.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a full-precision model from scratch.
    TrainFp,
    /// Quantization-aware training from a full-precision teacher.
    TrainQat {
        #[arg(long)]
        teacher: Option<String>,
        #[command(flatten)]
        quant: QuantFlags,
        #[arg(long, value_enum)]
        feature_kd: Option<FeatureKd>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        feat_layers: Option<usize>,
    },
    /// Ternarize a full-precision checkpoint without training.
    Quantize {
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Convert a quantized checkpoint to packed 2-bit weights.
    Pack,
    /// Validation perplexity of a dense or packed checkpoint.
    Eval,
    /// Per-group weight statistics and histograms.
    Inspect {
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Operation counts and kernel throughput of a quantized model.
    Bench,
    /// Check the normalized output error bound on every linear layer.
    CheckTheorem1 {
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Desk-scale ablation of quantizers and distillation objectives.
    Ablation,
}

fn name_of<T: ValueEnum>(v: T) -> Value {
    Value::from(v.to_possible_value().expect("named variant").get_name())
}

impl QuantFlags {
    fn push(&self, out: &mut Vec<(String, Value)>) {
        if let Some(q) = self.quantizer {
            out.push(("quant.mode".into(), name_of(q)));
        }
        if let Some(g) = self.group_size {
            out.push(("model.group_size".into(), g.into()));
        }
        if let Some(s) = self.ste {
            out.push(("model.ste.weight_grad".into(), name_of(s)));
        }
        if let Some(a) = self.alpha_grad {
            out.push(("model.ste.alpha_grad".into(), name_of(a)));
        }
    }
}

impl Cli {
    /// Config file, then `--set` pairs, then dedicated flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs = Vec::new();
        for s in &self.sets {
            pairs.push(parse_assignment(s)?);
        }
        let mut opt = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                pairs.push((key.to_string(), v));
            }
        };
        opt("paths.out_dir", self.out_dir.clone().map(Value::from));
        opt("paths.corpus", self.corpus.clone().map(Value::from));
        opt("paths.checkpoint", self.checkpoint.clone().map(Value::from));
        opt("train.seed", self.seed.map(Value::from));
        opt("train.total_steps", self.steps.map(Value::from));
        opt("train.lr", self.lr.map(Value::from));
        match &self.command {
            Command::TrainQat {
                teacher,
                quant,
                feature_kd,
                epsilon,
                delta,
                feat_layers,
            } => {
                if let Some(t) = teacher {
                    pairs.push(("paths.teacher".into(), t.clone().into()));
                }
                quant.push(&mut pairs);
                if let Some(f) = feature_kd {
                    pairs.push(("distill.feature_metric".into(), name_of(*f)));
                }
                if let Some(e) = epsilon {
                    pairs.push(("distill.epsilon".into(), (*e).into()));
                }
                if let Some(d) = delta {
                    pairs.push(("distill.delta".into(), (*d).into()));
                }
                if let Some(l) = feat_layers {
                    pairs.push(("distill.n_feat_layers".into(), (*l).into()));
                }
            }
            Command::Quantize { quant } | Command::CheckTheorem1 { quant } => quant.push(&mut pairs),
            Command::Inspect { group_size: Some(g) } => pairs.push(("model.group_size".into(), (*g).into())),
            _ => {}
        }
        let cfg = base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> Result<Value> {
        let cfg = self.resolve_config()?;
        match &self.command {
            Command::GenCorpus { out } => commands::gen_corpus(&cfg, out),
            Command::TrainFp => commands::cmd_train_fp(&cfg),
            Command::TrainQat { .. } => commands::cmd_train_qat(&cfg),
            Command::Quantize { .. } => commands::cmd_quantize(&cfg),
            Command::Pack => commands::cmd_pack(&cfg),
            Command::Eval => commands::cmd_eval(&cfg),
            Command::Inspect { .. } => commands::cmd_inspect(&cfg),
            Command::Bench => commands::cmd_bench(&cfg),
            Command::CheckTheorem1 { .. } => commands::cmd_check_theorem1(&cfg),
            Command::Ablation => commands::cmd_ablation(&cfg),
        }
    }
}
