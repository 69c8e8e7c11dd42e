//! Desk-scale quantizer and distillation ablation: one full-precision
//! teacher, then TWN and DLT students trained from it under the same
//! budget with different objectives.

use serde::Serialize;
use ternary_llm::data::{synthetic_text, Corpus};
use ternary_llm::distill::{DistillConfig, FeatureMetric};
use ternary_llm::model::{ModelConfig, TransformerModel};
use ternary_llm::train::{evaluate_perplexity, train_fp, train_qat, TrainConfig};
use ternary_llm::{GroupSpec, QuantMode, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub corpus_seed: u64,
    pub corpus_bytes: usize,
    pub val_fraction: f64,
    pub teacher: TrainConfig,
    pub qat: TrainConfig,
    pub group_size: GroupSpec,
    /// Distilled layers in the feature-KD arm.
    pub feat_layers: usize,
}

impl Default for AblationSetup {
    fn default() -> Self {
        let teacher_steps = 6000;
        Self {
            model: ModelConfig {
                d_ff: 256,
                ..ModelConfig::default()
            },
            init_seed: 1,
            corpus_seed: 7,
            corpus_bytes: 400_000,
            val_fraction: 0.1,
            teacher: TrainConfig {
                lr: 1e-3,
                total_steps: teacher_steps,
                warmup_steps: teacher_steps / 10,
                eval_interval: 0,
                ..TrainConfig::default()
            },
            qat: TrainConfig {
                eval_interval: 0,
                ..TrainConfig::ablation()
            },
            group_size: GroupSpec::Size(64),
            feat_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub name: String,
    pub val_ppl: f64,
    /// Every logged loss term was finite.
    pub finite_losses: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub fp: f64,
    pub twn_no_training: f64,
    pub arms: Vec<ArmResult>,
}

impl AblationResult {
    fn arm(&self, name: &str) -> f64 {
        self.arms.iter().find(|a| a.name == name).map_or(f64::NAN, |a| a.val_ppl)
    }

    /// FP ≤ DLT+OFF+logits < DLT-label < TWN-label < TWN untrained.
    pub fn ordering_holds(&self) -> bool {
        let off = self.arm("dlt-off-logits");
        let dlt = self.arm("dlt-label");
        let twn = self.arm("twn-label");
        self.fp <= off && off < dlt && dlt < twn && twn < self.twn_no_training
    }

    pub fn off_run_finite(&self) -> bool {
        self.arms.iter().any(|a| a.name == "dlt-off-logits" && a.finite_losses)
    }
}

pub fn run_ablation(setup: &AblationSetup, mut progress: impl FnMut(&str)) -> Result<AblationResult> {
    let text = synthetic_text(setup.corpus_seed, setup.corpus_bytes);
    let corpus = Corpus::from_bytes(text.as_bytes(), setup.val_fraction)?;
    let ppl = |m: &TransformerModel<f32>| {
        let seq = setup.qat.seq_len;
        evaluate_perplexity(m, &corpus.val, seq, seq, setup.qat.batch_size)
    };

    let mut teacher = TransformerModel::<f32>::init(setup.model.clone(), setup.init_seed)?;
    train_fp(&mut teacher, &corpus, &setup.teacher, |_| {})?;
    let fp = ppl(&teacher)?;
    progress(&format!("fp teacher {fp:.4}"));

    let mut rtn = teacher.clone();
    rtn.quantize(QuantMode::Twn, setup.group_size)?;
    let twn_no_training = ppl(&rtn)?;
    progress(&format!("twn-no-training {twn_no_training:.4}"));

    let off = DistillConfig {
        n_feat_layers: setup.feat_layers,
        feature_metric: FeatureMetric::Off,
        ..DistillConfig::default()
    };
    let plans = [
        ("twn-label", QuantMode::Twn, DistillConfig::label_only()),
        ("dlt-label", QuantMode::Dlt, DistillConfig::label_only()),
        ("dlt-off-logits", QuantMode::Dlt, off),
    ];
    let mut arms = Vec::new();
    for (name, mode, distill) in plans {
        let mut student = teacher.clone();
        student.quantize(mode, setup.group_size)?;
        let cfg = TrainConfig {
            distill,
            ..setup.qat.clone()
        };
        let mut finite = true;
        let outcome = train_qat(&mut student, &teacher, &corpus, &cfg, |r| {
            finite &= [r.label, r.logits_kd, r.feat_kd, r.total].iter().all(|v| v.is_finite());
        })?;
        progress(&format!("{name} {:.4}", outcome.final_val_ppl));
        arms.push(ArmResult {
            name: name.to_string(),
            val_ppl: outcome.final_val_ppl,
            finite_losses: finite,
        });
    }
    Ok(AblationResult {
        fp,
        twn_no_training,
        arms,
    })
}
