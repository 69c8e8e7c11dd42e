//! Command implementations. Each returns its JSON report, which is also
//! written under `paths.out_dir`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use ternary_llm::data::{load_corpus, synthetic_text, Corpus};
use ternary_llm::distill::check_theorem1_sampled;
use ternary_llm::model::{
    convert_to_packed, load_checkpoint, load_packed, save_checkpoint, save_packed, LinearKind, PackedLinear,
    PackedModel, TransformerModel, WeightMode,
};
use ternary_llm::quantizer::{group_stats, GroupStats};
use ternary_llm::tensor::{self, Tensor};
use ternary_llm::train::{
    evaluate_perplexity, train_fp, train_qat, write_metrics_csv, write_metrics_jsonl, MetricsRow,
};
use ternary_llm::{Error, OpCounts, Result, TernaryGroupQuant};

use crate::ablation::{run_ablation, AblationSetup};
use crate::config::RunConfig;

pub const FP_CHECKPOINT: &str = "fp.tllm";
pub const QAT_CHECKPOINT: &str = "qat.tllm";
pub const QUANTIZED_CHECKPOINT: &str = "quantized.tllm";
pub const PACKED_MODEL: &str = "packed.tllm";

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn required_input(path: &str, what: &str) -> Result<PathBuf> {
    if path.is_empty() {
        return Err(Error::Input(format!("no {what} given")));
    }
    let p = PathBuf::from(path);
    if !p.is_file() {
        return Err(Error::Input(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

/// The configured corpus, or generated text when no path is set.
pub fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.paths.corpus.is_empty() {
        let text = synthetic_text(cfg.data.synthetic_seed, cfg.data.synthetic_bytes);
        return Corpus::from_bytes(text.as_bytes(), cfg.data.val_fraction);
    }
    let path = required_input(&cfg.paths.corpus, "corpus")?;
    load_corpus(path, cfg.data.val_fraction)
}

fn val_ppl(model: &TransformerModel<f32>, corpus: &Corpus, cfg: &RunConfig) -> Result<f64> {
    evaluate_perplexity(model, &corpus.val, cfg.train.seq_len, cfg.train.seq_len, cfg.train.batch_size)
}

fn write_metrics(dir: &Path, stem: &str, rows: &[MetricsRow]) -> Result<()> {
    write_metrics_csv(rows, dir.join(format!("{stem}.csv")))?;
    write_metrics_jsonl(rows, dir.join(format!("{stem}.jsonl")))
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let text = synthetic_text(cfg.data.synthetic_seed, cfg.data.synthetic_bytes);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, &text)?;
    Ok(json!({
        "command": "gen-corpus",
        "config_digest": cfg.digest(),
        "bytes": text.len(),
        "path": out.display().to_string(),
    }))
}

pub fn cmd_train_fp(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let corpus = corpus(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let mut model = TransformerModel::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    let initial = val_ppl(&model, &corpus, cfg)?;
    let outcome = train_fp(&mut model, &corpus, &cfg.train, |_| {})?;
    let ckpt = dir.join(FP_CHECKPOINT);
    save_checkpoint(&model, &ckpt)?;
    write_metrics(&dir, "metrics_fp", &outcome.rows)?;
    let report = json!({
        "command": "train-fp",
        "config_digest": cfg.digest(),
        "corpus_digest": corpus.digest,
        "steps": cfg.train.total_steps,
        "initial_val_ppl": initial,
        "final_val_ppl": outcome.final_val_ppl,
        "checkpoint": ckpt.display().to_string(),
    });
    write_json(&dir.join("summary_fp.json"), &report)?;
    Ok(report)
}

/// Teacher-initialized student carrying the run's quantization settings.
fn student_from(teacher: &TransformerModel<f32>, cfg: &RunConfig) -> Result<TransformerModel<f32>> {
    if teacher.is_quantized() {
        return Err(Error::Input("teacher checkpoint is already quantized".into()));
    }
    let mut student = teacher.clone();
    student.config.ste = cfg.model.ste;
    student.config.quantized_linears = cfg.model.quantized_linears.clone();
    student.quantize(cfg.quant.mode, cfg.model.group_size)?;
    Ok(student)
}

pub fn cmd_train_qat(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let teacher_path = required_input(&cfg.paths.teacher, "teacher checkpoint")?;
    let corpus = corpus(cfg)?;
    let teacher = load_checkpoint::<f32>(&teacher_path)?;
    cfg.distill.validate(teacher.config.n_layers)?;
    let mut student = student_from(&teacher, cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let initial = val_ppl(&student, &corpus, cfg)?;
    let mut rows = Vec::new();
    let result = train_qat(&mut student, &teacher, &corpus, &cfg.train, |r| rows.push(r.clone()));
    let ckpt = dir.join(QAT_CHECKPOINT);
    // on divergence the student still holds its last good parameters
    save_checkpoint(&student, &ckpt)?;
    write_metrics(&dir, "metrics_qat", &rows)?;
    let outcome = result?;
    let report = json!({
        "command": "train-qat",
        "config_digest": cfg.digest(),
        "corpus_digest": corpus.digest,
        "quantizer": cfg.quant.mode,
        "feature_kd": cfg.distill.feature_metric,
        "epsilon": cfg.distill.epsilon,
        "delta": cfg.distill.delta,
        "feat_layers": cfg.distill.n_feat_layers,
        "group_size": cfg.model.group_size,
        "steps": cfg.train.total_steps,
        "initial_val_ppl": initial,
        "final_val_ppl": outcome.final_val_ppl,
        "checkpoint": ckpt.display().to_string(),
    });
    write_json(&dir.join("summary_qat.json"), &report)?;
    Ok(report)
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let corpus = corpus(cfg)?;
    let fp = load_checkpoint::<f32>(&path)?;
    let q = student_from(&fp, cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let out = dir.join(QUANTIZED_CHECKPOINT);
    save_checkpoint(&q, &out)?;
    let report = json!({
        "command": "quantize",
        "config_digest": cfg.digest(),
        "quantizer": cfg.quant.mode,
        "group_size": cfg.model.group_size,
        "fp_val_ppl": val_ppl(&fp, &corpus, cfg)?,
        "quantized_val_ppl": val_ppl(&q, &corpus, cfg)?,
        "checkpoint": out.display().to_string(),
    });
    write_json(&dir.join("quantize_report.json"), &report)?;
    Ok(report)
}

fn random_prompts(cfg: &RunConfig, vocab: usize, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.check.seed);
    (0..count)
        .map(|_| (0..cfg.train.seq_len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

pub fn cmd_pack(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint::<f32>(&path)?;
    let packed = convert_to_packed(&model)?;
    let dir = prepare_out_dir(cfg)?;
    let out = dir.join(PACKED_MODEL);
    save_packed(&packed, &out)?;
    let reloaded = load_packed(&out)?;
    let mut max_diff = 0f32;
    let mut reload_identical = true;
    for prompt in random_prompts(cfg, model.config.vocab_size, cfg.check.pack_prompts) {
        let dense = model.logits(&prompt, 1, prompt.len())?;
        let (p, _) = packed.forward(&prompt, 1, prompt.len())?;
        let (r, _) = reloaded.forward(&prompt, 1, prompt.len())?;
        max_diff = max_diff.max(p.max_abs_diff(&dense));
        reload_identical &= r == p;
    }
    let (packed_bytes, dense_bytes) = packed.weight_bytes();
    let report = json!({
        "command": "pack",
        "config_digest": cfg.digest(),
        "prompts": cfg.check.pack_prompts,
        "max_abs_logit_diff": max_diff,
        "tolerance": cfg.check.pack_tolerance,
        "equivalent": (max_diff as f64) <= cfg.check.pack_tolerance,
        "reload_identical": reload_identical,
        "packed_weight_bytes": packed_bytes,
        "dense_weight_bytes": dense_bytes,
        "file_bytes": fs::metadata(&out)?.len(),
        "packed_model": out.display().to_string(),
    });
    write_json(&dir.join("pack_report.json"), &report)?;
    if !(report["equivalent"].as_bool() == Some(true) && reload_identical) {
        return Err(Error::Evaluation(format!(
            "packed logits differ from the training path by {max_diff}"
        )));
    }
    Ok(report)
}

/// Perplexity of a packed model over non-overlapping windows.
pub fn packed_perplexity(model: &PackedModel, stream: &[usize], seq_len: usize, batch: usize) -> Result<f64> {
    if stream.len() <= seq_len {
        return Err(Error::Input("evaluation stream is too short".into()));
    }
    let starts: Vec<usize> = (0..).map(|i| i * seq_len).take_while(|s| s + seq_len < stream.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in starts.chunks(batch) {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for &s in chunk {
            inputs.extend_from_slice(&stream[s..s + seq_len]);
            targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
        }
        let (logits, _) = model.forward(&inputs, chunk.len(), seq_len)?;
        let nll = tensor::token_nll(&logits, &targets)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    Ok((total / count as f64).exp())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let corpus = corpus(cfg)?;
    let (kind, ppl) = match load_checkpoint::<f32>(&path) {
        Ok(m) => ("dense", val_ppl(&m, &corpus, cfg)?),
        Err(Error::Format(_)) => {
            let p = load_packed(&path)?;
            ("packed", packed_perplexity(&p, &corpus.val, cfg.train.seq_len, cfg.train.batch_size)?)
        }
        Err(e) => return Err(e),
    };
    let dir = prepare_out_dir(cfg)?;
    let report = json!({
        "command": "eval",
        "config_digest": cfg.digest(),
        "corpus_digest": corpus.digest,
        "checkpoint": path.display().to_string(),
        "kind": kind,
        "val_tokens": corpus.val.len(),
        "val_ppl": ppl,
    });
    write_json(&dir.join("eval_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInspection {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub groups: Vec<GroupStats>,
    /// Share of groups whose mean is negative / whose in-band mean is negative.
    pub frac_negative_mean: f64,
    pub frac_negative_band_mean: f64,
    pub mean_abs_skewness: f64,
}

pub fn inspect_weight(name: &str, w: &Tensor<f32>, spec: ternary_llm::GroupSpec) -> Result<LayerInspection> {
    let groups = group_stats(w, spec)?;
    let n = groups.len() as f64;
    let band: Vec<f64> = groups.iter().filter_map(|g| g.mean_of_clipped_band).collect();
    Ok(LayerInspection {
        name: name.to_string(),
        rows: w.rows(),
        cols: w.cols(),
        frac_negative_mean: groups.iter().filter(|g| g.mean < 0.0).count() as f64 / n,
        frac_negative_band_mean: if band.is_empty() {
            0.0
        } else {
            band.iter().filter(|&&m| m < 0.0).count() as f64 / band.len() as f64
        },
        mean_abs_skewness: groups.iter().map(|g| g.skewness.abs()).sum::<f64>() / n,
        groups,
    })
}

/// `lo,hi,count` rows over `[-m, m]` with `m = max|w|`.
pub fn histogram_csv(w: &[f32], bins: usize) -> String {
    let m = w.iter().fold(0f32, |a, v| a.max(v.abs())).max(f32::MIN_POSITIVE) as f64;
    let width = 2.0 * m / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in w {
        let b = (((v as f64) + m) / width) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let mut out = String::from("lo,hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = -m + i as f64 * width;
        out.push_str(&format!("{lo},{},{c}\n", lo + width));
    }
    out
}

pub fn cmd_inspect(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint::<f32>(&path)?;
    let spec = if model.is_quantized() { model.config.group_size } else { cfg.model.group_size };
    let dir = prepare_out_dir(cfg)?;
    let hist_dir = dir.join("histograms");
    fs::create_dir_all(&hist_dir)?;
    let mut layers = Vec::new();
    for l in 0..model.config.n_layers {
        for kind in LinearKind::ALL {
            let p = model.params.get(model.linear(l, kind).weight);
            layers.push(inspect_weight(&p.name, &p.value, spec)?);
            fs::write(hist_dir.join(format!("{}.csv", p.name)), histogram_csv(p.value.data(), cfg.check.histogram_bins))?;
        }
    }
    let report = json!({
        "command": "inspect",
        "config_digest": cfg.digest(),
        "checkpoint": path.display().to_string(),
        "group_size": spec,
        "layers": layers,
    });
    write_json(&dir.join("inspect_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCounts {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub groups: usize,
    pub adds_per_token: u64,
    pub muls_per_token: u64,
    pub dense_muls_per_token: u64,
}

pub fn layer_counts(model: &PackedModel) -> Vec<LayerCounts> {
    let mut out = Vec::new();
    for l in 0..model.config.n_layers {
        for kind in LinearKind::ALL {
            if let PackedLinear::Ternary(m) = model.linear(l, kind) {
                let c = m.op_counts(1);
                out.push(LayerCounts {
                    name: format!("layers.{l}.{}", kind.name()),
                    rows: m.rows(),
                    cols: m.cols(),
                    groups: m.group_count(),
                    adds_per_token: c.adds,
                    muls_per_token: c.muls,
                    dense_muls_per_token: (m.rows() * m.cols()) as u64,
                });
            }
        }
    }
    out
}

/// A packed model from either a quantized dense checkpoint or a packed file.
fn load_any_quantized(path: &Path) -> Result<PackedModel> {
    match load_checkpoint::<f32>(path) {
        Ok(m) => convert_to_packed(&m),
        Err(Error::Format(_)) => load_packed(path),
        Err(e) => Err(e),
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let packed = load_any_quantized(&path)?;
    let layers = layer_counts(&packed);
    let tokens = cfg.check.bench_tokens.max(1);
    let seq = tokens.min(packed.config.max_seq_len);
    let batch = tokens.div_ceil(seq);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.check.seed);
    let prompt: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..packed.config.vocab_size)).collect();
    let (_, counted) = packed.forward(&prompt, batch, seq)?;
    let expected = layers.iter().fold(OpCounts::default(), |mut acc, l| {
        acc.adds += l.adds_per_token * (batch * seq) as u64;
        acc.muls += l.muls_per_token * (batch * seq) as u64;
        acc
    });

    // kernel timing: packed vs dense dequantized matmul on each ternary layer
    let (mut packed_s, mut dense_s) = (0.0, 0.0);
    for l in 0..packed.config.n_layers {
        for kind in LinearKind::ALL {
            if let PackedLinear::Ternary(m) = packed.linear(l, kind) {
                let x = Tensor::<f32>::from_fn(&[tokens, m.cols()], |_| rng.random_range(-1.0..1.0));
                let dense = m.dequantize();
                for _ in 0..cfg.check.bench_repeats {
                    let t = Instant::now();
                    m.linear_tokens(&x)?;
                    packed_s += t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    tensor::matmul_nt(&x, &dense)?;
                    dense_s += t.elapsed().as_secs_f64();
                }
            }
        }
    }
    let per = (tokens * cfg.check.bench_repeats) as f64;
    let dir = prepare_out_dir(cfg)?;
    let report = json!({
        "command": "bench",
        "config_digest": cfg.digest(),
        "checkpoint": path.display().to_string(),
        "layers": layers,
        "forward_tokens": batch * seq,
        "forward_counts": counted,
        "counts_match_layer_sum": counted == expected,
        "count_basis": "per token: each ternary layer spends 2 multiplications per group for every token",
    });
    write_json(&dir.join("bench_report.json"), &report)?;
    // wall-clock numbers vary run to run, so they live in their own file
    let timing = json!({
        "config_digest": cfg.digest(),
        "tokens_per_s_packed": per / packed_s.max(1e-12),
        "tokens_per_s_dense": per / dense_s.max(1e-12),
    });
    write_json(&dir.join("bench_timing.json"), &timing)?;
    let mut full = report;
    full["timing"] = timing;
    Ok(full)
}

pub fn cmd_check_theorem1(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let path = required_input(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint::<f32>(&path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.check.seed);
    let mut layers = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for l in 0..model.config.n_layers {
        for kind in LinearKind::ALL {
            let w = model.params.get(model.linear(l, kind).weight).value.cast::<f64>();
            let w_q = if model.config.weight_mode == WeightMode::Fp {
                TernaryGroupQuant::init(&w, cfg.model.group_size, cfg.quant.mode)?.dequantize()
            } else {
                model.effective_weight(l, kind)?.cast::<f64>()
            };
            // the attention-side linears feed a d_model-wide norm; use its gain
            let gain = model.params.get(model.layers[l].mlp_norm.gain).value.cast::<f64>();
            let a: Vec<f64> = if w.rows() == gain.numel() { gain.data().to_vec() } else { vec![1.0; w.rows()] };
            let b = vec![0.0; w.rows()];
            let r = check_theorem1_sampled(&w, &w_q, &a, &b, cfg.check.theorem_samples, 16, &mut rng)?;
            worst = worst.max(r.max_violation);
            layers.push(json!({
                "name": format!("layers.{l}.{}", kind.name()),
                "max_violation": r.max_violation,
                "mean_cos": r.mean_cos,
                "samples": r.samples,
                "holds": r.holds,
            }));
        }
    }
    let holds = layers.iter().all(|l| l["holds"] == true);
    let dir = prepare_out_dir(cfg)?;
    let report = json!({
        "command": "check-theorem1",
        "config_digest": cfg.digest(),
        "checkpoint": path.display().to_string(),
        "max_violation": worst,
        "holds": holds,
        "layers": layers,
    });
    write_json(&dir.join("theorem1_report.json"), &report)?;
    Ok(report)
}

/// Runs the fixed desk ablation; only `paths.out_dir` is read from `cfg`.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<Value> {
    let dir = prepare_out_dir(cfg)?;
    let setup = AblationSetup::default();
    let result = run_ablation(&setup, |line| eprintln!("{line}"))?;
    let report = json!({
        "command": "ablation",
        "setup": setup,
        "result": result,
        "ordering_holds": result.ordering_holds(),
        "off_run_finite": result.off_run_finite(),
    });
    write_json(&dir.join("ablation_report.json"), &report)?;
    Ok(report)
}
