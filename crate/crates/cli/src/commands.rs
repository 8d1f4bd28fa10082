//! Subcommand bodies. Each reads its inputs through the run directory so that
//! their hashes land in the provenance record, and returns a JSON summary.

use std::path::{Path, PathBuf};

use orthoiqa::attacks::{run_attack, AttackConfig, AttackKind, AttackResult};
use orthoiqa::data::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, generate_dataset, sha256_hex, split_indices, Distortion, Split};
use orthoiqa::defense::{defend, DefendOptions};
use orthoiqa::eval::{evaluate, performance, Performance};
use orthoiqa::metrics::{abs_gain, normalize_pairs, r_score, weighted_summary, RScoreConfig, RobustnessReport, DEFAULT_DATASET_WEIGHTS};
use orthoiqa::nn::{train, ModelGraph, Optimizer, TrainConfig};
use orthoiqa::spectral::{certify, recommend};
use orthoiqa::toy::toy_model_sized;
use orthoiqa::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::*;
use crate::plot::curves_svg;
use crate::rational::Rational;
use crate::rundir::RunDir;

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_IMAGES: &str = "images.qten";
pub const MODEL_FILE: &str = "model.oiqa";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub label: f64,
    pub distortion: Distortion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    pub split: Split,
    pub images_sha256: String,
    pub samples: Vec<SampleMeta>,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn indices(&self, split: SplitArg) -> Vec<usize> {
        match split {
            SplitArg::Train => self.manifest.split.train.clone(),
            SplitArg::Val => self.manifest.split.val.clone(),
            SplitArg::Test => self.manifest.split.test.clone(),
            SplitArg::All => (0..self.images.len()).collect(),
        }
    }

    pub fn select(&self, split: SplitArg) -> (Vec<usize>, Vec<Tensor>, Vec<f64>) {
        let idx = self.indices(split);
        let images = idx.iter().map(|&i| self.images[i].clone()).collect();
        let labels = idx.iter().map(|&i| self.manifest.samples[i].label).collect();
        (idx, images, labels)
    }
}

fn stack(tensors: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(tensors[0].shape());
    Tensor::new(shape, tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let inner = t.shape()[1..].to_vec();
    let per: usize = inner.iter().product();
    t.data().chunks(per).map(|c| Tensor::new(inner.clone(), c.to_vec())).collect()
}

fn load_dataset(run: &mut RunDir, dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&run.read_input(&dir.join(DATASET_MANIFEST))?)
        .map_err(|e| Error::Input(format!("invalid dataset manifest in {}: {e}", dir.display())))?;
    let bytes = run.read_input(&dir.join(DATASET_IMAGES))?;
    if sha256_hex(&bytes) != manifest.images_sha256 {
        return Err(Error::Input(format!("{} does not match its manifest hash", dir.join(DATASET_IMAGES).display())));
    }
    let images = unstack(&decode_tensor(&bytes)?)?;
    if images.len() != manifest.n || manifest.samples.len() != manifest.n {
        return Err(Error::Input(format!("dataset in {} is inconsistent with its manifest", dir.display())));
    }
    Ok(Dataset { manifest, images })
}

/// Accepts a checkpoint file or a run directory holding one.
fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_model(run: &mut RunDir, path: &Path) -> Result<ModelGraph> {
    decode_checkpoint(&run.read_input(&resolve(path, MODEL_FILE))?)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))
}

pub fn gen_data(run: &mut RunDir, a: &GenDataArgs) -> Result<Value> {
    let samples = generate_dataset(a.n, a.size, a.seed)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let image_bytes = encode_tensor(&stack(&images)?);
    let manifest = DatasetManifest {
        n: a.n,
        image_size: a.size,
        seed: a.seed,
        split: split_indices(a.n, a.seed),
        images_sha256: sha256_hex(&image_bytes),
        samples: samples.iter().map(|s| SampleMeta { label: s.label, distortion: s.distortion }).collect(),
    };
    run.write(DATASET_IMAGES, &image_bytes)?;
    run.write_json(DATASET_MANIFEST, &manifest)?;
    eprintln!("generated {} samples of {}×{} ({} train / {} val / {} test)", a.n, a.size, a.size, manifest.split.train.len(), manifest.split.val.len(), manifest.split.test.len());
    Ok(json!({
        "n": a.n,
        "size": a.size,
        "train": manifest.split.train.len(),
        "val": manifest.split.val.len(),
        "test": manifest.split.test.len(),
    }))
}

#[derive(Serialize)]
struct TrainOutput {
    config: TrainConfig,
    loss_curve: Vec<f64>,
    score_range: orthoiqa::nn::ScoreRange,
    val: Option<Performance>,
    test: Option<Performance>,
}

/// Correlations need at least three samples; tiny splits report none.
fn maybe_performance(model: &ModelGraph, images: &[Tensor], labels: &[f64]) -> Result<Option<Performance>> {
    if images.len() < 3 {
        return Ok(None);
    }
    match performance(model, images, labels) {
        Ok(p) => Ok(Some(p)),
        Err(Error::Correlation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn train_cmd(run: &mut RunDir, a: &TrainArgs) -> Result<Value> {
    let data = load_dataset(run, &a.data)?;
    let (_, x, y) = data.select(SplitArg::Train);
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, optimizer: Optimizer::default(), nt_lambda: a.nt_lambda, batch_size: a.batch_size, seed: a.seed };
    let mut model = toy_model_sized(data.manifest.image_size, a.seed)?;
    let report = train(&mut model, &x, &y, &cfg)?;
    for (e, l) in report.loss_curve.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {l:.6}", e + 1);
    }
    let (_, vx, vy) = data.select(SplitArg::Val);
    let (_, tx, ty) = data.select(SplitArg::Test);
    let out = TrainOutput {
        config: cfg,
        loss_curve: report.loss_curve.clone(),
        score_range: report.score_range,
        val: maybe_performance(&model, &vx, &vy)?,
        test: maybe_performance(&model, &tx, &ty)?,
    };
    run.write(MODEL_FILE, &encode_checkpoint(&model)?)?;
    run.write_json("train.json", &out)?;
    Ok(json!({
        "epochs": a.epochs,
        "final_loss": report.loss_curve.last(),
        "test_srocc": out.test.map(|p| p.srocc),
        "test_plcc": out.test.map(|p| p.plcc),
    }))
}

#[derive(Serialize)]
struct CertifyRow {
    layer_index: usize,
    c_in: usize,
    c_out: usize,
    s_in: String,
    s_out: String,
    ratio: f64,
    sigma1: f64,
    frobenius: f64,
}

pub fn certify_cmd(run: &mut RunDir, a: &CertifyArgs) -> Result<Value> {
    let model = load_model(run, &a.model)?;
    let certs = certify(&model)?;
    let placements: Vec<_> = certs.iter().map(|c| c.placement.clone()).collect();
    let recommendation = recommend(&placements);
    let rows: Vec<CertifyRow> = certs
        .iter()
        .map(|c| CertifyRow {
            layer_index: c.placement.layer_index,
            c_in: c.placement.c_in,
            c_out: c.placement.c_out,
            s_in: format!("{}x{}", c.placement.s_in.0, c.placement.s_in.1),
            s_out: format!("{}x{}", c.placement.s_out.0, c.placement.s_out.1),
            ratio: c.placement.ratio,
            sigma1: c.sigma1,
            frobenius: c.frobenius,
        })
        .collect();
    for r in &rows {
        eprintln!("layer {:>3}  {:>4}→{:<4}  ratio {:.4}  σ₁ {:.4}  ‖·‖F {:.4}", r.layer_index, r.c_in, r.c_out, r.ratio, r.sigma1, r.frobenius);
    }
    run.write("certify.csv", &csv_bytes(&rows)?)?;
    run.write_json("certify.json", &json!({ "layers": certs, "recommendation": recommendation }))?;
    Ok(json!({ "layers": rows.len(), "recommendation": recommendation }))
}

pub fn defend_cmd(run: &mut RunDir, a: &DefendArgs) -> Result<Value> {
    let model = load_model(run, &a.model)?;
    let data = load_dataset(run, &a.data)?;
    let (_, x, y) = data.select(SplitArg::Train);
    let opts = DefendOptions {
        position: a.position,
        skip_block: a.skip_block,
        prune_rate: a.rate,
        criterion: a.criterion,
        fine_tune_epochs: a.epochs,
        train: TrainConfig { lr: a.lr, batch_size: a.batch_size, seed: a.seed, ..TrainConfig::default() },
        seed: a.seed,
    };
    let (defended, record) = defend(&model, &x, &y, &opts)?;
    let (_, tx, ty) = data.select(SplitArg::Test);
    let before = maybe_performance(&model, &tx, &ty)?;
    let after = maybe_performance(&defended, &tx, &ty)?;
    eprintln!(
        "block at {:?}, {} channels masked, test SROCC {:?} → {:?}",
        record.block_position,
        record.masks.iter().map(|m| m.channels.len()).sum::<usize>(),
        before.map(|p| p.srocc),
        after.map(|p| p.srocc)
    );
    run.write(MODEL_FILE, &encode_checkpoint(&defended)?)?;
    run.write_json("defense.json", &json!({ "record": record, "test_before": before, "test_after": after }))?;
    Ok(json!({
        "block_position": record.block_position,
        "masked": record.masks.iter().map(|m| m.channels.len()).sum::<usize>(),
        "test_srocc_before": before.map(|p| p.srocc),
        "test_srocc_after": after.map(|p| p.srocc),
    }))
}

fn attack_template(kind: AttackKind, steps: Option<usize>, step_size: Option<Rational>, smooth: f64, seed: u64) -> AttackConfig {
    let base = match kind {
        AttackKind::Pgd => AttackConfig::pgd(0.0, steps.unwrap_or(1)),
        AttackKind::Uap => AttackConfig::uap(0.0, steps.unwrap_or(10)),
        AttackKind::Stadv => AttackConfig::stadv(steps.unwrap_or(5)),
    };
    AttackConfig { step_size: step_size.map_or(base.step_size, Rational::value), flow_smoothness: smooth, seed, ..base }
}

#[derive(Serialize)]
struct AttackRow {
    image_id: usize,
    clean: f64,
    attacked: f64,
    delta: f64,
    linf: f64,
}

fn attack_rows(result: &AttackResult, ids: &[usize], range: orthoiqa::nn::ScoreRange) -> Result<Vec<AttackRow>> {
    let pairs = normalize_pairs(&result.pairs(), range)?;
    Ok(pairs
        .iter()
        .zip(&result.outcomes)
        .map(|(p, o)| AttackRow { image_id: ids[o.image_id], clean: p.clean, attacked: p.attacked, delta: p.delta(), linf: o.linf })
        .collect())
}

fn score_range(model: &ModelGraph) -> Result<orthoiqa::nn::ScoreRange> {
    model.score_range.ok_or_else(|| Error::Normalization("model has no score range; train it first".into()))
}

pub fn attack_cmd(run: &mut RunDir, a: &AttackArgs) -> Result<Value> {
    let model = load_model(run, &a.model)?;
    let range = score_range(&model)?;
    let data = load_dataset(run, &a.data)?;
    let (ids, x, _) = data.select(a.split);
    let cfg = AttackConfig { epsilon: a.eps.value(), ..attack_template(a.kind, a.steps, a.step_size, a.flow_smoothness, a.seed) };
    let result = run_attack(&model.prepare()?, &x, &cfg)?;
    let rows = attack_rows(&result, &ids, range)?;
    let pairs = normalize_pairs(&result.pairs(), range)?;
    let (gain, rs) = (abs_gain(&pairs)?, r_score(&pairs, RScoreConfig::default())?);
    eprintln!("{:?} at ε = {} on {} images: AbsGain {gain:.6}, R-Score {rs:.6}", a.kind, a.eps, rows.len());
    run.write("attack.csv", &csv_bytes(&rows)?)?;
    run.write("perturbations.qten", &encode_tensor(&stack(&result.perturbations)?))?;
    let flow_max = result.outcomes.iter().filter_map(|o| o.flow_max).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let summary = json!({
        "kind": a.kind,
        "epsilon": a.eps,
        "images": rows.len(),
        "abs_gain": gain,
        "r_score": rs,
        "max_linf": rows.iter().map(|r| r.linf).fold(0.0, f64::max),
        "max_flow": flow_max,
    });
    run.write_json("attack.json", &json!({ "config": cfg, "summary": summary, "outcomes": result.outcomes }))?;
    Ok(summary)
}

#[derive(Serialize)]
struct EvalRow {
    epsilon: String,
    image_id: usize,
    clean: f64,
    attacked: f64,
    delta: f64,
    linf: f64,
}

fn report_svg(title: &str, report: &RobustnessReport) -> String {
    let ag = report.curve.iter().map(|p| (p.epsilon * 255.0, p.abs_gain)).collect();
    let rs = report.curve.iter().map(|p| (p.epsilon * 255.0, p.r_score)).collect();
    curves_svg(title, &[("AbsGain".to_string(), ag), ("R-Score".to_string(), rs)])
}

pub fn eval_cmd(run: &mut RunDir, a: &EvalArgs) -> Result<Value> {
    let model = load_model(run, &a.model)?;
    let range = score_range(&model)?;
    let data = load_dataset(run, &a.data)?;
    let (ids, x, y) = data.select(a.split);
    let template = attack_template(a.kind, a.steps, a.step_size, a.flow_smoothness, a.seed);
    // A flow attack has no radius; one point is enough.
    let grid: Vec<f64> = match a.kind {
        AttackKind::Stadv => a.grid.iter().take(1).map(|r| r.value()).collect(),
        _ => a.grid.iter().map(|r| r.value()).collect(),
    };
    let rcfg = RScoreConfig { log_base: a.log_base, ..RScoreConfig::default() };
    let ev = evaluate(&model, &x, &y, &template, &grid, rcfg)?;
    let mut rows = Vec::new();
    for (run_result, &eps) in ev.runs.iter().zip(&grid) {
        for r in attack_rows(run_result, &ids, range)? {
            rows.push(EvalRow { epsilon: Rational(eps).to_string(), image_id: r.image_id, clean: r.clean, attacked: r.attacked, delta: r.delta, linf: r.linf });
        }
    }
    for p in &ev.report.curve {
        eprintln!("ε = {:>8}  AbsGain {:.6}  R-Score {:.6}", Rational(p.epsilon).to_string(), p.abs_gain, p.r_score);
    }
    run.write_json(REPORT_FILE, &ev.report)?;
    run.write("per_image.csv", &csv_bytes(&rows)?)?;
    run.write("curve.svg", report_svg(&format!("{:?} robustness", a.kind), &ev.report).as_bytes())?;
    Ok(report_summary(&ev.report))
}

fn report_summary(r: &RobustnessReport) -> Value {
    json!({
        "abs_gain": r.abs_gain,
        "r_score": r.r_score,
        "abs_gain_auc": r.abs_gain_auc,
        "r_score_auc": r.r_score_auc,
        "srocc": r.srocc,
        "plcc": r.plcc,
    })
}

pub fn report_cmd(run: &mut RunDir, a: &ReportArgs) -> Result<Value> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let bytes = run.read_input(&resolve(p, REPORT_FILE))?;
            serde_json::from_slice::<RobustnessReport>(&bytes).map_err(|e| Error::Input(format!("invalid report {}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = match reports.as_slice() {
        [one] => {
            if a.weights.as_ref().is_some_and(|w| w.len() != 1 || w[0].value() != 1.0) {
                return Err(Error::Config("a single report takes no weights other than 1".into()));
            }
            one.clone()
        }
        [first, second] => {
            let w = match &a.weights {
                None => DEFAULT_DATASET_WEIGHTS,
                Some(w) if w.len() == 2 => (w[0].value(), w[1].value()),
                Some(w) => return Err(Error::Config(format!("two reports need two weights, got {}", w.len()))),
            };
            weighted_summary(first, second, w)?
        }
        _ => return Err(Error::Config("report takes one or two evaluation reports".into())),
    };
    run.write_json("summary.json", &combined)?;
    run.write("curve.svg", report_svg("weighted robustness", &combined).as_bytes())?;
    Ok(report_summary(&combined))
}
