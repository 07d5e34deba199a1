use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use tips_core::checkpoint::Checkpoint;
use tips_core::checkpoint::{STAGE_REFINER, STAGE_RENDER, STAGE_TEXT2POSE};
use tips_core::image_io::Image;
use tips_core::metrics::{evaluate, EvalItem, TagClassifier};
use tips_core::pipeline::{infer_pipeline, interpolation_demo, PipelineModels, SourcePose};
use tips_core::pose::KeypointSet;
use tips_core::refiner::{denoising_mse, train_refiner};
use tips_core::render::{train_render, FeatureExtractor, IdentityExtractor, RandomConvExtractor};
use tips_core::seed::derive_seed;
use tips_core::synth::{build_dataset, keypoint_table, load_keypoint_table, Dataset, Split, SynthConfig};
use tips_core::text::{render_description_text, AttributeSchema};
use tips_core::text2pose::train_t2p;

use crate::config::PipelineConfig;
use crate::{Cli, Command, ModeArg};

const PAIRS_FILE: &str = "pairs.tsv";
const POSES_FILE: &str = "poses.csv";
const RAW_POSES_FILE: &str = "raw_poses.csv";

/// Config file merged with command-line flags, stage seeds derived.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = &cli.schema {
        cfg.schema = Some(s.clone());
    }
    if let Some(size) = cli.size {
        cfg.synth.size = size;
        cfg.render.generator.image_size = size;
    }
    if let Some(steps) = cli.steps {
        match cli.command {
            Command::TrainT2p { .. } => cfg.t2p.iterations = steps,
            Command::TrainRefiner => cfg.refiner.epochs = steps,
            Command::TrainRender { .. } => cfg.render.train.iterations = steps,
            _ => {}
        }
    }
    match &cli.command {
        Command::SynthData { samples, test_samples } => {
            cfg.synth.samples = samples.unwrap_or(cfg.synth.samples);
            cfg.synth.test_samples = test_samples.unwrap_or(cfg.synth.test_samples);
        }
        Command::TrainT2p { batch_size: Some(b) } => cfg.t2p.batch_size = *b,
        Command::TrainRender { batch_size, max_pairs } => {
            cfg.render.train.batch_size = batch_size.unwrap_or(cfg.render.train.batch_size);
            cfg.render.max_pairs = max_pairs.or(cfg.render.max_pairs);
        }
        Command::Infer { count, .. } => cfg.infer.count = count.or(cfg.infer.count),
        _ => {}
    }
    cfg.derive_stage_seeds();
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::SynthData { .. } => synth_data(&cfg),
        Command::TrainT2p { .. } => train_t2p_cmd(&cfg),
        Command::TrainRefiner => train_refiner_cmd(&cfg),
        Command::TrainRender { .. } => train_render_cmd(&cfg),
        Command::Infer { mode, .. } => infer_cmd(&cfg, resolve_mode(*mode, &cfg)?),
        Command::Eval { mode, real } => eval_cmd(&cfg, resolve_mode(*mode, &cfg)?, *real),
        Command::InterpDemo => interp_cmd(&cfg, cli.steps.unwrap_or(5)),
    }
}

fn resolve_mode(flag: Option<ModeArg>, cfg: &PipelineConfig) -> Result<ModeArg> {
    if let Some(m) = flag {
        return Ok(m);
    }
    match cfg.infer.mode.as_deref() {
        None | Some("partial") | Some("partially-text") => Ok(ModeArg::Partial),
        Some("full") | Some("fully-text") => Ok(ModeArg::Full),
        Some(other) => bail!("unknown inference mode `{other}` (expected partial or full)"),
    }
}

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Partial => "partial",
        ModeArg::Full => "full",
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    ckpt.save(path).with_context(|| format!("saving checkpoint {}", path.display()))
}

fn load_checkpoint(cfg: &PipelineConfig, stage: &str) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path(stage);
    Checkpoint::load(&path).with_context(|| format!("loading {stage} checkpoint {}", path.display()))
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    let ds = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if let Some(path) = &cfg.schema {
        let schema = AttributeSchema::load(path)?;
        if schema.id() != ds.schema.id() {
            bail!("schema {} does not match the dataset's schema {}", path.display(), ds.schema.id());
        }
    }
    Ok(ds)
}

fn synth_data(cfg: &PipelineConfig) -> Result<()> {
    let schema = match &cfg.schema {
        Some(p) => AttributeSchema::load(p)?,
        None => AttributeSchema::default_synthetic(),
    };
    let sc = SynthConfig { samples: cfg.synth.samples, test_samples: cfg.synth.test_samples, size: cfg.synth.size, seed: cfg.synth_seed() };
    let dir = cfg.out_dir().join("dataset");
    let manifest = build_dataset(&sc, &schema, &dir)?;
    let test = manifest.ids(Split::Test).count();
    println!("wrote {} samples ({} train, {test} test) to {}", manifest.samples.len(), manifest.samples.len() - test, dir.display());
    Ok(())
}

fn train_t2p_cmd(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let data = ds.t2p_samples(Split::Train, 64)?;
    let (mut model, trace) = train_t2p(&data, &cfg.t2p)?;
    model.schema_id = Some(ds.schema.id().to_string());
    save_checkpoint(&model.to_checkpoint(Some(&cfg.t2p)), &cfg.checkpoint_path(STAGE_TEXT2POSE))?;
    write(&cfg.trace_path(STAGE_TEXT2POSE), trace.to_csv())?;
    let last = trace.rows.last().map(|r| r.critic_loss).unwrap_or(f32::NAN);
    println!("text-to-pose: {} iterations, {} generator updates, final critic loss {last:.4}", trace.rows.len(), trace.generator_updates());
    Ok(())
}

fn train_refiner_cmd(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let train = ds.facial_vectors(Split::Train);
    let test = ds.facial_vectors(Split::Test);
    let (model, trace) = train_refiner(&train, &cfg.refiner)?;
    save_checkpoint(&model.to_checkpoint(Some(&cfg.refiner)), &cfg.checkpoint_path(STAGE_REFINER))?;
    write(&cfg.trace_path(STAGE_REFINER), trace.to_csv())?;
    println!("refiner: {} steps on {} faces", trace.steps.len(), train.len());
    if !test.is_empty() {
        let (pre, post) = denoising_mse(&model, &test, cfg.refiner.perturbation_sigma, cfg.refiner.seed)?;
        println!("held-out MSE per coordinate: perturbed {pre:.6}, refined {post:.6}");
    }
    Ok(())
}

fn extractor(cfg: &PipelineConfig) -> Result<Option<Box<dyn FeatureExtractor>>> {
    Ok(match cfg.render.extractor.as_str() {
        "random-conv" => Some(Box::new(RandomConvExtractor::new(cfg.extractor_seed()))),
        "identity" => Some(Box::new(IdentityExtractor)),
        "none" => None,
        other => bail!("unknown feature extractor `{other}` (expected random-conv, identity or none)"),
    })
}

fn train_render_cmd(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mut pairs = ds.pairs(Split::Train);
    if let Some(n) = cfg.render.max_pairs {
        pairs.truncate(n);
    }
    let mut gs = cfg.render.generator.clone();
    gs.image_size = ds.manifest.size;
    let ex = extractor(cfg)?;
    let (model, trace) = train_render(&pairs, gs, cfg.render.discriminator.clone(), &cfg.render.train, ex.as_deref())?;
    let name = ex.as_ref().map(|e| e.name());
    save_checkpoint(&model.to_checkpoint(Some(&cfg.render.train), name.as_deref()), &cfg.checkpoint_path(STAGE_RENDER))?;
    write(&cfg.trace_path(STAGE_RENDER), trace.to_csv())?;
    let last = trace.rows.last().map(|r| r.l1).unwrap_or(f32::NAN);
    println!("renderer: {} iterations on {} pairs, final L1 {last:.4}", trace.rows.len(), pairs.len());
    Ok(())
}

fn load_models(cfg: &PipelineConfig, schema: &AttributeSchema) -> Result<PipelineModels> {
    Ok(PipelineModels::from_checkpoints(
        &load_checkpoint(cfg, STAGE_TEXT2POSE)?,
        &load_checkpoint(cfg, STAGE_REFINER)?,
        &load_checkpoint(cfg, STAGE_RENDER)?,
        schema.clone(),
    )?)
}

fn infer_dir(cfg: &PipelineConfig, mode: ModeArg) -> PathBuf {
    cfg.out_dir().join("infer").join(mode_name(mode))
}

fn test_pairs(ds: &Dataset, count: Option<usize>) -> Vec<(usize, usize)> {
    let mut pairs = ds.pair_indices(Split::Test);
    if let Some(n) = count {
        pairs.truncate(n);
    }
    pairs
}

/// Mean over channels, scaled to the 8-bit range.
fn attention_png(att: &tips_tensor::Tensor) -> image::GrayImage {
    let (_, c, h, w) = att.dims4();
    let d = att.data();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let m: f32 = (0..c).map(|ch| d[ch * h * w + i]).sum::<f32>() / c as f32;
        image::Luma([(m * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn infer_cmd(cfg: &PipelineConfig, mode: ModeArg) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds.schema)?;
    let dir = infer_dir(cfg, mode);
    create_dir(&dir)?;
    let pairs = test_pairs(&ds, cfg.infer.count);
    if pairs.is_empty() {
        bail!("the dataset has no test pairs");
    }
    let mut rows = String::from("name\tsource\ttarget\n");
    let (mut refined, mut raw) = (Vec::new(), Vec::new());
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let (src, tgt) = (&ds.samples[a], &ds.samples[b]);
        let source = match mode {
            ModeArg::Partial => SourcePose::Keypoints(src.keypoints.clone()),
            ModeArg::Full => SourcePose::Text(src.record.clone()),
        };
        let noise_seed = derive_seed(cfg.infer_seed(), &format!("pair/{}/{}", src.id, tgt.id));
        let out = infer_pipeline(&models, &src.image, &source, &tgt.record, noise_seed)?;
        let name = format!("{}_{}", src.id, tgt.id);
        out.image.save(&dir.join(format!("{name}.png")))?;
        if k == 0 {
            for (l, att) in out.attention.iter().enumerate() {
                let p = dir.join("attention").join(format!("{name}_level{}.png", l + 1));
                create_dir(p.parent().expect("has parent"))?;
                attention_png(att).save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        rows.push_str(&format!("{name}\t{}\t{}\n", src.id, tgt.id));
        refined.push((name.clone(), out.target.refined));
        raw.push((name, out.target.raw));
    }
    write(&dir.join(PAIRS_FILE), rows)?;
    write(&dir.join(POSES_FILE), keypoint_table(refined.iter().map(|(n, k)| (n.as_str(), k))))?;
    write(&dir.join(RAW_POSES_FILE), keypoint_table(raw.iter().map(|(n, k)| (n.as_str(), k))))?;
    println!("rendered {} pairs ({} mode) into {}", pairs.len(), mode_name(mode), dir.display());
    Ok(())
}

fn gender_label(ds: &Dataset, idx: usize) -> Option<u8> {
    match ds.samples[idx].record.choice("gender") {
        Some("woman") => Some(1),
        Some("man") => Some(0),
        _ => None,
    }
}

fn eval_cmd(cfg: &PipelineConfig, mode: ModeArg, real: bool) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let index: std::collections::HashMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut items = Vec::new();
    let label = if real {
        for (a, b) in test_pairs(&ds, cfg.infer.count) {
            let t = &ds.samples[b];
            items.push(EvalItem {
                generated: t.image.clone(),
                reference: t.image.clone(),
                pred_pose: Some(t.keypoints.clone()),
                gt_pose: t.keypoints.clone(),
                source_gender: gender_label(&ds, a),
            });
        }
        "real"
    } else {
        let dir = infer_dir(cfg, mode);
        let pairs_path = dir.join(PAIRS_FILE);
        let text = fs::read_to_string(&pairs_path).with_context(|| format!("reading {} (run `infer` first)", pairs_path.display()))?;
        let size = ds.manifest.size;
        let poses = load_keypoint_table(&dir.join(POSES_FILE), size, size)?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let [name, src, tgt] = f[..] else { bail!("malformed line in {}: {line}", pairs_path.display()) };
            let (Some(&a), Some(&b)) = (index.get(src), index.get(tgt)) else {
                bail!("{} refers to samples missing from the dataset", pairs_path.display());
            };
            items.push(EvalItem {
                generated: Image::load(&dir.join(format!("{name}.png")))?,
                reference: ds.samples[b].image.clone(),
                pred_pose: poses.get(name).cloned(),
                gt_pose: ds.samples[b].keypoints.clone(),
                source_gender: gender_label(&ds, a),
            });
        }
        mode_name(mode)
    };
    let report = evaluate(&items, Some(&TagClassifier), &[])?;
    let table = report.to_string();
    write(&cfg.out_dir().join("eval").join(format!("{label}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn interp_cmd(cfg: &PipelineConfig, steps: usize) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds.schema)?;
    let test = ds.split(Split::Test);
    let Some(src) = test.first() else { bail!("the dataset has no test samples") };
    let end = test.iter().find(|s| s.record.choice("body") != src.record.choice("body")).or(test.last()).expect("non-empty");
    let outs = interpolation_demo(
        &models,
        &src.image,
        &SourcePose::Keypoints(src.keypoints.clone()),
        &src.record,
        &end.record,
        steps,
        cfg.infer_seed(),
    )?;
    let dir = cfg.out_dir().join("interp");
    create_dir(&dir)?;
    let size = models.renderer.image_size();
    let mut strip = image::RgbImage::new((size * outs.len()) as u32, size as u32);
    let mut poses: Vec<(String, KeypointSet)> = Vec::new();
    for (i, o) in outs.iter().enumerate() {
        o.image.save(&dir.join(format!("step_{i:02}.png")))?;
        image::imageops::replace(&mut strip, &o.image.to_rgb8(), (i * size) as i64, 0);
        poses.push((format!("step_{i:02}"), o.target.refined.clone()));
    }
    let p = dir.join("strip.png");
    strip.save(&p).with_context(|| format!("writing {}", p.display()))?;
    write(&dir.join(POSES_FILE), keypoint_table(poses.iter().map(|(n, k)| (n.as_str(), k))))?;
    let desc = format!(
        "start: {}\nend: {}\n",
        render_description_text(&src.record, &ds.schema)?,
        render_description_text(&end.record, &ds.schema)?
    );
    write(&dir.join("descriptions.txt"), desc)?;
    info!("interpolation from {} to {}", src.id, end.id);
    println!("wrote {steps} interpolation steps to {}", dir.display());
    Ok(())
}
