use crate::{resolve_out, CliError};
use hoidet_core::config::RunConfig;
use hoidet_core::data::{
    generate_dataset, load_annotations, load_class_table, load_image_tokens, load_predictions,
    save_annotations, save_class_table, save_predictions, Dataset, DatasetMeta, SceneSpec,
};
use hoidet_core::eval::{evaluate, render_report};
use hoidet_core::model::{HoiModel, ModelConfig};
use hoidet_core::train::{
    attention_maps, finetune_reweight as finetune_loop, predict, train as train_loop, AdamW,
    Checkpoint, TrainExample, TrainPhase,
};
use ndarray::Array2;
use std::path::{Path, PathBuf};

pub fn generate_data(spec: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| CliError::Config(format!("scene spec {}: {e}", spec.display())))?;
    let scene: SceneSpec = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("scene spec {}: {e}", spec.display())))?;
    let generated = generate_dataset(&scene, seed)?;

    let out = resolve_out(&out.to_path_buf());
    let image_dir = out.join("images");
    std::fs::create_dir_all(&image_dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", image_dir.display())))?;
    save_annotations(&out.join("annotations.jsonl"), &generated.dataset)?;
    save_class_table(&out.join("classes.jsonl"), &generated.class_table)?;
    for (ann, img) in generated.dataset.annotations.iter().zip(&generated.images) {
        let path = image_dir.join(&ann.file_name);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    println!(
        "wrote {} images, {} interaction instances to {}",
        generated.dataset.meta.num_images,
        generated.dataset.num_instances(),
        out.display()
    );
    Ok(())
}

fn load_examples(data: &Path) -> Result<(Dataset, Vec<TrainExample>), CliError> {
    let dataset = load_annotations(&data.join("annotations.jsonl"))?;
    let mut examples = Vec::with_capacity(dataset.annotations.len());
    for ann in &dataset.annotations {
        let tokens = load_image_tokens(&data.join("images").join(&ann.file_name))?;
        examples.push(TrainExample {
            image_id: ann.image_id.clone(),
            tokens,
            instances: ann.instances.clone(),
        });
    }
    Ok((dataset, examples))
}

fn check_vocab(meta: &DatasetMeta, model: &ModelConfig) -> Result<(), CliError> {
    if meta.num_object_classes != model.num_object_classes
        || meta.num_action_classes != model.num_action_classes
    {
        return Err(CliError::Config(format!(
            "dataset vocabulary ({} objects, {} actions) does not match the model ({}, {})",
            meta.num_object_classes,
            meta.num_action_classes,
            model.num_object_classes,
            model.num_action_classes
        )));
    }
    Ok(())
}

pub fn train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let resolved = config.resolved();
    let fingerprint = config.fingerprint();
    let (dataset, examples) = load_examples(data)?;
    check_vocab(&dataset.meta, &resolved.model)?;
    let model = HoiModel::new(resolved.model.clone())?;

    let (mut params, mut opt, start_epoch) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_fingerprint != fingerprint {
                return Err(CliError::Config(format!(
                    "checkpoint {} was produced under a different configuration \
                     (fingerprint {} vs {})",
                    path.display(),
                    ckpt.config_fingerprint,
                    fingerprint
                )));
            }
            if ckpt.phase != TrainPhase::Main {
                return Err(CliError::Config(format!(
                    "checkpoint {} is not a main-phase checkpoint",
                    path.display()
                )));
            }
            (ckpt.params, ckpt.optimizer, ckpt.epochs_completed)
        }
        None => (
            model.init_params(resolved.train.seed),
            AdamW::new(resolved.train.learning_rate, resolved.train.weight_decay),
            0,
        ),
    };

    let stats = train_loop(
        &model,
        &mut params,
        &mut opt,
        &examples,
        &resolved.train,
        &resolved.loss,
        start_epoch,
    )?;

    let ckpt = Checkpoint {
        model: resolved.model,
        phase: TrainPhase::Main,
        epochs_completed: resolved.train.epochs,
        config_fingerprint: fingerprint,
        params,
        optimizer: opt,
    };
    let out = resolve_out(&out.to_path_buf());
    ckpt.save(&out)?;
    match stats.last() {
        Some(s) => println!(
            "trained to epoch {}: mean loss {:.6}; checkpoint {}",
            resolved.train.epochs,
            s.mean_loss,
            out.display()
        ),
        None => println!(
            "no epochs to run (already at {}); checkpoint {}",
            resolved.train.epochs,
            out.display()
        ),
    }
    Ok(())
}

pub fn finetune_reweight(
    config_path: &Path,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let resolved = config.resolved();
    let fingerprint = config.fingerprint();
    let (dataset, examples) = load_examples(data)?;
    check_vocab(&dataset.meta, &resolved.model)?;
    let model = HoiModel::new(resolved.model.clone())?;

    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_fingerprint != fingerprint {
        return Err(CliError::Config(format!(
            "checkpoint {} was produced under a different configuration \
             (fingerprint {} vs {})",
            checkpoint.display(),
            ckpt.config_fingerprint,
            fingerprint
        )));
    }
    if ckpt.phase == TrainPhase::Decoupled {
        log::warn!(
            "checkpoint {} already went through decoupled fine-tuning; proceeding anyway",
            checkpoint.display()
        );
    }
    let mut params = ckpt.params;
    let mut opt = AdamW::new(
        resolved.finetune.learning_rate,
        resolved.finetune.weight_decay,
    );
    let stats = finetune_loop(
        &model,
        &mut params,
        &mut opt,
        &examples,
        &resolved.finetune,
        &resolved.loss,
        config.reweight.clone(),
        0,
    )?;

    let updated = Checkpoint {
        model: resolved.model,
        phase: TrainPhase::Decoupled,
        epochs_completed: ckpt.epochs_completed + resolved.finetune.epochs,
        config_fingerprint: fingerprint,
        params,
        optimizer: opt,
    };
    let out = resolve_out(&out.to_path_buf());
    updated.save(&out)?;
    if let Some(s) = stats.last() {
        println!(
            "fine-tuned {} epochs: mean loss {:.6}; checkpoint {}",
            resolved.finetune.epochs,
            s.mean_loss,
            out.display()
        );
    }
    Ok(())
}

pub fn infer(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<(), CliError> {
    let (pnms_config, argmax_only) = match config_path {
        Some(p) => {
            let config = RunConfig::load(p)?;
            (config.pnms.clone(), config.argmax_only)
        }
        None => (Default::default(), false),
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = HoiModel::new(ckpt.model.clone())?;
    let dataset = load_annotations(&images.join("annotations.jsonl"))?;
    check_vocab(&dataset.meta, model.config())?;

    let mut inputs: Vec<(String, Array2<f64>)> = Vec::with_capacity(dataset.annotations.len());
    for ann in &dataset.annotations {
        let tokens = load_image_tokens(&images.join("images").join(&ann.file_name))?;
        inputs.push((ann.image_id.clone(), tokens));
    }
    let preds = predict(
        &model,
        &ckpt.params,
        &inputs,
        Some(&pnms_config),
        argmax_only,
    )?;
    let out = resolve_out(&out.to_path_buf());
    save_predictions(&out, &dataset.meta, &preds)?;
    println!(
        "wrote {} predictions over {} images to {}",
        preds.len(),
        inputs.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(preds: &Path, gt: &Path, classes: &Path, report: &Path) -> Result<(), CliError> {
    let (pred_meta, predictions) = load_predictions(preds)?;
    let dataset = load_annotations(gt)?;
    if pred_meta != dataset.meta {
        return Err(CliError::Config(format!(
            "prediction header {pred_meta:?} does not match ground truth {:?}",
            dataset.meta
        )));
    }
    let table = load_class_table(classes)?;
    let expected = dataset.meta.num_object_classes * dataset.meta.num_action_classes;
    if table.entries.len() != expected {
        return Err(CliError::Config(format!(
            "class table has {} entries, expected {expected}",
            table.entries.len()
        )));
    }
    let result = evaluate(&dataset, &predictions, &table);
    let text = render_report(&result, &table);
    let report = resolve_out(&report.to_path_buf());
    std::fs::write(&report, &text)
        .map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    print!("{text}");
    Ok(())
}

pub fn dump_attention(checkpoint: &Path, image: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = HoiModel::new(ckpt.model.clone())?;
    let tokens = load_image_tokens(image)?;
    let maps = attention_maps(&model, &ckpt.params, &tokens)?;

    let out = resolve_out(&out.to_path_buf());
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    let pair_path = out.join(format!("{stem}_pair.png"));
    let action_path = out.join(format!("{stem}_action.png"));
    write_heatmap(&pair_path, &maps.pair)?;
    write_heatmap(&action_path, &maps.action)?;
    println!(
        "top query {}; wrote {} and {}",
        maps.top_query,
        pair_path.display(),
        action_path.display()
    );
    Ok(())
}

fn write_heatmap(path: &PathBuf, map: &Array2<f64>) -> Result<(), CliError> {
    let (h, w) = map.dim();
    let peak = map.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (y, row) in map.rows().into_iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            img.put_pixel(x as u32, y as u32, image::Luma([(v / peak * 255.0) as u8]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
