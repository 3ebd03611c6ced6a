//! Subcommand implementations. Each validates its inputs fully before creating
//! any output.

use crate::config::{ExtractorConfig, RunConfig};
use crate::{Common, EvalArgs, GenDataArgs, InferArgs, TrainArgs, WeightsArgs};
use std::fs;
use std::path::Path;
use streakfix::evaluation::{evaluate_models, write_report};
use streakfix::image::Image;
use streakfix::networks::load_generator;
use streakfix::perceptual::{surrogate_weights, FeatureExtractor, TapLayers, Vgg16Features, SURROGATE_SHA256};
use streakfix::tomo_sim::container::{export_png16, read_image, write_atomic, write_image};
use streakfix::tomo_sim::{build_dataset, Dataset};
use streakfix::training::{fold_split, infer as run_generator, train_fold, Variant};
use streakfix::{Error, Result};

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.profile, common.config.as_deref())?;
    if let Some(seed) = common.seed {
        c.data.seed = seed;
        c.train.seed = seed;
    }
    Ok(c)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    let d = &mut c.data;
    set(&mut d.num_phantoms, a.phantoms);
    set(&mut d.slices_per_phantom, a.slices);
    set(&mut d.size, a.size);
    set(&mut d.sparse_views, a.sparse_views);
    set(&mut d.dense_views, a.dense_views);
    set(&mut d.num_ellipses, a.ellipses);
    d.validate()?;
    let m = build_dataset(d, &a.out)?;
    println!(
        "wrote {} slices ({} phantoms × {}, {}×{}, {}/{} views) to {}",
        m.num_samples,
        m.num_phantoms,
        m.slices_per_phantom,
        m.size,
        m.size,
        m.sparse_views,
        m.dense_views,
        a.out.display()
    );
    Ok(())
}

fn load_extractor(c: &ExtractorConfig, taps: TapLayers) -> Result<Vgg16Features<f32>> {
    match &c.path {
        Some(path) => Vgg16Features::load(path, &c.sha256, taps),
        None if c.sha256 != SURROGATE_SHA256 => Err(Error::Config(
            "an extractor checksum was given without an extractor weight file".into(),
        )),
        None => Vgg16Features::from_tensors(&surrogate_weights(), Path::new("<built-in surrogate>"), taps),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut c = resolve(&a.common)?;
    let t = &mut c.train;
    set(&mut t.variant, a.variant);
    set(&mut t.folds, a.folds);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.optimizer.lr, a.lr);
    set(&mut t.optimizer.beta1, a.beta1);
    set(&mut t.weights.lambda_a, a.lambda_a);
    set(&mut t.weights.lambda_m, a.lambda_m);
    set(&mut t.weights.lambda_p, a.lambda_p);
    set(&mut t.patch_size, a.patch_size);
    set(&mut t.patches, a.patches);
    t.deterministic |= a.deterministic;
    if a.vgg_weights.is_some() {
        c.extractor.path = a.vgg_weights;
    }
    set(&mut c.extractor.sha256, a.vgg_sha256);
    let t = &c.train;
    t.validate()?;

    let ds = Dataset::open(&a.data)?;
    let size = ds.manifest.size as usize;
    if t.patch_size > size {
        return Err(Error::Config(format!(
            "patch size {} exceeds the {size}×{size} slices of {}",
            t.patch_size,
            a.data.display()
        )));
    }
    let folds: Vec<usize> = match a.fold {
        Some(k) => vec![k],
        None => (0..t.folds).collect(),
    };
    for &k in &folds {
        let split = fold_split(&ds, t.folds, k, t.seed)?;
        if split.train.is_empty() {
            return Err(Error::Config(format!("fold {k} has no training slices")));
        }
    }
    let extractor = if t.variant.needs_extractor() {
        Some(load_extractor(&c.extractor, t.taps)?)
    } else {
        None
    };

    create_dir(&a.out)?;
    write_atomic(&a.out.join("config.toml"), c.to_toml().as_bytes())?;
    let steps_per_epoch = t.steps_per_epoch();
    for k in folds {
        let dir = a.out.join(format!("fold{k}"));
        let ext = extractor.as_ref().map(|e| e as &dyn FeatureExtractor<f32>);
        let outcome = train_fold(t, &ds, k, &dir, ext, |r| {
            if r.step % steps_per_epoch == 0 {
                eprintln!("{}", serde_json::to_string(r).expect("record serializes"));
            }
        })?;
        println!(
            "fold {k}: {} steps, generator {}",
            outcome.steps,
            outcome.generator_checkpoint.display()
        );
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let (mut g, _) = load_generator::<f32>(&a.checkpoint)?;
    let mut names = Vec::new();
    let mut images = Vec::new();
    if let Some(root) = &a.data {
        let ds = Dataset::open(root)?;
        for (i, s) in ds.manifest.samples.iter().enumerate() {
            let stem = s.sparse_path.trim_end_matches(".svcb").trim_end_matches("_sparse");
            names.push(format!("{stem}_corrected"));
            images.push(ds.load(i)?.sparse);
        }
    } else {
        for path in &a.input {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            names.push(format!("{stem}_corrected"));
            images.push(read_image(path)?);
        }
    }
    let outputs: Vec<Image> = run_generator(&mut g, &images)?;
    create_dir(&a.out)?;
    for (name, img) in names.iter().zip(&outputs) {
        write_image(&a.out.join(format!("{name}.svcb")), img)?;
        if a.png {
            export_png16(&a.out.join(format!("{name}.png")), img)?;
        }
    }
    println!("wrote {} corrected slices to {}", outputs.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let c = resolve(&a.common)?;
    let folds = a.folds.unwrap_or(c.train.folds);
    let ds = Dataset::open(&a.data)?;
    let split = fold_split(&ds, folds, a.fold, c.train.seed)?;
    if split.heldout.is_empty() {
        return Err(Error::Config(format!("fold {} has no held-out slices", a.fold)));
    }
    if let Some(w) = a.roi {
        let s = ds.manifest.size as usize;
        if !w.fits(s, s) {
            return Err(Error::Config(format!(
                "ROI {},{},{},{} lies outside the {s}×{s} slices; valid windows have \
                 0 ≤ x, 0 ≤ y, x + width ≤ {s}, y + height ≤ {s}",
                w.x, w.y, w.width, w.height
            )));
        }
    }
    let mut models = a.model.clone();
    if let Some(runs) = &a.runs {
        for v in Variant::ALL {
            let path = runs.join(v.name()).join(format!("fold{}", a.fold)).join("generator.svck");
            models.push((v.name().to_string(), path));
        }
    }
    let evaluation = evaluate_models(&ds, &split.heldout, &models)?;
    if !models.is_empty() && evaluation.outputs.is_empty() {
        let (name, why) = &evaluation.table.absent[0];
        return Err(Error::io(
            &a.out,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("none of the {} models could be loaded (first: {name}: {why})", models.len()),
            ),
        ));
    }
    let files = write_report(&a.out, &evaluation, a.roi)?;
    print!("{}", evaluation.table.to_text());
    println!("report written to {}", a.out.display());
    if files.roi.is_none() {
        eprintln!("note: no ROI given and the dataset has none; ROI plots skipped");
    }
    Ok(())
}

pub fn weights(a: WeightsArgs) -> Result<()> {
    surrogate_weights().write(&a.out)?;
    println!("wrote surrogate extractor weights to {} (sha256 {SURROGATE_SHA256})", a.out.display());
    Ok(())
}
