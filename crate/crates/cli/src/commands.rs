use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use vesselseg::centerline::{build_graph, extract_centerline};
use vesselseg::metrics::evaluate;
use vesselseg::morphometry::{
    compare_groups, group_values, interior_distance_transform, measure_segments, write_comparisons_csv, write_segments_csv, Metric,
    SegmentRecord,
};
use vesselseg::motion::{correct_stack, save_fields};
use vesselseg::net::{
    load_checkpoint, parse_arch, save_checkpoint, train_observed, write_trace_csv, Model, Params, PatchSet,
};
use vesselseg::phantom::{generate, sample_patches, save_bundle};
use vesselseg::segment::{mc_entropy, postprocess, predict_volume};
use vesselseg::volume::{
    load_binary, load_stack, normalize_percentile, resample_isotropic, save_binary, save_stack, sidecar_path,
    BinaryVolume, ImageVolume, IntensityDomain,
};

use crate::config::{invalid, PipelineConfig};
use crate::manifest::write_manifest;
use crate::{
    AnalyzeArgs, CenterlineArgs, Cli, Command, EvaluateArgs, OutArg, PhantomArgs, PreprocessArgs, RegisterArgs, SegmentArgs,
    TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require_file(p)?;
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Register(a) => register(&mut cfg, a),
        Command::Preprocess(a) => preprocess(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Segment(a) => segment(&mut cfg, a),
        Command::Centerline(a) => centerline(&mut cfg, a),
        Command::Analyze(a) => analyze(&mut cfg, a),
        Command::Evaluate(a) => evaluate_cmd(&mut cfg, a),
        Command::Phantom(a) => phantom(&mut cfg, a),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("input not found: {}", path.display())))
    }
}

fn input_path(cfg: &mut PipelineConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    if flag.is_some() {
        cfg.paths.input = flag;
    }
    let p = cfg
        .paths
        .input
        .clone()
        .ok_or_else(|| invalid("paths.input: no input given (use --input or the config file)"))?;
    require_file(&p)?;
    Ok(p)
}

fn out_dir(cfg: &mut PipelineConfig, flag: &OutArg) -> Result<PathBuf> {
    if flag.out.is_some() {
        cfg.paths.output_dir = flag.out.clone();
    }
    let d = cfg
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| invalid("paths.output_dir: no output directory given (use --out or the config file)"))?;
    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// A written stack together with whatever metadata file accompanies it.
fn with_companions(path: PathBuf) -> Vec<PathBuf> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let raw_header = path.with_file_name(format!("{stem}.json"));
    let mut v = vec![path.clone()];
    for extra in [sidecar_path(&path), raw_header] {
        if extra != path && extra.is_file() && !v.contains(&extra) {
            v.push(extra);
        }
    }
    v
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn save_image(vol: &ImageVolume, path: PathBuf, outputs: &mut Vec<PathBuf>) -> Result<()> {
    save_stack(vol, &path).with_context(|| format!("writing {}", path.display()))?;
    outputs.extend(with_companions(path));
    Ok(())
}

fn save_mask(vol: &BinaryVolume, path: PathBuf, outputs: &mut Vec<PathBuf>) -> Result<()> {
    save_binary(vol, &path).with_context(|| format!("writing {}", path.display()))?;
    outputs.extend(with_companions(path));
    Ok(())
}

fn load_image(path: &Path) -> Result<ImageVolume> {
    require_file(path)?;
    load_stack(path).with_context(|| format!("reading {}", path.display()))
}

fn load_mask(path: &Path) -> Result<BinaryVolume> {
    require_file(path)?;
    load_binary(path).with_context(|| format!("reading {}", path.display()))
}

fn load_normalized(path: &Path) -> Result<ImageVolume> {
    let img = load_image(path)?;
    if img.domain() != IntensityDomain::UnitNormalized {
        return Err(invalid(format!(
            "{} is not normalized; run `preprocess` first",
            path.display()
        )));
    }
    Ok(img)
}

fn finish(out: &Path, command: &str, cfg: &PipelineConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let m = write_manifest(out, command, cfg, inputs, outputs)?;
    eprintln!("wrote {}", m.display());
    Ok(())
}

fn register(cfg: &mut PipelineConfig, a: RegisterArgs) -> Result<()> {
    let input = input_path(cfg, a.input)?;
    let out = out_dir(cfg, &a.out)?;
    set(&mut cfg.demons.sigma, a.sigma);
    set(&mut cfg.demons.max_iters, a.max_iters);
    cfg.validate()?;
    let vol = load_image(&input)?;
    let corrected = correct_stack(&vol, &cfg.demons)?;
    let mut outputs = Vec::new();
    save_image(&corrected.volume, out.join("corrected.tif"), &mut outputs)?;
    let fields = out.join("fields.raw");
    save_fields(&corrected.fields, &fields)?;
    outputs.extend(with_companions(fields));

    #[derive(Serialize)]
    struct SliceReport {
        slice: usize,
        mse_before: f64,
        mse_after: f64,
        accepted_steps: usize,
    }
    let report: Vec<SliceReport> = corrected
        .mse_traces
        .iter()
        .enumerate()
        .map(|(z, t)| SliceReport {
            slice: z,
            mse_before: t.first().copied().unwrap_or(0.0),
            mse_after: t.last().copied().unwrap_or(0.0),
            accepted_steps: t.len().saturating_sub(1),
        })
        .collect();
    let rp = out.join("registration.json");
    write_json(&rp, &report)?;
    outputs.push(rp);
    finish(&out, "register", cfg, &[input], &outputs)
}

fn preprocess(cfg: &mut PipelineConfig, a: PreprocessArgs) -> Result<()> {
    let input = input_path(cfg, a.input)?;
    let out = out_dir(cfg, &a.out)?;
    set(&mut cfg.normalize.lo_pct, a.lo_pct);
    set(&mut cfg.normalize.hi_pct, a.hi_pct);
    if a.spacing.is_some() {
        cfg.normalize.target_spacing_um = a.spacing;
    }
    cfg.validate()?;
    let mut vol = load_image(&input)?;
    if let Some(s) = cfg.normalize.target_spacing_um {
        vol = resample_isotropic(&vol, s)?;
    }
    let norm = normalize_percentile(&vol, cfg.normalize.lo_pct, cfg.normalize.hi_pct)?;
    let mut outputs = Vec::new();
    save_image(&norm, out.join("normalized.tif"), &mut outputs)?;
    finish(&out, "preprocess", cfg, &[input], &outputs)
}

/// Patches from each (image, gt) pair, drawn with per-volume seeds.
fn collect_patches(
    pairs: &[(PathBuf, PathBuf)],
    cfg: &PipelineConfig,
    per_volume: usize,
    seed: u64,
) -> Result<PatchSet> {
    let mut set = PatchSet::new(cfg.net.fov, cfg.net.roi);
    for (k, (img_path, gt_path)) in pairs.iter().enumerate() {
        let img = load_normalized(img_path)?;
        let gt = load_mask(gt_path)?;
        if img.dims() != gt.dims() {
            return Err(invalid(format!(
                "{} and {} differ in size",
                img_path.display(),
                gt_path.display()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let s = sample_patches(&img, &gt, cfg.net.fov, cfg.net.roi, per_volume, cfg.sampling.balance, &mut rng)
            .with_context(|| format!("sampling patches from {}", img_path.display()))?;
        set.extend(&s)?;
    }
    Ok(set)
}

fn pairs(images: &[PathBuf], gts: &[PathBuf], what: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if images.len() != gts.len() {
        return Err(invalid(format!(
            "{what}: {} images but {} ground-truth masks",
            images.len(),
            gts.len()
        )));
    }
    for p in images.iter().chain(gts) {
        require_file(p)?;
    }
    Ok(images.iter().cloned().zip(gts.iter().cloned()).collect())
}

fn train(cfg: &mut PipelineConfig, a: TrainArgs) -> Result<()> {
    let out = out_dir(cfg, &a.out)?;
    set(&mut cfg.net.descriptor, a.descriptor);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.seed, a.seed);
    if a.init.is_some() {
        cfg.paths.checkpoint = a.init.clone();
    }
    cfg.validate()?;
    let train_pairs = pairs(&a.images, &a.gts, "training")?;
    let val_pairs = pairs(&a.val_images, &a.val_gts, "validation")?;

    let init_ck = a.init;
    let (spec, init) = match &init_ck {
        Some(p) => {
            require_file(p)?;
            let (spec, params) = load_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            cfg.net.descriptor = spec.descriptor.clone();
            cfg.net.fov = spec.fov;
            cfg.net.roi = spec.roi;
            (spec, params)
        }
        None => {
            let spec = parse_arch(&cfg.net.descriptor, &cfg.net.arch_options(cfg.train.dropout))?;
            let params = Params::<f32>::he_init(&spec, cfg.train.seed);
            (spec, params)
        }
    };

    let seed = cfg.sampling.seed;
    let train_set = collect_patches(&train_pairs, cfg, cfg.sampling.train_patches, seed)?;
    let val_set = if val_pairs.is_empty() {
        collect_patches(&train_pairs, cfg, cfg.sampling.val_patches, seed ^ 0x5eed_0f_7a11da7e)?
    } else {
        collect_patches(&val_pairs, cfg, cfg.sampling.val_patches, seed)?
    };
    eprintln!(
        "training on {} patches ({:.0}% foreground), validating on {}",
        train_set.len(),
        100.0 * train_set.foreground_fraction(),
        val_set.len()
    );
    let outcome = train_observed(&spec, init, &train_set, &val_set, &cfg.train, |r| {
        eprintln!("epoch {:>4}  loss {:.6}  val jaccard {:.4}", r.epoch, r.train_loss, r.val_jaccard);
    })?;

    let mut outputs = Vec::new();
    let ck = out.join("checkpoint.vsck");
    save_checkpoint(&outcome.params, &spec.clone().with_dropout(cfg.train.dropout), &ck)?;
    outputs.push(ck);
    let trace = out.join("trace.csv");
    write_trace_csv(&trace, &outcome.trace)?;
    outputs.push(trace);

    #[derive(Serialize)]
    struct Summary {
        best_epoch: usize,
        best_val_jaccard: f64,
        train_patches: usize,
        val_patches: usize,
        train_foreground_fraction: f64,
    }
    let best = outcome.trace[outcome.best_epoch - 1].val_jaccard;
    let sp = out.join("train.json");
    write_json(
        &sp,
        &Summary {
            best_epoch: outcome.best_epoch,
            best_val_jaccard: best,
            train_patches: train_set.len(),
            val_patches: val_set.len(),
            train_foreground_fraction: train_set.foreground_fraction(),
        },
    )?;
    outputs.push(sp);

    let mut inputs: Vec<PathBuf> = train_pairs.iter().chain(&val_pairs).flat_map(|(i, g)| [i.clone(), g.clone()]).collect();
    inputs.extend(init_ck);
    finish(&out, "train", cfg, &inputs, &outputs)
}

fn segment(cfg: &mut PipelineConfig, a: SegmentArgs) -> Result<()> {
    let input = input_path(cfg, a.input)?;
    let out = out_dir(cfg, &a.out)?;
    if a.checkpoint.is_some() {
        cfg.paths.checkpoint = a.checkpoint;
    }
    set(&mut cfg.postprocess.min_component, a.min_component);
    set(&mut cfg.postprocess.mc_samples, a.mc_samples);
    cfg.validate()?;
    let ck = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| invalid("paths.checkpoint: no checkpoint given (use --checkpoint or the config file)"))?;
    require_file(&ck)?;
    let img = load_normalized(&input)?;
    let (spec, params) = load_checkpoint::<f32>(&ck).with_context(|| format!("loading {}", ck.display()))?;
    let model = Model::new(spec, params)?;
    let pred = predict_volume(&img, &model)?;
    let seg = postprocess(&pred.segmentation, cfg.postprocess.min_component)?;

    let mut outputs = Vec::new();
    save_image(&ImageVolume::unit(pred.probability.clone())?, out.join("probability.tif"), &mut outputs)?;
    save_mask(&pred.segmentation, out.join("segmentation_raw.tif"), &mut outputs)?;
    save_mask(&seg, out.join("segmentation.tif"), &mut outputs)?;
    if cfg.postprocess.mc_samples > 0 {
        let mc = mc_entropy(&img, &model, cfg.postprocess.mc_samples, cfg.postprocess.mc_seed)?;
        save_image(&ImageVolume::unit(mc.entropy)?, out.join("uncertainty.tif"), &mut outputs)?;
    }
    finish(&out, "segment", cfg, &[input, ck], &outputs)
}

fn centerline(cfg: &mut PipelineConfig, a: CenterlineArgs) -> Result<()> {
    let input = input_path(cfg, a.input)?;
    let out = out_dir(cfg, &a.out)?;
    cfg.validate()?;
    let seg = load_mask(&input)?;
    let skel = extract_centerline(&seg)?;
    let graph = build_graph(&skel, seg.spacing());
    let mut outputs = Vec::new();
    save_mask(&skel, out.join("centerline.tif"), &mut outputs)?;
    let gp = out.join("graph.json");
    write_json(&gp, &graph)?;
    outputs.push(gp);
    eprintln!("{} nodes, {} edges", graph.nodes.len(), graph.edges.len());
    finish(&out, "centerline", cfg, &[input], &outputs)
}

fn analyze(cfg: &mut PipelineConfig, a: AnalyzeArgs) -> Result<()> {
    let out = out_dir(cfg, &a.out)?;
    set(&mut cfg.analysis.capillary_max_diameter_um, a.capillary_max_diameter);
    cfg.validate()?;
    if !a.groups.is_empty() && a.groups.len() != a.inputs.len() {
        return Err(invalid(format!(
            "{} inputs but {} group labels",
            a.inputs.len(),
            a.groups.len()
        )));
    }
    for p in &a.inputs {
        require_file(p)?;
    }
    let mut records: Vec<SegmentRecord> = Vec::new();
    let mut outputs = Vec::new();
    for (k, path) in a.inputs.iter().enumerate() {
        let group = match a.groups.get(k) {
            Some(g) => g.clone(),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let seg = load_mask(path)?;
        let skel = extract_centerline(&seg)?;
        let graph = build_graph(&skel, seg.spacing());
        let dt = interior_distance_transform(&seg);
        let offset = records.len();
        records.extend(measure_segments(&graph, &dt, &group)?.into_iter().map(|mut r| {
            r.id += offset;
            r
        }));
        if a.inputs.len() == 1 {
            save_mask(&skel, out.join("centerline.tif"), &mut outputs)?;
            let gp = out.join("graph.json");
            write_json(&gp, &graph)?;
            outputs.push(gp);
        }
    }
    let cutoff = cfg.analysis.capillary_max_diameter_um;
    let capillaries: Vec<SegmentRecord> = records.iter().filter(|r| r.diameter_um < cutoff).cloned().collect();
    let sp = out.join("segments.csv");
    write_segments_csv(&sp, &records)?;
    outputs.push(sp);
    let cp = out.join("capillaries.csv");
    write_segments_csv(&cp, &capillaries)?;
    outputs.push(cp);

    let mut rows = Vec::new();
    for metric in [Metric::Diameter, Metric::Length, Metric::Tortuosity] {
        let groups = group_values(&capillaries, metric);
        if groups.len() < 2 {
            continue;
        }
        match compare_groups(&groups, metric.name()) {
            Ok(r) => rows.extend(r),
            Err(e) => eprintln!("skipping {} comparison: {e}", metric.name()),
        }
    }
    let kp = out.join("comparisons.csv");
    write_comparisons_csv(&kp, &rows)?;
    outputs.push(kp);
    eprintln!("{} segments, {} capillaries", records.len(), capillaries.len());
    finish(&out, "analyze", cfg, &a.inputs, &outputs)
}

fn evaluate_cmd(cfg: &mut PipelineConfig, a: EvaluateArgs) -> Result<()> {
    cfg.validate()?;
    let gt = load_mask(&a.gt)?;
    let pred = load_mask(&a.pred)?;
    if gt.dims() != pred.dims() {
        return Err(invalid(format!("ground truth is {:?} but prediction is {:?}", gt.dims(), pred.dims())));
    }
    let skels = if a.centerline {
        Some((extract_centerline(&gt)?, extract_centerline(&pred)?))
    } else {
        None
    };
    let report = evaluate(&gt, &pred, skels.as_ref().map(|(g, p)| (g, p)))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if a.out.out.is_some() || cfg.paths.output_dir.is_some() {
        let out = out_dir(cfg, &a.out)?;
        let rp = out.join("evaluation.json");
        write_json(&rp, &report)?;
        finish(&out, "evaluate", cfg, &[a.gt, a.pred], &[rp])?;
    }
    Ok(())
}

fn phantom(cfg: &mut PipelineConfig, a: PhantomArgs) -> Result<()> {
    let out = out_dir(cfg, &a.out)?;
    set(&mut cfg.phantom.seed, a.seed);
    set(&mut cfg.phantom.tubes, a.tubes);
    set(&mut cfg.phantom.motion_amplitude, a.motion_amplitude);
    set(&mut cfg.phantom.noise_sigma, a.noise_sigma);
    if let Some(d) = a.dims {
        if d.len() != 3 {
            return Err(invalid(format!("--dims needs three values X,Y,Z, got {}", d.len())));
        }
        cfg.phantom.dims = [d[0], d[1], d[2]];
    }
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    cfg.validate()?;
    let dirs: Vec<(PathBuf, u64)> = if a.count == 1 {
        vec![(out.clone(), cfg.phantom.seed)]
    } else {
        (0..a.count)
            .map(|k| (out.join(format!("phantom_{k:03}")), cfg.phantom.seed.wrapping_add(k as u64)))
            .collect()
    };
    let written: Vec<Vec<PathBuf>> = dirs
        .par_iter()
        .map(|(dir, seed)| -> Result<Vec<PathBuf>> {
            let spec = vesselseg::phantom::PhantomSpec { seed: *seed, ..cfg.phantom.clone() };
            let ph = generate(&spec)?;
            save_bundle(&ph, dir)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != crate::manifest::MANIFEST_NAME));
            files.sort();
            Ok(files)
        })
        .collect::<Result<_>>()?;
    let outputs: Vec<PathBuf> = written.into_iter().flatten().collect();
    finish(&out, "phantom", cfg, &[], &outputs)
}
