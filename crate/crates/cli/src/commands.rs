//! Command implementations. Every artifact path stays inside the requested
//! output directory, and identical flags plus seed produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use uasnet_core::checkpoint::load_bundle;
use uasnet_core::data::{
    generate_phantom, phantom::generate_balanced_set, read_sample, write_dataset, Dataset,
    PhantomSpec,
};
use uasnet_core::mask::{derive_targets, BinaryMask};
use uasnet_core::metrics::{
    distribution_distance, kde_from_values, save_grayscale_png, write_curve_csv, DensityCurve,
};
use uasnet_core::model::ModelBundle;
use uasnet_core::plot::{
    density_plot, PlotSeries, COLOR_HC_PRED, COLOR_HC_REAL, COLOR_LC_PRED, COLOR_LC_REAL,
};
use uasnet_core::train::{prepare_sample, run_ablation, run_cv, PreparedSample, TrainConfig};

use crate::errors::CliError;

pub struct GenerateArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub profile: String,
    pub balanced: bool,
    pub no_cavity: bool,
    pub no_spiculation: bool,
    pub zero_jitter: Option<f32>,
}

pub fn generate(args: GenerateArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut spec = match args.profile.as_str() {
        "default" => PhantomSpec::for_patch(args.patch_size),
        "lc-heavy" => PhantomSpec::lc_heavy(args.patch_size),
        other => {
            return Err(CliError::usage(format!(
                "unknown profile {other:?} (expected `default` or `lc-heavy`)"
            )))
        }
    };
    if args.no_cavity {
        spec.cavity = false;
    }
    if args.no_spiculation {
        spec.spiculation = false;
    }
    if let Some(t) = args.zero_jitter {
        spec = spec.with_zero_jitter(t);
    }

    let mut samples = if args.balanced {
        if args.count % 2 != 0 {
            return Err(CliError::usage(format!(
                "--balanced needs an even --count, got {}",
                args.count
            )));
        }
        generate_balanced_set(&spec, args.count / 2, args.seed)?
    } else {
        (0..args.count)
            .map(|k| generate_phantom(&spec, args.seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>, _>>()?
    };
    for (k, sample) in samples.iter_mut().enumerate() {
        sample.sample_id = format!("p{k:05}");
    }
    write_dataset(&args.out, &samples, args.patch_size)?;
    let mut artifacts = vec![args.out.join("manifest.json")];
    artifacts.extend(samples.iter().map(|s| args.out.join(&s.sample_id)));
    Ok(artifacts)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jap: Option<bool>,
    pub fa_cat_placement: Option<Vec<usize>>,
}

/// Advisory lock on the run directory, removed on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::runtime(format!(
                    "run directory {} is locked by another invocation (remove {} if stale)",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn train(args: TrainArgs) -> Result<Vec<PathBuf>, CliError> {
    let raw = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::usage(format!(
            "cannot read config {}: {e}",
            args.config.display()
        ))
    })?;
    let mut config = TrainConfig::from_toml_str(&raw)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(jap) = args.jap {
        config.jap_enabled = jap;
    }
    if let Some(placement) = args.fa_cat_placement {
        config.model.arch.fa_cat_placement = placement;
    }
    if let Some(dataset) = args.dataset.as_ref() {
        config.dataset = Some(dataset.display().to_string());
    }
    if let Some(out) = args.out.as_ref() {
        config.out_dir = Some(out.display().to_string());
    }
    config.validate()?;

    let dataset_root = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("no dataset: set `dataset` in the config or pass --dataset"))?;
    let dataset = Dataset::open(Path::new(&dataset_root))?;
    if dataset.manifest.patch_size != config.patch_size {
        return Err(CliError::data(format!(
            "config patch_size {} != dataset patch_size {}",
            config.patch_size, dataset.manifest.patch_size
        )));
    }
    let samples = load_prepared(&dataset)?;

    let out_parent = PathBuf::from(config.out_dir.clone().unwrap_or_else(|| "runs".into()));
    let run_dir = out_parent.join(&config.run_name);
    let _lock = RunLock::acquire(&run_dir)?;

    if config.ablation {
        let reports = run_ablation(&samples, &dataset.manifest, &config, Some(&run_dir))?;
        print!("{}", uasnet_core::train::format_report(&reports));
        Ok(vec![
            run_dir.join("report.csv"),
            run_dir.join("ours_without_jap"),
            run_dir.join("ours"),
        ])
    } else {
        let result = run_cv(&samples, &dataset.manifest, &config, Some(&run_dir))?;
        for fold in &result.folds {
            println!(
                "fold {}: best epoch {} val dice_r {:.4}",
                fold.fold, fold.best_epoch, fold.best_val.dice_r
            );
        }
        println!("mean val dice_r {:.4}", result.mean.dice_r);
        Ok(vec![
            run_dir.join("config-resolved"),
            run_dir.join("metrics.csv"),
            run_dir.join("samples.csv"),
            run_dir.join("checkpoints").join("best.ckpt"),
        ])
    }
}

fn load_prepared(dataset: &Dataset) -> Result<Vec<PreparedSample>, CliError> {
    let mut samples = Vec::with_capacity(dataset.len());
    for entry in &dataset.manifest.samples {
        let set = dataset.load(entry)?;
        samples.push(prepare_sample(&set)?);
    }
    Ok(samples)
}

pub fn predict(checkpoint: &Path, sample_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (bundle, _, _) = load_bundle(checkpoint)?;
    let sample_id = sample_dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "sample".into());
    let set = read_sample(sample_dir, &sample_id)?;
    let output = bundle.forward(&set.image)?;
    std::fs::create_dir_all(out)?;

    let mut artifacts = Vec::new();
    let mut emit = |name: &str, map: &ndarray::Array2<f32>| -> Result<(), CliError> {
        let png = out.join(format!("{name}.png"));
        let raw = out.join(format!("{name}.f32"));
        save_grayscale_png(map, &png)?;
        uasnet_core::data::write_f32_map(&raw, map)?;
        artifacts.push(png);
        artifacts.push(raw);
        Ok(())
    };

    emit("p_union", &output.union_pred)?;
    emit("p_intersection", &output.inter_pred)?;
    emit("p_mcm", &output.mcm.soft)?;
    emit("r", &output.r_pred)?;

    // ground-truth counterparts when the sample carries annotations
    if !set.masks.is_empty() {
        let targets = derive_targets(&set)?;
        emit("s_union", &targets.union.to_f32())?;
        emit("s_intersection", &targets.intersection.to_f32())?;
        emit("s_mcm", &targets.mcm.soft)?;
    }
    Ok(artifacts)
}

/// Pooled HU values of the high- and low-confidence regions over a dataset.
struct PooledRegions {
    hc: Vec<f64>,
    lc: Vec<f64>,
}

fn pool_real(dataset: &Dataset) -> Result<PooledRegions, CliError> {
    let mut pooled = PooledRegions {
        hc: Vec::new(),
        lc: Vec::new(),
    };
    for entry in &dataset.manifest.samples {
        let set = dataset.load(entry)?;
        let targets = derive_targets(&set)?;
        collect_region(&set.image, &targets.intersection, &mut pooled.hc);
        collect_region(&set.image, &targets.lc, &mut pooled.lc);
    }
    Ok(pooled)
}

fn pool_predicted(dataset: &Dataset, bundle: &ModelBundle) -> Result<PooledRegions, CliError> {
    let mut pooled = PooledRegions {
        hc: Vec::new(),
        lc: Vec::new(),
    };
    for entry in &dataset.manifest.samples {
        let set = dataset.load(entry)?;
        let output = bundle.forward(&set.image)?;
        let hc = BinaryMask::new(output.mcm.discrete.mapv(|v| u8::from(v == 1.0)))?;
        let lc = BinaryMask::new(output.mcm.discrete.mapv(|v| u8::from(v == 0.5)))?;
        collect_region(&set.image, &hc, &mut pooled.hc);
        collect_region(&set.image, &lc, &mut pooled.lc);
    }
    Ok(pooled)
}

fn collect_region(image: &ndarray::Array2<f32>, region: &BinaryMask, into: &mut Vec<f64>) {
    for (&v, &m) in image.iter().zip(region.data().iter()) {
        if m == 1 {
            into.push(v as f64);
        }
    }
}

pub fn analyze_hu(
    dataset_root: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    bandwidth: Option<f64>,
) -> Result<Vec<PathBuf>, CliError> {
    let dataset = Dataset::open(dataset_root)?;
    if dataset.is_empty() {
        return Err(CliError::data("dataset has no samples"));
    }
    std::fs::create_dir_all(out.join("curves"))?;
    let mut artifacts = Vec::new();

    let real = pool_real(&dataset)?;
    let real_hc = kde_from_values(&real.hc, bandwidth)?;
    let real_lc = kde_from_values(&real.lc, bandwidth)?;
    let mut curves: Vec<(String, DensityCurve, [u8; 3], bool)> = vec![
        ("real_hc".into(), real_hc.clone(), COLOR_HC_REAL, true),
        ("real_lc".into(), real_lc.clone(), COLOR_LC_REAL, true),
    ];
    println!(
        "real HC mode {:+.1} HU, real LC mode {:+.1} HU",
        real_hc.mode(),
        real_lc.mode()
    );

    if let Some(ckpt) = checkpoint {
        let (bundle, _, _) = load_bundle(ckpt)?;
        let predicted = pool_predicted(&dataset, &bundle)?;
        let pred_hc = kde_from_values(&predicted.hc, bandwidth)?;
        let pred_lc = kde_from_values(&predicted.lc, bandwidth)?;
        let d_hc = distribution_distance(&real_hc, &pred_hc)?;
        let d_lc = distribution_distance(&real_lc, &pred_lc)?;
        println!(
            "predicted HC mode {:+.1} HU (distance {:.4}), predicted LC mode {:+.1} HU (distance {:.4})",
            pred_hc.mode(),
            d_hc,
            pred_lc.mode(),
            d_lc
        );
        let distances = out.join("distances.csv");
        std::fs::write(
            &distances,
            format!("region,distance\nhc,{d_hc:.9}\nlc,{d_lc:.9}\n"),
        )?;
        artifacts.push(distances);
        curves.push(("pred_hc".into(), pred_hc, COLOR_HC_PRED, false));
        curves.push(("pred_lc".into(), pred_lc, COLOR_LC_PRED, false));
    }

    for (name, curve, _, _) in &curves {
        let path = out.join("curves").join(format!("{name}.csv"));
        write_curve_csv(curve, &path)?;
        artifacts.push(path);
    }
    let series: Vec<PlotSeries<'_>> = curves
        .iter()
        .map(|(_, curve, color, dashed)| PlotSeries {
            curve,
            color: *color,
            dashed: *dashed,
        })
        .collect();
    let plot = out.join("hu_density.png");
    density_plot(&plot, &series)?;
    artifacts.push(plot);

    // machine-readable summary of the modes
    let mut summary = BTreeMap::new();
    for (name, curve, _, _) in &curves {
        summary.insert(name.clone(), curve.mode());
    }
    let modes = out.join("modes.json");
    std::fs::write(&modes, serde_json::to_string_pretty(&summary).unwrap())?;
    artifacts.push(modes);
    Ok(artifacts)
}
