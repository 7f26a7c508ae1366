use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use provogan::data::{generate_phantoms, load_mask, load_volume, save_mask, save_volume, DatasetManifest, PhantomSpec, SplitCounts};
use provogan::kspace::{generate_vd_mask, zero_filled, KSpaceVolume};
use provogan::metrics::{MetricReport, SubjectMetrics};
use provogan::pipeline::{
    load_pipeline, load_subject, save_baseline_manifest, save_pipeline_manifest, train_provogan,
    train_sgan_baseline, Acquisition, CascadeTrainer, Dataset, Estimate, Pipeline, Subject, TaskSpec,
};
use provogan::Error;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, InferArgs, MaskArgs, OrderSearchArgs, PhantomArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    fs::write(path, bytes).map_err(|e| CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn phantom(a: PhantomArgs) -> CmdResult {
    if a.split.as_ref().is_some_and(|s| s.len() != 3) {
        return Err(CliError::Usage("--split takes three counts: train,val,test".into()));
    }
    let spec = PhantomSpec {
        n_subjects: a.subjects,
        shape: [a.shape; 3],
        n_ellipsoids: a.ellipsoids,
        seed: a.seed,
        split: a.split.map(|s| SplitCounts::new(s[0], s[1], s[2])),
    };
    spec.validate().map_err(usage)?;
    let manifest = generate_phantoms(&spec, &a.out)?;
    println!("{}", manifest.root.join(provogan::data::MANIFEST_FILE).display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig, task: &TaskSpec, pcfg: &provogan::pipeline::PipelineConfig) -> Result<Dataset, CliError> {
    let manifest = DatasetManifest::load(cfg.dataset()?)?;
    if let Some(n) = cfg.n_train {
        if n == 0 || n > manifest.splits.train.len() {
            return Err(CliError::Usage(format!(
                "--n-train {n} outside 1..={}",
                manifest.splits.train.len()
            )));
        }
    }
    Ok(Dataset::load(&manifest, task, pcfg)?)
}

fn print_stage_summary(reports: &[provogan::pipeline::StageReport], zf: Option<provogan::metrics::MeanStd>) {
    if let Some(zf) = zf {
        println!("zero-filled      val PSNR {zf}");
    }
    for r in reports {
        if let Some(v) = r.val {
            println!(
                "stage {} ({})  val PSNR {}  SSIM {:.2}±{:.2}%",
                r.n,
                r.orientation.tag(),
                v.psnr,
                100.0 * v.ssim.mean,
                100.0 * v.ssim.std
            );
        }
    }
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut extra = Map::new();
    for (k, v) in [("order", &a.order), ("baseline", &a.baseline), ("orientation", &a.orientation)] {
        if let Some(v) = v {
            extra.insert(k.into(), v.clone().into());
        }
    }
    let cfg = RunConfig::resolve(&a.run, &["order", "baseline", "orientation"], extra)?;
    let task = cfg.task_spec()?;
    let pcfg = cfg.pipeline_config()?;
    let out = cfg.out()?.to_path_buf();
    match cfg.extra_str("baseline") {
        Some("sgan") => {
            let o = cfg.orientation()?;
            let data = load_dataset(&cfg, &task, &pcfg)?;
            create_dir(&out)?;
            let baseline = train_sgan_baseline(&data, o, &task, &pcfg, Some(&out))?;
            let path = save_baseline_manifest(&baseline, &task, &pcfg, &out, Some(cfg.to_json()))?;
            print_stage_summary(std::slice::from_ref(&baseline.report), baseline.zero_filled_val);
            println!("{}", path.display());
        }
        Some(other) => return Err(CliError::Usage(format!("unknown baseline `{other}`; only `sgan` is supported"))),
        None => {
            let order = cfg.order()?;
            let data = load_dataset(&cfg, &task, &pcfg)?;
            create_dir(&out)?;
            let trained = train_provogan(&data, order, &task, &pcfg, Some(&out))?;
            let path = save_pipeline_manifest(&trained, &out, Some(cfg.to_json()))?;
            print_stage_summary(&trained.reports, trained.zero_filled_val);
            println!("{}", path.display());
        }
    }
    write_json(&out.join("run_config.json"), &cfg.to_json())
}

pub fn order_search(a: OrderSearchArgs) -> CmdResult {
    let mut extra = Map::new();
    if let Some(p) = a.parallel {
        extra.insert("parallel".into(), p.into());
    }
    let cfg = RunConfig::resolve(&a.run, &["parallel"], extra)?;
    let task = cfg.task_spec()?;
    let pcfg = cfg.pipeline_config()?;
    let out = cfg.out()?.to_path_buf();
    let parallel = cfg.extra_u64("parallel").unwrap_or(1) as usize;
    if parallel == 0 {
        return Err(CliError::Usage("--parallel must be >= 1".into()));
    }
    let data = load_dataset(&cfg, &task, &pcfg)?;
    create_dir(&out)?;
    let trainer = CascadeTrainer {
        data: &data,
        task: task.clone(),
        config: pcfg,
        out: Some(out.join("orders")),
    };
    let search = provogan::pipeline::order_search(&trainer, parallel)?;
    let label = match &task {
        TaskSpec::Reconstruction { r, contrast, .. } => format!("{contrast} reconstruction, R = {r}"),
        TaskSpec::Synthesis { sources, target } => format!("{} → {target}", sources.join(", ")),
    };
    let text = search.table_text(&label);
    print!("{text}");
    let text_path = out.join("order_table.txt");
    fs::write(&text_path, &text).map_err(|e| CliError::Runtime(Error::Io { path: text_path, source: e }))?;
    let mut table = search.table_json();
    table["task"] = serde_json::to_value(&task).map_err(Error::from)?;
    table["run_config"] = cfg.to_json();
    write_json(&out.join("order_table.json"), &table)?;
    let best = &search.outputs[search.best_index()];
    save_pipeline_manifest(best, &out.join("best"), Some(cfg.to_json()))?;
    write_json(&out.join("run_config.json"), &cfg.to_json())
}

fn save_estimate(est: &Estimate, path: &Path) -> Result<(), CliError> {
    Ok(save_volume(&est.denormalized(), path)?)
}

fn subject_from_files(a: &InferArgs, pipeline: &Pipeline) -> Result<Subject, CliError> {
    let id = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into());
    match &pipeline.task {
        TaskSpec::Reconstruction { readout_axis, .. } => {
            let (Some(k), Some(m)) = (&a.kspace, &a.mask) else {
                return Err(CliError::Usage("reconstruction inference needs --kspace and --mask".into()));
            };
            let data = load_volume::<Complex32>(k)?;
            if data.channels() != 1 {
                return Err(CliError::Usage("--kspace must be a single-channel volume".into()));
            }
            let kspace = KSpaceVolume {
                data: data.grid(),
                mask: load_mask(m)?,
                readout_axis: *readout_axis,
            };
            let zf = zero_filled(&kspace)?.with_spacing(data.spacing);
            Ok(Subject::from_acquisition(&id, Acquisition { kspace, zero_filled: zf }, None)?)
        }
        TaskSpec::Synthesis { sources, .. } => {
            if a.source.len() != sources.len() {
                return Err(CliError::Usage(format!(
                    "pipeline expects {} --source volumes ({}), got {}",
                    sources.len(),
                    sources.join(", "),
                    a.source.len()
                )));
            }
            let vols = a.source.iter().map(|p| load_volume::<f32>(p)).collect::<provogan::Result<Vec<_>>>()?;
            Ok(Subject::synthesis(&id, &vols, None, pipeline.target_scale)?)
        }
    }
}

pub fn infer(a: InferArgs) -> CmdResult {
    let (pipeline, manifest) = load_pipeline(&a.pipeline)?;
    let mut written: Vec<Value> = Vec::new();
    let mut run = |subject: &Subject, path: PathBuf| -> CmdResult {
        let stages = pipeline.infer_stages(subject)?;
        if a.stages {
            for (est, stage) in stages.iter().zip(&pipeline.stages) {
                let p = path.with_extension(format!("stage{}.vol", stage.n));
                save_estimate(est, &p)?;
            }
        }
        save_estimate(stages.last().expect("three stages"), &path)?;
        println!("{}", path.display());
        written.push(json!({ "subject": subject.id, "output": path }));
        Ok(())
    };
    let report_dir = if let Some(ds) = &a.dataset {
        if !a.source.is_empty() || a.kspace.is_some() {
            return Err(CliError::Usage("--dataset cannot be combined with --source or --kspace".into()));
        }
        let m = DatasetManifest::load(ds)?;
        let ids = if a.subject.is_empty() {
            match a.split.as_str() {
                "train" => m.splits.train.clone(),
                "val" => m.splits.val.clone(),
                "test" => m.splits.test.clone(),
                "all" => m.ids(),
                other => return Err(CliError::Usage(format!("--split must be train, val, test or all, got `{other}`"))),
            }
        } else {
            a.subject.clone()
        };
        create_dir(&a.out)?;
        for id in &ids {
            m.subject(id).map_err(usage)?;
            let subject = load_subject(&m, id, &pipeline.task, pipeline.config.seed, Some(pipeline.target_scale))?;
            run(&subject, a.out.join(format!("{id}.vol")))?;
        }
        a.out.clone()
    } else {
        let subject = subject_from_files(&a, &pipeline)?;
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        run(&subject, a.out.clone())?;
        a.out.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let record = json!({
        "pipeline": a.pipeline,
        "order": pipeline.order,
        "task": pipeline.task,
        "outputs": written,
        "run_config": manifest.run_config,
    });
    write_json(&report_dir.join("infer.json"), &record)
}

fn vol_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol") && !p.to_string_lossy().contains(".stage"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut rows: Vec<SubjectMetrics> = Vec::new();
    if a.pred.is_dir() {
        let m = DatasetManifest::load(&a.reference)?;
        for p in vol_files(&a.pred)? {
            let id = p.file_stem().expect("file name").to_string_lossy().into_owned();
            let pred = load_volume::<f32>(&p)?;
            let reference = m.load_contrast(&id, &a.contrast)?;
            rows.push(MetricReport::evaluate(&id, &pred, &reference)?);
        }
    } else {
        let pred = load_volume::<f32>(&a.pred)?;
        let reference = load_volume::<f32>(&a.reference)?;
        let id = a
            .subject
            .clone()
            .unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        rows.push(MetricReport::evaluate(&id, &pred.magnitude(), &reference.magnitude())?);
    }
    let report = MetricReport::from_subjects(rows)?;
    let ssim_pct = provogan::metrics::MeanStd {
        mean: 100.0 * report.ssim_summary.mean,
        std: 100.0 * report.ssim_summary.std,
    };
    let value = json!({
        "rows": report.per_subject,
        "summary": {
            "psnr_db": report.psnr_summary,
            "ssim": report.ssim_summary,
            "table": format!("PSNR {} dB, SSIM {}%", report.psnr_summary, ssim_pct),
        },
    });
    println!("{}", serde_json::to_string_pretty(&value).map_err(Error::from)?);
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    Ok(())
}

pub fn mask(a: MaskArgs) -> CmdResult {
    let mask = generate_vd_mask(a.n1, a.n2, a.r, a.seed).map_err(usage)?;
    save_mask(&mask, &a.out)?;
    println!("{} realized rate {:.4}", a.out.display(), mask.rate());
    Ok(())
}
