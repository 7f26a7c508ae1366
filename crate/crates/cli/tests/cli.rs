use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use provogan::nets::{build_generator, GeneratorConfig, NfScale};
use serde_json::Value;

fn provo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_provo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PROVO_DEVICE")
        .output()
        .expect("spawn provo")
}

fn ok(args: &[&str]) -> String {
    let out = provo(args);
    assert!(
        out.status.success(),
        "provo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    provo(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn phantoms(dir: &Path, n: usize, d: usize, split: &str) -> PathBuf {
    let out = dir.join("data");
    ok(&["phantom", "--subjects", &n.to_string(), "--shape", &d.to_string(), "--seed", "5", "--out", s(&out), "--split", split]);
    out
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                tree_bytes(&p)
            } else {
                vec![(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())]
            }
        })
        .collect();
    files.sort();
    files
}

#[test]
fn phantom_writes_all_contrasts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let printed = ok(&["phantom", "--subjects", "10", "--shape", "16", "--seed", "3", "--out", s(&a)]);
    assert!(printed.trim().ends_with("manifest.json"));
    ok(&["phantom", "--subjects", "10", "--shape", "16", "--seed", "3", "--out", s(&b)]);
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["subjects"].as_array().unwrap().len(), 10);
    let vols = tree_bytes(&a).iter().filter(|(n, _)| n.ends_with(".vol")).count();
    assert_eq!(vols, 30);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["phantom", "--subjects", "2", "--shape", "63", "--out", s(&out)]), 2);
    assert_eq!(code(&["phantom", "--subjects", "2"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["mask", "--n1", "16", "--n2", "16", "--R", "0.5", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--task", "denoise", "--order", "ACS", "--dataset", "d", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--task", "recon", "--order", "AAS", "--dataset", "d", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--task", "recon", "--order", "ACS", "--n-f", "1/2", "--dataset", "d", "--out", s(&out)]), 2);
    let gpu = Command::new(env!("CARGO_BIN_EXE_provo"))
        .args(["mask", "--n1", "16", "--n2", "16", "--R", "4", "--out", s(&out)])
        .env("PROVO_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(gpu.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    assert_eq!(
        code(&["train", "--task", "recon", "--order", "ACS", "--dataset", s(&missing), "--out", s(&out)]),
        1
    );
    assert_eq!(code(&["eval", "--pred", s(&missing.join("a.vol")), "--ref", s(&missing.join("b.vol"))]), 1);
}

#[test]
fn mask_realizes_requested_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.mask");
    let printed = ok(&["mask", "--n1", "96", "--n2", "80", "--R", "4", "--seed", "1", "--out", s(&out)]);
    let rate: f64 = printed.split_whitespace().last().unwrap().parse().unwrap();
    assert!((rate - 0.25).abs() <= 0.01, "{rate}");
    let mask = provogan::data::load_mask(&out).unwrap();
    assert_eq!(mask.grid.dim(), (96, 80));
}

#[test]
fn eval_of_identical_volumes_has_unit_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 2, 16, "1,1,0");
    let t1 = data.join("sub-000").join("t1.vol");
    let report = dir.path().join("eval.json");
    ok(&["eval", "--pred", s(&t1), "--ref", s(&t1), "--out", s(&report)]);
    let v = read_json(&report);
    let row = &v["rows"][0];
    assert_eq!(row["subject"], "t1");
    assert_eq!(row["ssim"].as_f64().unwrap(), 1.0);
    assert!(v["summary"]["table"].as_str().unwrap().contains("SSIM 100.00±0.00%"));
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 4, 16, "2,1,1");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 3, "n_f": "1/16", "seed": 11, "order": "CAS"}"#).unwrap();
    let pipe = dir.path().join("pipe");
    let common = ["--config", s(&cfg), "--dataset", s(&data), "--out", s(&pipe)];
    let mut args = vec!["train", "--task", "recon", "--R", "4", "--epochs", "1", "--order", "SAC"];
    args.extend_from_slice(&common);
    ok(&args);

    let manifest = read_json(&pipe.join("pipeline.json"));
    assert_eq!(manifest["order"], "SAC");
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 3);
    let rc = &manifest["run_config"];
    assert_eq!(rc["epochs"], 1, "flags override the config file");
    assert_eq!(rc["seed"], 11);
    assert_eq!(rc["n_f"], "1/16");
    assert_eq!(rc["extra"]["order"], "SAC");
    assert_eq!(read_json(&pipe.join("run_config.json")), *rc);
    for stage in manifest["stages"].as_array().unwrap() {
        assert!(pipe.join(stage["checkpoint"].as_str().unwrap()).exists());
    }
    assert!(manifest["reports"][2]["val"]["psnr"]["mean"].as_f64().unwrap().is_finite());

    let pred_a = dir.path().join("pred_a");
    let pred_b = dir.path().join("pred_b");
    ok(&["infer", "--pipeline", s(&pipe), "--dataset", s(&data), "--split", "test", "--out", s(&pred_a)]);
    ok(&["infer", "--pipeline", s(&pipe), "--dataset", s(&data), "--split", "test", "--out", s(&pred_b), "--stages"]);
    let a = std::fs::read(pred_a.join("sub-003.vol")).unwrap();
    assert_eq!(a, std::fs::read(pred_b.join("sub-003.vol")).unwrap());
    assert!(pred_b.join("sub-003.stage1.vol").exists());
    assert_eq!(read_json(&pred_a.join("infer.json"))["run_config"], *rc);

    // the same subject supplied as raw k-space and mask
    let truth = provogan::data::load_volume::<f32>(&data.join("sub-003").join("t1.vol")).unwrap();
    let mask = provogan::kspace::generate_vd_mask(16, 16, 4.0, provogan::pipeline::mask_seed(11, 3)).unwrap();
    let (ksp, _) = provogan::kspace::undersample(&truth, &mask, 2).unwrap();
    let ksp_path = dir.path().join("k.vol");
    let mask_path = dir.path().join("k.mask");
    let ksp_vol = provogan::Volume::from_grid(ksp.data).unwrap().with_spacing(truth.spacing);
    provogan::data::save_volume(&ksp_vol, &ksp_path).unwrap();
    provogan::data::save_mask(&mask, &mask_path).unwrap();
    let single = dir.path().join("single.vol");
    ok(&["infer", "--pipeline", s(&pipe), "--kspace", s(&ksp_path), "--mask", s(&mask_path), "--out", s(&single)]);
    let x = provogan::data::load_volume::<f32>(&single).unwrap();
    let y = provogan::data::load_volume::<f32>(&pred_a.join("sub-003.vol")).unwrap();
    assert_eq!(x.data, y.data);

    let printed = ok(&["eval", "--pred", s(&pred_a), "--ref", s(&data), "--contrast", "t1"]);
    let v: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
    assert_eq!(v["rows"][0]["subject"], "sub-003");
    assert!(v["rows"][0]["psnr_db"].as_f64().unwrap() > 10.0);
}

#[test]
fn synthesis_from_source_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 3, 16, "1,1,1");
    let pipe = dir.path().join("pipe");
    ok(&[
        "train", "--task", "synth", "--sources", "t2,pd", "--target", "t1", "--order", "ACS", "--epochs", "1", "--n-f",
        "1/16", "--dataset", s(&data), "--out", s(&pipe),
    ]);
    let sub = data.join("sub-002");
    let out = dir.path().join("single").join("est.vol");
    ok(&[
        "infer", "--pipeline", s(&pipe), "--source", s(&sub.join("t2.vol")), "--source", s(&sub.join("pd.vol")), "--out",
        s(&out),
    ]);
    let via_files = std::fs::read(&out).unwrap();
    let via_data = dir.path().join("via_data");
    ok(&["infer", "--pipeline", s(&pipe), "--dataset", s(&data), "--subject", "sub-002", "--out", s(&via_data)]);
    assert_eq!(via_files, std::fs::read(via_data.join("sub-002.vol")).unwrap());
    assert_eq!(
        code(&["infer", "--pipeline", s(&pipe), "--source", s(&sub.join("t2.vol")), "--out", s(&out)]),
        2
    );
}

#[test]
fn sgan_baseline_and_complexity_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 3, 16, "2,1,0");
    let out = dir.path().join("sgan");
    ok(&[
        "train", "--task", "recon", "--baseline", "sgan", "--orientation", "A", "--epochs", "1", "--n-f", "1/4", "--dataset",
        s(&data), "--out", s(&out),
    ]);
    let ckpts: Vec<_> = tree_bytes(&out).into_iter().filter(|(n, _)| n.ends_with(".ckpt") && !n.contains("best")).collect();
    assert_eq!(ckpts.len(), 1);
    let m = read_json(&out.join("sgan.json"));
    let params = m["params"].as_u64().unwrap() as f64;
    let base = build_generator::<f32>(&GeneratorConfig::new(2), 0).unwrap().param_count() as f64;
    let quarter = build_generator::<f32>(&GeneratorConfig::new(2).scaled(NfScale::Quarter), 0).unwrap().param_count() as f64;
    assert_eq!(params, quarter);
    assert!((params / base - 0.25).abs() < 0.02, "{}", params / base);
    assert_eq!(m["run_config"]["extra"]["orientation"], "A");
    assert_eq!(code(&["train", "--task", "recon", "--baseline", "sgan", "--dataset", s(&data), "--out", s(&out)]), 2);
}

#[test]
fn order_search_emits_six_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path(), 3, 16, "2,1,0");
    let out = dir.path().join("search");
    let printed = ok(&[
        "order-search", "--task", "synth", "--epochs", "1", "--n-f", "1/16", "--parallel", "2", "--dataset", s(&data), "--out",
        s(&out),
    ]);
    assert_eq!(printed.lines().count(), 8);
    let table = read_json(&out.join("order_table.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let best = rows
        .iter()
        .max_by(|a, b| a["psnr"]["mean"].as_f64().unwrap().total_cmp(&b["psnr"]["mean"].as_f64().unwrap()))
        .unwrap();
    assert_eq!(best["order"], table["best"]);
    assert_eq!(read_json(&out.join("best").join("pipeline.json"))["order"], table["best"]);
    assert!(std::fs::read_to_string(out.join("order_table.txt")).unwrap().contains('*'));
}
