use std::path::Path;
use std::process::Command;

fn dgcf(args: &[&str], data_root: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dgcf"))
        .args(args)
        .env("DGCF_DATA_ROOT", data_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{args:?}\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn synth_train_evaluate_translate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let config = dir.path().join("quick.toml");
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")).unwrap();
    let text = text.replace("epochs = 2", "epochs = 1").replace("runs/quick", &runs.display().to_string().replace('\\', "/"));
    std::fs::write(&config, text).unwrap();
    let config = config.to_str().unwrap();

    dgcf(&["synth", "--out", data.to_str().unwrap(), "--cases", "10", "--size", "32", "--depth", "2"], &data);
    assert!(data.join("manifest.csv").exists());

    // 10 cases split 7/1/2, two slices each, batch 2
    let out = dgcf(&["train", "--config", config], &data);
    assert!(out.contains("trained 7 steps"), "{out}");
    let ckpt = runs.join("final.ckpt");
    assert!(ckpt.exists() && runs.join("train_log.jsonl").exists());

    let report = dir.path().join("report.json");
    let out = dgcf(
        &["evaluate", "--ckpt", ckpt.to_str().unwrap(), "--config", config, "--segmenter", "threshold", "--out", report.to_str().unwrap()],
        &data,
    );
    assert!(out.contains("PSNR (dB)"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["aggregate"]["cases"], 2);

    let sct = dir.path().join("sct.nii.gz");
    let source = data.join("case000").join("source.nii.gz");
    dgcf(
        &["translate", "--ckpt", ckpt.to_str().unwrap(), "--in", source.to_str().unwrap(), "--out", sct.to_str().unwrap(), "--config", config],
        &data,
    );
    let v = dgcf::data::load_volume_with(&sct, dgcf::data::Modality::Ct).unwrap();
    assert_eq!(v.voxels.dim(), (2, 32, 32));
}
