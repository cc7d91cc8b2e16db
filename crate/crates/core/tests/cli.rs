use std::path::Path;
use std::process::{Command, Output};

use aec_core::signal::{read_wav, write_wav, AudioClip, WavEncoding};
use aec_core::simulate::white_noise;

const TINY: &[&str] = &[
    "net.pe_channels=4",
    "net.encoder_channels=4,6",
    "net.tfcm_layers=2",
    "net.zom_stcm_hidden=8",
    "net.fom_stcm_hidden=8",
    "net.fom_context=2",
    "net.dprnn_hidden=4",
    "net.vad_channels=2",
    "net.vad_hidden=4",
    "kalman.block=256",
];

fn aec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr line")).expect("json error line")
}

fn write_pair(dir: &Path) {
    let x = white_noise(24_000, 48_000, 1);
    let d: Vec<f32> = (0..x.len())
        .map(|i| if i >= 40 { 0.5 * x.samples[i - 40] } else { 0.0 })
        .collect();
    write_wav(dir.join("x.wav"), &x, WavEncoding::Float32).unwrap();
    write_wav(dir.join("d.wav"), &AudioClip::new(d, 48_000).unwrap(), WavEncoding::Float32).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn silent_reference_passes_mic_through() {
    let dir = tempfile::tempdir().unwrap();
    let d = white_noise(9_600, 48_000, 5);
    write_wav(dir.path().join("d.wav"), &d, WavEncoding::Float32).unwrap();
    write_wav(dir.path().join("x.wav"), &AudioClip::zeros(9_600, 48_000), WavEncoding::Float32).unwrap();
    let out = dir.path().join("e.wav");
    let r = aec(&[
        "process",
        "--d",
        s(&dir.path().join("d.wav")),
        "--x",
        s(&dir.path().join("x.wav")),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(read_wav(&out).unwrap(), d);
}

#[test]
fn process_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let r = aec(&[
            "process",
            "--d",
            s(&dir.path().join("d.wav")),
            "--x",
            s(&dir.path().join("x.wav")),
            "--out",
            s(&out),
            "--set",
            "kalman.block=256",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.wav"), run("b.wav"));
}

#[test]
fn errors_are_json_lines_on_stderr() {
    let r = aec(&["process", "--d", "/nonexistent/d.wav", "--x", "/nonexistent/x.wav", "--out", "/tmp/o.wav"]);
    let v = error_line(&r);
    assert_eq!(v["error"], "wav");
    assert_eq!(v["code"], 10);
    assert_eq!(r.status.code(), Some(10));

    let v = error_line(&aec(&["frobnicate"]));
    assert_eq!(v["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path());
    let v = error_line(&aec(&[
        "process",
        "--d",
        s(&dir.path().join("d.wav")),
        "--x",
        s(&dir.path().join("x.wav")),
        "--out",
        s(&dir.path().join("e.wav")),
        "--set",
        "kalman.block=0",
    ]));
    assert_eq!(v["error"], "invalid_config");

    let v = error_line(&aec(&["evaluate", "--dataset", s(dir.path()), "--report", "/tmp/r.jsonl"]));
    assert_eq!(v["error"], "empty_dataset");
}

#[test]
fn synth_train_process_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    std::fs::write(
        &manifest,
        "id=fe seed=1 duration=3 scenario=ST-FE far=white path=random path_taps=64 delay=480 snr_db=inf\n\
         id=ne seed=2 duration=0.5 scenario=ST-NE\n\
         id=dt seed=3 duration=0.5 scenario=DT path=random path_taps=32 delay=40\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let r = aec(&["synth", "--manifest", s(&manifest), "--out", s(&data)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(data.join("fe").join("d.wav").is_file());

    // linear stage only
    let report = dir.path().join("report.jsonl");
    let r = aec(&["evaluate", "--dataset", s(&data), "--report", s(&report)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let recs: Vec<serde_json::Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 3);
    let fe = recs.iter().find(|r| r["id"] == "fe").unwrap();
    assert_eq!(fe["scenario"], "ST-FE");
    assert!(fe["erle_db"].as_f64().unwrap() >= 20.0, "{fe}");
    for r in &recs {
        assert!(r["rtf"].as_f64().unwrap() > 0.0);
    }
    let ne = recs.iter().find(|r| r["id"] == "ne").unwrap();
    assert_eq!(ne["scenario"], "ST-NE");
    assert!(ne["si_sdr_db"].is_number());

    // tiny post-filter
    let small = dir.path().join("small.txt");
    std::fs::write(&small, "id=dt seed=3 duration=0.25 scenario=DT path=random path_taps=32 delay=40\n").unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, TINY.join("\n") + "\ntrain.epochs=2\nlr.warmup=2\n").unwrap();
    let run_dir = dir.path().join("run");
    let r = aec(&["train", "--manifest", s(&small), "--config", s(&cfg), "--out", s(&run_dir)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = run_dir.join("checkpoint.ckpt");
    assert!(ckpt.is_file());
    assert_eq!(std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let item = data.join("dt");
    let process = |name: &str| {
        let out = dir.path().join(name);
        let r = aec(&[
            "process",
            "--d",
            s(&item.join("d.wav")),
            "--x",
            s(&item.join("x.wav")),
            "--out",
            s(&out),
            "--checkpoint",
            s(&ckpt),
            "--set",
            "kalman.block=256",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        std::fs::read(out).unwrap()
    };
    let a = process("a.wav");
    assert_eq!(a, process("b.wav"));
    let clip = read_wav(dir.path().join("a.wav")).unwrap();
    assert_eq!(clip.len(), read_wav(item.join("d.wav")).unwrap().len());

    let r = aec(&["evaluate", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--report", s(&report), "--jobs", "1"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: Vec<serde_json::Value> = String::from_utf8_lossy(&r.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(summary.len(), 3);
}
